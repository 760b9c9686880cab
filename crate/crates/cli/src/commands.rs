//! One function per subcommand.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::anyhow;
use panohdr::autodiff::suite::gradcheck_suite;
use panohdr::autodiff::Tensor;
use panohdr::datagen::{
    build_dataset, load_samples, network_input, read_manifest, training_set, Calibration, DataSplit, GeneratedSample,
    LinearizeMode, ManifestRow, MANIFEST_FILE,
};
use panohdr::eval::{match_corpus, metrics, peak_intensity, CorpusItem, IntensityTarget, MatchTarget, MetricReport};
use panohdr::net::{forward, load_checkpoint, save_checkpoint, ModelParams};
use panohdr::pano::io::{atomic_write, read_pfm, read_ppm, write_pfm, write_pfm_rgb, write_png_rgb8};
use panohdr::pano::{inverse_tonemap, tonemap, HdrPanorama, LdrPanorama, TonemapParams};
use panohdr::sun::{centering_shift, detect_sun, DEFAULT_SATURATION_THRESHOLD};
use panohdr::training::{self, write_log_csv, Dataset, TrainConfig, TrainOutcome};
use panohdr::transport::{build_transport, load_or_build, SceneSpec, TransportMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::failure::{Failure, Fallible};
use crate::keys::Settings;

pub const MODEL_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.csv";
pub const CONFIG_FILE: &str = "config.cfg";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
/// Samples per forward pass during batch inference.
const INFER_CHUNK: usize = 16;

fn create_dir(dir: &Path) -> Fallible<()> {
    fs::create_dir_all(dir).map_err(|e| Failure::data(anyhow!("creating {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Fallible<()> {
    Ok(atomic_write(path, |w| w.write_all(text.as_bytes()))?)
}

fn load_dataset(dir: &Path) -> Fallible<Vec<GeneratedSample>> {
    let rows = read_manifest(&dir.join(MANIFEST_FILE))?;
    Ok(load_samples(dir, &rows)?)
}

fn split_set(samples: &[GeneratedSample], split: DataSplit, s: &Settings) -> Fallible<Dataset<f32>> {
    let ds = training_set::<f32>(samples, split, s.input_mode()?, &s.tonemap()?)?;
    if ds.is_empty() {
        return Err(Failure::data(anyhow!("the {split} split is empty")));
    }
    Ok(ds)
}

/// Cached matrix at `path` when given, otherwise built in memory.
fn transport(scene: &SceneSpec, path: Option<&Path>, w: usize, h: usize) -> Fallible<Arc<TransportMatrix<f32>>> {
    let t = match path {
        Some(p) => load_or_build::<f32>(scene, w, h, p)?,
        None => build_transport::<f32>(scene, w, h)?,
    };
    Ok(Arc::new(t))
}

pub fn gen(s: &Settings, out: &Path) -> Fallible<()> {
    let cfg = s.gen()?;
    create_dir(out)?;
    let rows = build_dataset(out, &cfg)?;
    println!("wrote {} samples to {}", rows.len(), out.display());
    Ok(())
}

fn finish_training(s: &Settings, out: &Path, outcome: &TrainOutcome<f32>) -> Fallible<()> {
    save_checkpoint(&outcome.params, &out.join(MODEL_FILE))?;
    write_log_csv(&out.join(LOG_FILE), &outcome.log)?;
    write_text(&out.join(CONFIG_FILE), &s.kv().to_text())?;
    let best = outcome.best_val_loss.map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}"));
    println!(
        "epochs run {}, best epoch {}, best validation loss {best}{}",
        outcome.epochs_run,
        outcome.best_epoch,
        if outcome.stopped_early { " (stopped early)" } else { "" }
    );
    Ok(())
}

struct Prepared {
    train: Dataset<f32>,
    val: Dataset<f32>,
    t: Arc<TransportMatrix<f32>>,
    cfg: TrainConfig,
}

fn prepare(s: &Settings, data: &Path, transport_path: Option<&Path>) -> Fallible<Prepared> {
    let cfg = s.train()?;
    let samples = load_dataset(data)?;
    let train = split_set(&samples, DataSplit::Train, s)?;
    let val = split_set(&samples, DataSplit::Val, s)?;
    let t = transport(&s.scene()?, transport_path, train.width(), train.height())?;
    Ok(Prepared { train, val, t, cfg })
}

pub fn train(s: &Settings, data: &Path, out: &Path, transport_path: Option<&Path>) -> Fallible<()> {
    let p = prepare(s, data, transport_path)?;
    let net = s.net(p.train.width(), p.train.height())?;
    let init = ModelParams::<f32>::init(&net, false, p.cfg.seed)?;
    create_dir(out)?;
    let outcome = training::train(&init, &p.train, &p.val, &p.t, &p.cfg)?;
    finish_training(s, out, &outcome)
}

pub fn finetune(s: &Settings, data: &Path, init: &Path, out: &Path, transport_path: Option<&Path>) -> Fallible<()> {
    let p = prepare(s, data, transport_path)?;
    let params = load_checkpoint::<f32>(init)?;
    create_dir(out)?;
    let outcome = training::fine_tune(&params, &p.train, &p.val, &p.t, &p.cfg)?;
    finish_training(s, out, &outcome)
}

/// Sun-centered network inputs of every LDR panorama in `dir`: the rows of
/// its manifest when present, otherwise all `.ppm` files in name order.
fn unlabelled_inputs(dir: &Path, mode: LinearizeMode) -> Fallible<Vec<Vec<f32>>> {
    let manifest = dir.join(MANIFEST_FILE);
    let items: Vec<(PathBuf, Option<Calibration>)> = if manifest.exists() {
        read_manifest(&manifest)?.iter().map(|r| Ok((dir.join(&r.ldr), Some(r.calibration()?)))).collect::<Fallible<_>>()?
    } else {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
            .collect();
        files.sort();
        files.into_iter().map(|p| (p, None)).collect()
    };
    if items.is_empty() {
        return Err(Failure::data(anyhow!("no LDR panoramas in {}", dir.display())));
    }
    items
        .par_iter()
        .map(|(path, calib)| {
            let (ldr, _) = center(&read_ppm(path)?);
            Ok(network_input(&ldr, mode, calib.as_ref())?)
        })
        .collect()
}

pub fn train_da(s: &Settings, data: &Path, real: &Path, out: &Path, init: Option<&Path>, transport_path: Option<&Path>) -> Fallible<()> {
    let p = prepare(s, data, transport_path)?;
    let params = match init {
        Some(path) => load_checkpoint::<f32>(path)?,
        None => ModelParams::<f32>::init(&s.net(p.train.width(), p.train.height())?, true, p.cfg.seed)?,
    };
    let real_inputs = unlabelled_inputs(real, s.input_mode()?)?;
    create_dir(out)?;
    let outcome = training::train_domain_adapted(&params, &p.train, &real_inputs, &p.val, &p.t, &p.cfg)?;
    finish_training(s, out, &outcome)
}

/// Rotates the sun onto the center column; returns the applied shift.
/// Panoramas without a saturated region are used as they are.
fn center(ldr: &LdrPanorama) -> (LdrPanorama, isize) {
    match detect_sun(ldr, DEFAULT_SATURATION_THRESHOLD) {
        Ok(sun) => {
            let shift = centering_shift(&sun, ldr.width());
            (ldr.rotate_azimuth(shift), shift)
        }
        Err(_) => (ldr.clone(), 0),
    }
}

/// Linear HDR predictions and elevations of planar inputs.
fn predict(params: &ModelParams<f32>, inputs: &[Vec<f32>], w: usize, h: usize, tm: &TonemapParams) -> Fallible<Vec<(HdrPanorama<f32>, f64)>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(INFER_CHUNK) {
        let x = Tensor::new(&[chunk.len(), 3, h, w], chunk.concat());
        let (hdr, elev) = forward(params, &x)?;
        let per = 3 * w * h;
        for (k, e) in elev.iter().enumerate() {
            let planar = &hdr.data()[k * per..(k + 1) * per];
            if planar.iter().any(|v| !v.is_finite()) {
                return Err(Failure::numerical(anyhow!("non-finite prediction")));
            }
            let tm_pano = HdrPanorama::from_planar(w, h, planar)?;
            out.push((inverse_tonemap(&tm_pano, tm)?, f64::from(*e)));
        }
    }
    Ok(out)
}

fn check_input_size(params: &ModelParams<f32>, ldr: &LdrPanorama) -> Fallible<()> {
    let c = params.config();
    if (ldr.width(), ldr.height()) != (c.input_width, c.input_height) {
        return Err(Failure::data(anyhow!(
            "panorama is {}x{} but the model expects {}x{}",
            ldr.width(),
            ldr.height(),
            c.input_width,
            c.input_height
        )));
    }
    Ok(())
}

fn parse_wb(s: &Settings) -> Fallible<[f64; 3]> {
    let v: Vec<f64> = s.list("data.wb")?;
    v.try_into().map_err(|_| Failure::usage(anyhow!("config key `data.wb` needs three gains")))
}

/// Single panorama: writes the HDR prediction in the input's orientation
/// and prints the predicted sun elevation.
pub fn infer_one(s: &Settings, model: &Path, input: &Path, out: &Path) -> Fallible<()> {
    let params = load_checkpoint::<f32>(model)?;
    let ldr = read_ppm(input)?;
    check_input_size(&params, &ldr)?;
    let calib = Calibration { crf: s.get::<String>("data.crf")?.parse()?, wb_gains: parse_wb(s)? };
    let (centered, shift) = center(&ldr);
    let x = network_input::<f32>(&centered, s.input_mode()?, Some(&calib))?;
    let (hdr, elevation) = predict(&params, &[x], ldr.width(), ldr.height(), &s.tonemap()?)?.remove(0);
    write_pfm(out, &hdr.rotate_azimuth(-shift))?;
    println!("sun_elevation_rad {elevation:.6}");
    println!("sun_elevation_deg {:.4}", elevation.to_degrees());
    Ok(())
}

/// One predicted or ground-truth panorama of a directory listing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: String,
    /// Relative to the directory.
    pub hdr: String,
    pub sun_elevation: f64,
}

fn selected_rows(rows: Vec<ManifestRow>, split: &str) -> Fallible<Vec<ManifestRow>> {
    if split == "all" {
        return Ok(rows);
    }
    let split: DataSplit = split.parse()?;
    Ok(rows.into_iter().filter(|r| r.split == split).collect())
}

/// Dataset directory: predictions for `infer.split`, one PFM per sample
/// plus a listing with predicted elevations.
pub fn infer_dataset(s: &Settings, model: &Path, data: &Path, out: &Path) -> Fallible<()> {
    let params = load_checkpoint::<f32>(model)?;
    let rows = selected_rows(read_manifest(&data.join(MANIFEST_FILE))?, &s.get::<String>("infer.split")?)?;
    let samples = load_samples(data, &rows)?;
    let mode = s.input_mode()?;
    let Some(first) = samples.first() else {
        return Err(Failure::data(anyhow!("no samples selected")));
    };
    check_input_size(&params, &first.ldr)?;
    let (w, h) = (first.ldr.width(), first.ldr.height());
    let prepared: Vec<(Vec<f32>, isize)> = samples
        .par_iter()
        .map(|g| {
            let (centered, shift) = center(&g.ldr);
            Ok((network_input(&centered, mode, Some(&g.row.calibration()?))?, shift))
        })
        .collect::<Fallible<_>>()?;
    let inputs: Vec<Vec<f32>> = prepared.iter().map(|(x, _)| x.clone()).collect();
    let preds = predict(&params, &inputs, w, h, &s.tonemap()?)?;
    create_dir(&out.join("hdr"))?;
    let mut listing = Vec::with_capacity(preds.len());
    for ((g, (_, shift)), (hdr, elevation)) in samples.iter().zip(&prepared).zip(&preds) {
        let rel = format!("hdr/{}.pfm", g.row.id);
        write_pfm(&out.join(&rel), &hdr.rotate_azimuth(-shift))?;
        listing.push(PredictionRow { id: g.row.id.clone(), hdr: rel, sun_elevation: *elevation });
    }
    write_listing(&out.join(PREDICTIONS_FILE), &listing)?;
    println!("wrote {} predictions to {}", listing.len(), out.display());
    Ok(())
}

fn write_listing(path: &Path, rows: &[PredictionRow]) -> Fallible<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Failure::data(anyhow!("{e}")))?;
    Ok(atomic_write(path, |f| f.write_all(&bytes))?)
}

/// Listing of a prediction directory, or of a dataset directory's manifest.
pub fn read_listing(dir: &Path) -> Fallible<Vec<PredictionRow>> {
    let pred = dir.join(PREDICTIONS_FILE);
    if pred.exists() {
        let mut r = csv::Reader::from_path(&pred)?;
        return r.deserialize().map(|row| row.map_err(Failure::from)).collect();
    }
    let manifest = dir.join(MANIFEST_FILE);
    if manifest.exists() {
        return Ok(read_manifest(&manifest)?
            .into_iter()
            .map(|r| PredictionRow { id: r.id, hdr: r.hdr, sun_elevation: r.sun_elevation })
            .collect());
    }
    Err(Failure::data(anyhow!("{} has neither {PREDICTIONS_FILE} nor {MANIFEST_FILE}", dir.display())))
}

fn write_report(report: &MetricReport, out: &Path) -> Fallible<()> {
    create_dir(out)?;
    report.write(&out.join(METRICS_FILE), &out.join(SUMMARY_FILE))?;
    print!("{}", report.to_text());
    Ok(())
}

/// Metrics of the predictions in `pred` against the panoramas in `truth`.
pub fn eval_dirs(s: &Settings, pred: &Path, truth: &Path, out: &Path, transport_path: Option<&Path>) -> Fallible<()> {
    let tm = s.tonemap()?;
    let preds = read_listing(pred)?;
    let truths: std::collections::HashMap<String, PredictionRow> = read_listing(truth)?.into_iter().map(|r| (r.id.clone(), r)).collect();
    if preds.is_empty() {
        return Err(Failure::data(anyhow!("no predictions in {}", pred.display())));
    }
    let pairs: Vec<(&PredictionRow, &PredictionRow)> = preds
        .iter()
        .map(|p| truths.get(&p.id).map(|t| (p, t)).ok_or_else(|| Failure::data(anyhow!("no ground truth for {}", p.id))))
        .collect::<Fallible<_>>()?;
    let first = read_pfm(&pred.join(&pairs[0].0.hdr))?;
    let t = transport(&s.scene()?, transport_path, first.width(), first.height())?;
    let samples = pairs
        .par_iter()
        .map(|(p, q)| {
            let a = read_pfm(&pred.join(&p.hdr))?;
            let b = read_pfm(&truth.join(&q.hdr))?;
            if (a.width(), a.height()) != (b.width(), b.height()) || (a.width(), a.height()) != (first.width(), first.height()) {
                return Err(Failure::data(anyhow!("{}: prediction and truth sizes differ", p.id)));
            }
            Ok((p.id.clone(), metrics(&a, &b, p.sun_elevation, q.sun_elevation, &t, &tm)))
        })
        .collect::<Fallible<Vec<_>>>()?;
    write_report(&MetricReport::from_samples(samples), out)
}

/// Metrics of a checkpoint on one split of a dataset.
pub fn eval_model(s: &Settings, model: &Path, data: &Path, out: &Path, transport_path: Option<&Path>) -> Fallible<()> {
    let params = load_checkpoint::<f32>(model)?;
    let split: DataSplit = s.get::<String>("eval.split")?.parse()?;
    let set = split_set(&load_dataset(data)?, split, s)?;
    let t = transport(&s.scene()?, transport_path, set.width(), set.height())?;
    let cfg = TrainConfig { batch_size: s.get("eval.batch_size")?, tonemap: s.tonemap()?, ..TrainConfig::default() };
    let ev = training::evaluate(&params, &set, &t, &cfg)?;
    write_report(&ev.report, out)
}

/// Renders the transport scene lit by a panorama.
pub fn render(s: &Settings, pano: &Path, out: &Path, raw: Option<&Path>, transport_path: Option<&Path>) -> Fallible<()> {
    let p = read_pfm(pano)?;
    let t = transport(&s.scene()?, transport_path, p.width(), p.height())?;
    let img = t.render_panorama(&p);
    let rgb = img.to_interleaved_f32();
    if let Some(path) = raw {
        write_pfm_rgb(path, img.width, img.height, &rgb)?;
    }
    let exposure = match s.get::<String>("render.exposure")?.as_str() {
        "auto" => {
            let mut v: Vec<f32> = rgb.iter().copied().filter(|v| *v > 0.0).collect();
            v.sort_by(f32::total_cmp);
            v.get(v.len().saturating_sub(1) * 99 / 100).map_or(1.0, |p| 1.0 / f64::from(*p))
        }
        _ => s.get::<f64>("render.exposure")?,
    };
    if !(exposure > 0.0 && exposure.is_finite()) {
        return Err(Failure::usage(anyhow!("render.exposure must be positive")));
    }
    let bytes: Vec<u8> =
        rgb.iter().map(|v| ((f64::from(*v) * exposure).clamp(0.0, 1.0).powf(1.0 / 2.2) * 255.0).round() as u8).collect();
    write_png_rgb8(out, img.width, img.height, &bytes)?;
    println!("rendered {}x{} with exposure {exposure:.6}", img.width, img.height);
    Ok(())
}

/// Corpus ids ranked by closeness to the requested sun intensity and elevation.
pub fn match_ids(s: &Settings, pred: &Path) -> Fallible<Vec<String>> {
    let tm = s.tonemap()?;
    let corpus = read_listing(pred)?
        .par_iter()
        .map(|r| {
            let p = read_pfm(&pred.join(&r.hdr))?;
            Ok(CorpusItem { id: r.id.clone(), intensity: peak_intensity(&tonemap(&p, &tm).to_planar()), elevation: r.sun_elevation })
        })
        .collect::<Fallible<Vec<_>>>()?;
    let intensity: IntensityTarget = s.get::<String>("match.intensity")?.parse()?;
    let mut target = MatchTarget::new(intensity, s.get("match.elevation")?);
    target.weights = (s.get("match.weight_intensity")?, s.get("match.weight_elevation")?);
    Ok(match_corpus(&corpus, &target, s.get("match.k")?)?)
}

pub fn gradcheck(s: &Settings) -> Fallible<()> {
    let (instances, seed, tol): (usize, u64, f64) = (s.get("gradcheck.instances")?, s.get("gradcheck.seed")?, s.get("gradcheck.tolerance")?);
    if instances == 0 {
        return Err(Failure::usage(anyhow!("gradcheck.instances must be at least 1")));
    }
    let rows = gradcheck_suite(instances, seed, tol);
    println!("{:<20} {:>9} {:>14}  result", "op", "instances", "worst_rel_err");
    for r in &rows {
        println!("{:<20} {:>9} {:>14.3e}  {}", r.op, r.instances, r.worst_rel_error, if r.passed { "PASS" } else { "FAIL" });
    }
    let failed = rows.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Failure::numerical(anyhow!("{failed} of {} ops exceed relative error {tol}", rows.len())));
    }
    Ok(())
}

pub fn build_transport_cache(s: &Settings, out: &Path) -> Fallible<()> {
    let (w, h): (usize, usize) = (s.get("transport.pano_width")?, s.get("transport.pano_height")?);
    let start = Instant::now();
    let t = build_transport::<f32>(&s.scene()?, w, h)?;
    t.write_cache(out)?;
    println!("transport {}x{} built in {:.1}s", t.rows(), t.cols(), start.elapsed().as_secs_f64());
    Ok(())
}
