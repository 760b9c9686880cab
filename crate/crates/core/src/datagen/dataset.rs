//! Augmented sample sets on disk with a CSV manifest.
//!
//! Layout of a dataset directory:
//! * `hdr/<id>.pfm`: linear ground truth in the exposure units of the LDR;
//! * `ldr/<id>.ppm`: 8-bit camera view;
//! * `manifest.csv`: one row per sample, columns as in [`ManifestRow`];
//! * `generator.cfg`: the generator config, `gen.*` keys.
//!
//! Every scene is one group; a group lands wholly in one split. Each base
//! sample expands into 2 flips × 3 exposure steps.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    auto_exposure, derive_ldr, exposure_factor, fit_wb_gains, gen_panorama, linearize_input, Calibration, CrfParams, DatagenError,
    GroundParams, LinearizeMode, SkyParams, WbShift, EXPOSURE_STEPS,
};
use crate::kv::{KvConfig, KvError};
use crate::pano::io::{atomic_write, read_pfm, read_ppm, write_pfm, write_ppm};
use crate::pano::{tonemap, HdrPanorama, LdrPanorama, TonemapParams};
use crate::training::{Dataset, Sample};
use crate::Real;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const GENERATOR_FILE: &str = "generator.cfg";
/// Augmented copies of each base sample.
pub const AUGMENTATIONS: usize = 2 * EXPOSURE_STEPS.len();
/// Mixed into the per-scene random streams.
const SCENE_STREAM: u64 = 1 << 40;

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub width: usize,
    pub height: usize,
    pub scenes: usize,
    pub samples_per_scene: usize,
    /// Train, validation and test shares of the scene groups.
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self { width: 128, height: 64, scenes: 60, samples_per_scene: 4, fractions: [0.69, 0.15, 0.16], seed: 0 }
    }
}

/// Config keys with their default values.
pub fn gen_keys() -> Vec<(&'static str, String)> {
    let d = GenConfig::default();
    vec![
        ("gen.width", d.width.to_string()),
        ("gen.height", d.height.to_string()),
        ("gen.scenes", d.scenes.to_string()),
        ("gen.samples_per_scene", d.samples_per_scene.to_string()),
        ("gen.train_fraction", d.fractions[0].to_string()),
        ("gen.val_fraction", d.fractions[1].to_string()),
        ("gen.test_fraction", d.fractions[2].to_string()),
        ("gen.seed", d.seed.to_string()),
    ]
}

impl GenConfig {
    /// Reads the `gen.*` keys; absent keys keep their defaults.
    pub fn from_kv(kv: &KvConfig) -> Result<Self, KvError> {
        let d = Self::default();
        Ok(Self {
            width: kv.value("gen.width", d.width)?,
            height: kv.value("gen.height", d.height)?,
            scenes: kv.value("gen.scenes", d.scenes)?,
            samples_per_scene: kv.value("gen.samples_per_scene", d.samples_per_scene)?,
            fractions: [
                kv.value("gen.train_fraction", d.fractions[0])?,
                kv.value("gen.val_fraction", d.fractions[1])?,
                kv.value("gen.test_fraction", d.fractions[2])?,
            ],
            seed: kv.value("gen.seed", d.seed)?,
        })
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("gen.width", self.width.to_string());
        kv.set("gen.height", self.height.to_string());
        kv.set("gen.scenes", self.scenes.to_string());
        kv.set("gen.samples_per_scene", self.samples_per_scene.to_string());
        kv.set("gen.train_fraction", format!("{:?}", self.fractions[0]));
        kv.set("gen.val_fraction", format!("{:?}", self.fractions[1]));
        kv.set("gen.test_fraction", format!("{:?}", self.fractions[2]));
        kv.set("gen.seed", self.seed.to_string());
        kv
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        if self.height == 0 || self.width != 2 * self.height || self.height % 2 != 0 {
            return Err(DatagenError::Params(format!("size {}x{} must have width = 2 * height, height even", self.width, self.height)));
        }
        if self.scenes == 0 || self.samples_per_scene == 0 {
            return Err(DatagenError::Params("scenes and samples per scene must be positive".into()));
        }
        check_fractions(self.fractions)
    }
}

fn check_fractions(f: [f64; 3]) -> Result<(), DatagenError> {
    if f.iter().any(|v| !(*v >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DatagenError::Fractions(f));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSplit {
    Train,
    Val,
    Test,
}

impl fmt::Display for DataSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        })
    }
}

impl FromStr for DataSplit {
    type Err = DatagenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            _ => Err(DatagenError::Params(format!("unknown split {s:?} (expected train, val, test)"))),
        }
    }
}

/// Split of each of `groups` groups: train and validation counts are the
/// rounded shares, the test split takes the rest. Groups are shuffled by `seed`.
pub fn assign_splits(groups: usize, fractions: [f64; 3], seed: u64) -> Result<Vec<DataSplit>, DatagenError> {
    check_fractions(fractions)?;
    let n_train = ((groups as f64 * fractions[0]).round() as usize).min(groups);
    let n_val = ((groups as f64 * fractions[1]).round() as usize).min(groups - n_train);
    let mut order: Vec<usize> = (0..groups).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut splits = vec![DataSplit::Test; groups];
    for (rank, &g) in order.iter().enumerate() {
        if rank < n_train {
            splits[g] = DataSplit::Train;
        } else if rank < n_train + n_val {
            splits[g] = DataSplit::Val;
        }
    }
    Ok(splits)
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub group: String,
    pub split: DataSplit,
    /// Paths relative to the dataset directory.
    pub hdr: String,
    pub ldr: String,
    /// Ground-truth sun, radians and fractional pixels.
    pub sun_elevation: f64,
    pub sun_azimuth: f64,
    pub sun_row: f64,
    pub sun_col: f64,
    /// Exposure step `x` of the `1.75^x` augmentation.
    pub exposure_x: i32,
    /// Total linear scale from generator radiance to stored HDR.
    pub exposure_scale: f64,
    pub flip: bool,
    /// Response curve, `gamma:<g>` or `sigmoid:<g>:<strength>:<midpoint>`.
    pub crf: String,
    pub hue_shift: f64,
    pub sat_shift: f64,
    /// Diagonal white balance fitted from the inverse-response image to the
    /// exposed ground truth.
    pub wb_r: f64,
    pub wb_g: f64,
    pub wb_b: f64,
}

impl ManifestRow {
    pub fn calibration(&self) -> Result<Calibration, DatagenError> {
        Ok(Calibration { crf: self.crf.parse()?, wb_gains: [self.wb_r, self.wb_g, self.wb_b] })
    }
}

/// A sample held in memory, exactly as it is written to disk.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedSample {
    pub row: ManifestRow,
    pub hdr: HdrPanorama<f32>,
    pub ldr: LdrPanorama,
}

fn sample_id(group: usize, sample: usize, flip: bool, x: i32) -> String {
    format!("g{group:04}_s{sample:02}_f{}_x{x:+}", u8::from(flip))
}

/// Generator draws of one base sample.
struct BaseDraw {
    sky: SkyParams,
    crf: CrfParams,
    shift: WbShift,
}

fn scene_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn base_samples(cfg: &GenConfig, group: usize, split: DataSplit) -> Result<Vec<GeneratedSample>, DatagenError> {
    let (w, h) = (cfg.width, cfg.height);
    let ground = GroundParams::sample(&mut scene_rng(cfg.seed, SCENE_STREAM + group as u64));
    let mut out = Vec::with_capacity(cfg.samples_per_scene * AUGMENTATIONS);
    for s in 0..cfg.samples_per_scene {
        let mut rng = scene_rng(cfg.seed, (group * cfg.samples_per_scene + s) as u64);
        let draw = BaseDraw { sky: SkyParams::sample(&mut rng), crf: CrfParams::sample(&mut rng), shift: WbShift::sample(&mut rng) };
        let _ = rng.random::<u64>();
        let (raw, sun) = gen_panorama(&draw.sky, &ground, w, h)?;
        let k = auto_exposure(&raw, draw.shift);
        for flip in [false, true] {
            // flipping mirrors the sun to column w/2 - 1; one step puts it back
            let (pano, sun) = if flip { (raw.hflip().rotate_azimuth(1), sun.flipped(w).shifted(1, w)) } else { (raw.clone(), sun) };
            for x in EXPOSURE_STEPS {
                let scale = k * exposure_factor(x);
                let exposed = pano.try_map(|v| v * scale)?;
                let ldr = derive_ldr(&exposed, 1.0, &draw.crf, draw.shift)?;
                let rf = linearize_input(&ldr, LinearizeMode::Rf, Some(&Calibration::new(draw.crf)))?;
                let wb = fit_wb_gains(&rf, &exposed)?;
                let id = sample_id(group, s, flip, x);
                let row = ManifestRow {
                    hdr: format!("hdr/{id}.pfm"),
                    ldr: format!("ldr/{id}.ppm"),
                    id,
                    group: format!("g{group:04}"),
                    split,
                    sun_elevation: sun.elevation,
                    sun_azimuth: sun.azimuth,
                    sun_row: sun.row,
                    sun_col: sun.col,
                    exposure_x: x,
                    exposure_scale: scale,
                    flip,
                    crf: draw.crf.to_string(),
                    hue_shift: draw.shift.hue,
                    sat_shift: draw.shift.saturation,
                    wb_r: wb[0],
                    wb_g: wb[1],
                    wb_b: wb[2],
                };
                out.push(GeneratedSample { row, hdr: exposed.cast(), ldr });
            }
        }
    }
    Ok(out)
}

/// All samples of a config, ordered by group, base sample, flip, exposure.
pub fn generate(cfg: &GenConfig) -> Result<Vec<GeneratedSample>, DatagenError> {
    cfg.validate()?;
    let splits = assign_splits(cfg.scenes, cfg.fractions, cfg.seed)?;
    let per_group: Vec<Vec<GeneratedSample>> =
        (0..cfg.scenes).into_par_iter().map(|g| base_samples(cfg, g, splits[g])).collect::<Result<_, _>>()?;
    Ok(per_group.into_iter().flatten().collect())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatagenError + '_ {
    move |source| DatagenError::Io { path: path.display().to_string(), source }
}

pub fn manifest_csv(rows: &[ManifestRow]) -> Result<Vec<u8>, DatagenError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| DatagenError::Manifest(e.to_string()))?;
    }
    w.into_inner().map_err(|e| DatagenError::Manifest(e.to_string()))
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<(), DatagenError> {
    let bytes = manifest_csv(rows)?;
    Ok(atomic_write(path, |w| std::io::Write::write_all(w, &bytes))?)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>, DatagenError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| DatagenError::Manifest(format!("{}: {e}", path.display())))?;
    r.deserialize().map(|row| row.map_err(|e| DatagenError::Manifest(format!("{}: {e}", path.display())))).collect()
}

/// Writes a generated set into `dir`; the manifest goes last.
pub fn write_dataset(dir: &Path, cfg: &GenConfig, samples: &[GeneratedSample]) -> Result<(), DatagenError> {
    for sub in ["hdr", "ldr"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    samples.par_iter().try_for_each(|s| -> Result<(), DatagenError> {
        write_pfm(&dir.join(&s.row.hdr), &s.hdr)?;
        write_ppm(&dir.join(&s.row.ldr), &s.ldr)?;
        Ok(())
    })?;
    let text = cfg.to_kv().to_text();
    atomic_write(&dir.join(GENERATOR_FILE), |w| std::io::Write::write_all(w, text.as_bytes()))?;
    let rows: Vec<ManifestRow> = samples.iter().map(|s| s.row.clone()).collect();
    write_manifest(&dir.join(MANIFEST_FILE), &rows)
}

/// Generates and writes a dataset; returns its manifest rows.
pub fn build_dataset(dir: &Path, cfg: &GenConfig) -> Result<Vec<ManifestRow>, DatagenError> {
    let samples = generate(cfg)?;
    write_dataset(dir, cfg, &samples)?;
    Ok(samples.into_iter().map(|s| s.row).collect())
}

/// Reads the images of `rows` from `dir`.
pub fn load_samples(dir: &Path, rows: &[ManifestRow]) -> Result<Vec<GeneratedSample>, DatagenError> {
    rows.par_iter()
        .map(|row| Ok(GeneratedSample { row: row.clone(), hdr: read_pfm(&dir.join(&row.hdr))?, ldr: read_ppm(&dir.join(&row.ldr))? }))
        .collect()
}

/// Network input of an LDR view, planar.
pub fn network_input<S: Real>(ldr: &LdrPanorama, mode: LinearizeMode, calib: Option<&Calibration>) -> Result<Vec<S>, DatagenError> {
    if mode == LinearizeMode::Jpg {
        return Ok(ldr.normalized_planar());
    }
    Ok(linearize_input(ldr, mode, calib)?.cast::<S>().to_planar())
}

/// Training set of the samples in `split`, targets tonemapped.
pub fn training_set<S: Real>(
    samples: &[GeneratedSample],
    split: DataSplit,
    mode: LinearizeMode,
    tm: &TonemapParams,
) -> Result<Dataset<S>, DatagenError> {
    let chosen: Vec<&GeneratedSample> = samples.iter().filter(|s| s.row.split == split).collect();
    let (w, h) = chosen.first().map(|s| (s.ldr.width(), s.ldr.height())).unwrap_or((0, 0));
    let built: Vec<Sample<S>> = chosen
        .par_iter()
        .map(|s| {
            let calib = s.row.calibration()?;
            Ok(Sample {
                id: s.row.id.clone(),
                group: s.row.group.clone(),
                input: network_input(&s.ldr, mode, Some(&calib))?,
                target: tonemap(&s.hdr, tm).cast::<S>().to_planar(),
                elevation: s.row.sun_elevation,
            })
        })
        .collect::<Result<_, DatagenError>>()?;
    let mut ds = Dataset::new(w, h);
    for s in built {
        ds.push(s);
    }
    Ok(ds)
}
