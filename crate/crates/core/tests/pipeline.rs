//! Cross-module flows through the public API.

use std::sync::Arc;

use panohdr::datagen::{generate, load_samples, network_input, read_manifest, training_set, write_dataset, DataSplit, GenConfig, LinearizeMode};
use panohdr::net::{forward, load_checkpoint, save_checkpoint, ModelParams, NetConfig};
use panohdr::pano::TonemapParams;
use panohdr::sun::{detect_sun, DEFAULT_SATURATION_THRESHOLD};
use panohdr::training::{train, Split, TrainConfig};
use panohdr::transport::{build_transport, SceneSpec};
use panohdr::Tensor32;

fn small() -> GenConfig {
    GenConfig { width: 64, height: 32, scenes: 6, samples_per_scene: 1, ..GenConfig::default() }
}

#[test]
fn dataset_survives_a_disk_round_trip() {
    let cfg = small();
    let samples = generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &cfg, &samples).unwrap();
    let rows = read_manifest(&dir.path().join("manifest.csv")).unwrap();
    assert_eq!(load_samples(dir.path(), &rows).unwrap(), samples);
}

#[test]
fn detector_recovers_generated_sun_labels() {
    let cfg = small();
    let mut checked = 0;
    for s in generate(&cfg).unwrap() {
        // an underexposed sun may not clip; nothing to detect then
        let Ok(found) = detect_sun(&s.ldr, DEFAULT_SATURATION_THRESHOLD) else { continue };
        let w = cfg.width as f64;
        let dc = (found.col - s.row.sun_col).rem_euclid(w);
        assert!((found.row - s.row.sun_row).abs() <= 1.5, "{}: row {} vs {}", s.row.id, found.row, s.row.sun_row);
        assert!(dc.min(w - dc) <= 1.5, "{}: col {} vs {}", s.row.id, found.col, s.row.sun_col);
        checked += 1;
    }
    assert!(checked >= 18, "only {checked} suns detected");
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let cfg = small();
    let samples = generate(&cfg).unwrap();
    let net = NetConfig { input_width: 64, input_height: 32, ..NetConfig::desk() };
    let params = ModelParams::<f32>::init(&net, false, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&params, &path).unwrap();
    let loaded = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(loaded, params);

    let input: Vec<f32> = network_input(&samples[0].ldr, LinearizeMode::Jpg, None).unwrap();
    let x = Tensor32::new(&[1, 3, 32, 64], input);
    assert_eq!(forward(&params, &x).unwrap(), forward(&loaded, &x).unwrap());
}

#[test]
fn short_training_lowers_the_training_loss() {
    let tm = TonemapParams::default();
    let samples = generate(&small()).unwrap();
    let train_set = training_set::<f32>(&samples, DataSplit::Train, LinearizeMode::Jpg, &tm).unwrap();
    let val = training_set::<f32>(&samples, DataSplit::Val, LinearizeMode::Jpg, &tm).unwrap();
    let t = Arc::new(build_transport::<f32>(&SceneSpec { resolution: 16, ..SceneSpec::default() }, 64, 32).unwrap());
    let init = ModelParams::init(&NetConfig { input_width: 64, input_height: 32, ..NetConfig::desk() }, false, 0).unwrap();
    let out = train(&init, &train_set, &val, &t, &TrainConfig { epochs: 8, batch_size: 8, ..TrainConfig::default() }).unwrap();
    let losses: Vec<f64> = out.log.iter().filter(|r| r.split == Split::Train).map(|r| r.losses.all).collect();
    assert_eq!(losses.len(), 8);
    assert!(losses.iter().all(|l| l.is_finite()));
    assert!(losses[7] < losses[0], "{losses:?}");
}

#[test]
fn rendering_generated_skies_is_linear() {
    let samples = generate(&small()).unwrap();
    let t = build_transport::<f64>(&SceneSpec { resolution: 16, ..SceneSpec::default() }, 64, 32).unwrap();
    let sky = |i: usize| -> Vec<f64> { samples[i].hdr.cast::<f64>().top_hemisphere_planar()[..t.cols()].to_vec() };
    let (a, b) = (sky(0), sky(1));
    let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + 2.0 * y).collect();
    let (ra, rb, rs) = (t.render(&a), t.render(&b), t.render(&sum));
    for i in 0..rs.len() {
        let expect = ra[i] + 2.0 * rb[i];
        assert!((rs[i] - expect).abs() <= 1e-9 * expect.abs().max(1.0), "pixel {i}");
        assert!(ra[i] >= 0.0);
    }
}
