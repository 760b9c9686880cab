//! One day at a fixed place: the sun rises, culminates and sets.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{auto_exposure, derive_ldr, gen_panorama, CrfParams, DatagenError, GroundParams, SkyParams, WbShift};
use super::{MAX_SUN_ELEVATION, MAX_SUN_RATIO, MIN_SUN_ELEVATION, MIN_SUN_RATIO};
use crate::eval::peak_intensity;
use crate::pano::{tonemap, HdrPanorama, LdrPanorama, TonemapParams};
use crate::sun::SunPosition;

/// Atmospheric extinction per unit of relative air mass, for the sun ratio.
const EXTINCTION: f64 = 0.3;

pub struct DayFrame {
    /// Sun-centered exposed LDR view.
    pub ldr: LdrPanorama,
    /// Ground truth in the same exposure units.
    pub hdr: HdrPanorama<f64>,
    pub sun: SunPosition,
    /// Brightest tonemapped pixel of `hdr`.
    pub sun_intensity: f64,
}

/// Sun elevation of frame `i` of `n`: a half sine from the horizon floor
/// up to `peak` and back.
pub fn day_elevation(i: usize, n: usize, peak: f64) -> f64 {
    let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
    MIN_SUN_ELEVATION + (peak - MIN_SUN_ELEVATION) * (PI * t).sin()
}

/// Sun-to-sky ratio dimmed by air mass; brightest at `peak`.
fn day_ratio(elevation: f64, noon_ratio: f64, peak: f64) -> f64 {
    let air_mass = |e: f64| 1.0 / e.sin();
    let r = noon_ratio * (-EXTINCTION * (air_mass(elevation) - air_mass(peak))).exp();
    r.clamp(MIN_SUN_RATIO, MAX_SUN_RATIO)
}

/// `n` frames of a clear day with a fixed scene, camera and sky shape.
pub fn day_sequence(n: usize, width: usize, height: usize, seed: u64, tm: &TonemapParams) -> Result<Vec<DayFrame>, DatagenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = SkyParams { cloudiness: 0.05, circumsolar_gain: rng.random_range(3.0..5.0), ..SkyParams::sample(&mut rng) };
    let ground = GroundParams::sample(&mut rng);
    let peak = rng.random_range(1.0..MAX_SUN_ELEVATION);
    let noon_ratio = rng.random_range(1e4..5e4);
    let crf = CrfParams::Gamma { g: 2.2 };
    (0..n)
        .into_par_iter()
        .map(|i| {
            let e = day_elevation(i, n, peak);
            let sp = SkyParams { sun_elevation: e, sun_ratio: day_ratio(e, noon_ratio, peak), ..base };
            let (raw, sun) = gen_panorama(&sp, &ground, width, height)?;
            let k = auto_exposure(&raw, WbShift::default());
            let hdr = raw.try_map(|v| v * k)?;
            let ldr = derive_ldr(&hdr, 1.0, &crf, WbShift::default())?;
            let sun_intensity = peak_intensity(&tonemap(&hdr, tm).to_planar());
            Ok(DayFrame { ldr, hdr, sun, sun_intensity })
        })
        .collect()
}
