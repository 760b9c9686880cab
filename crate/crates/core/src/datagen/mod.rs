//! Procedural paired HDR/LDR panoramas with a known sun.
//!
//! Skies come from an analytic gradient plus circumsolar model with a
//! physical-size solar disk; the lower hemisphere is Lambertian ground and
//! box buildings lit by that sky. LDR views go through exposure, a hue and
//! saturation shift, a random camera response and 8-bit quantization.

mod camera;
mod dataset;
mod scene;
mod sequence;
mod sky;

use thiserror::Error;

use crate::pano::io::ImageIoError;
use crate::pano::{HdrPanorama, PanoError};
use crate::Real;

pub use camera::*;
pub use dataset::*;
pub use scene::*;
pub use sequence::*;
pub use sky::*;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid generator parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Pano(#[from] PanoError),
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    Fractions([f64; 3]),
}

/// Exposure multiplier of augmentation step `x`.
pub const EXPOSURE_BASE: f64 = 1.75;
pub const EXPOSURE_STEPS: [i32; 3] = [-1, 0, 1];
/// Fraction of pixels guaranteed clipped at the darkest exposure step.
pub const CLIPPED_FRACTION: f64 = 0.006;
/// Value the clipped-fraction quantile is mapped to at `x = 0`; stays above
/// 1 after the darkest exposure step.
pub const CLIP_LEVEL: f64 = 2.0;

/// Scale taking the brightest `CLIPPED_FRACTION` of pixels (by their
/// smallest channel after the color shift) to `CLIP_LEVEL`. The shift
/// commutes with scaling, so metering the shifted image is exact.
pub fn auto_exposure<S: Real>(p: &HdrPanorama<S>, shift: WbShift) -> f64 {
    let mut mins: Vec<f64> = p
        .data()
        .chunks_exact(3)
        .map(|c| {
            let [r, g, b] = shift_hsv([c[0].f64(), c[1].f64(), c[2].f64()], shift);
            r.min(g).min(b)
        })
        .collect();
    let k = ((mins.len() as f64 * CLIPPED_FRACTION).ceil() as usize).clamp(1, mins.len());
    let idx = mins.len() - k;
    let (_, q, _) = mins.select_nth_unstable_by(idx, f64::total_cmp);
    if *q > 0.0 {
        CLIP_LEVEL / *q
    } else {
        1.0
    }
}

/// `EXPOSURE_BASE^x`.
pub fn exposure_factor(x: i32) -> f64 {
    EXPOSURE_BASE.powi(x)
}
