//! Classical inverse tonemapping baselines and their parameter search.
//!
//! Every operator works on luminance `Y = 0.2126 R + 0.7152 G + 0.0722 B`
//! of the linearized input and re-colors by the input chroma, so the output
//! pixel is the input pixel scaled by `Y_out / Y`. The expanding operators
//! linearize with gamma 2.2. All outputs satisfy `Y_out >= Y` and are
//! monotone: a pixelwise brighter input never gives a darker output.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::eval::{metrics_planar, Metric};
use crate::pano::{tonemap, HdrPanorama, LdrPanorama, PanoError, TonemapParams};
use crate::transport::TransportMatrix;

pub const LUMA: [f64; 3] = [0.2126, 0.7152, 0.0722];
/// Largest allowed parameter grid per operator.
pub const MAX_GRID: usize = 100;

#[derive(Debug, Error, PartialEq)]
pub enum ItmoError {
    #[error("unknown operator {0:?} (expected linear, gamma, inverse-reinhard-expand, threshold-expand, two-segment)")]
    UnknownOperator(String),
    #[error("invalid parameters {0}")]
    Params(String),
    #[error("empty parameter grid or sample set")]
    Empty,
    #[error("grid of {0} points exceeds {MAX_GRID}")]
    GridTooLarge(usize),
    #[error(transparent)]
    Pano(#[from] PanoError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ItmoOperator {
    Linear,
    Gamma,
    InverseReinhardExpand,
    ThresholdExpand,
    TwoSegment,
}

impl ItmoOperator {
    pub const ALL: [ItmoOperator; 5] = [Self::Linear, Self::Gamma, Self::InverseReinhardExpand, Self::ThresholdExpand, Self::TwoSegment];

    pub fn name(self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::Gamma => "gamma",
            Self::InverseReinhardExpand => "inverse-reinhard-expand",
            Self::ThresholdExpand => "threshold-expand",
            Self::TwoSegment => "two-segment",
        }
    }

    /// Documented search grid, at most `MAX_GRID` points.
    pub fn grid(self) -> Vec<ItmoParams> {
        let log_space = |lo: f64, hi: f64, n: usize| -> Vec<f64> {
            (0..n).map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (n - 1) as f64)).collect()
        };
        let sigmas = [1.0, 2.0, 4.0];
        let thresholds = [0.8, 0.9, 0.98];
        match self {
            Self::Linear => vec![ItmoParams::Linear { linearize: false }, ItmoParams::Linear { linearize: true }],
            Self::Gamma => log_space(0.0, 4.0, 20).into_iter().map(|scale| ItmoParams::Gamma { scale }).collect(),
            Self::InverseReinhardExpand => {
                let mut g = Vec::new();
                for l_max in log_space(0.0, 4.0, 9) {
                    for sigma in sigmas {
                        for threshold in thresholds {
                            g.push(ItmoParams::InverseReinhardExpand { l_max, sigma, threshold });
                        }
                    }
                }
                g
            }
            Self::ThresholdExpand => {
                let mut g = Vec::new();
                for peak in log_space(0.0, 4.0, 9) {
                    for sigma in sigmas {
                        for threshold in thresholds {
                            g.push(ItmoParams::ThresholdExpand { peak, sigma, threshold });
                        }
                    }
                }
                g
            }
            Self::TwoSegment => {
                let mut g = Vec::new();
                for knee in [0.5, 0.7, 0.8, 0.9, 0.95] {
                    for slope in log_space(0.0, 4.0, 16) {
                        g.push(ItmoParams::TwoSegment { knee, slope });
                    }
                }
                g
            }
        }
    }
}

impl FromStr for ItmoOperator {
    type Err = ItmoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|o| o.name() == s).ok_or_else(|| ItmoError::UnknownOperator(s.to_string()))
    }
}

impl fmt::Display for ItmoOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ItmoParams {
    /// Codes over 255, optionally raised to 2.2.
    Linear { linearize: bool },
    /// `scale · (codes/255)^2.2`, `scale >= 1`.
    Gamma { scale: f64 },
    /// Inverse of Reinhard's extended operator with white point `l_max`,
    /// blended in by a blurred mask of pixels at or above `threshold`.
    InverseReinhardExpand { l_max: f64, sigma: f64, threshold: f64 },
    /// Multiplicative boost up to `peak` under a blurred mask, kept to the
    /// mask grown by one pixel.
    ThresholdExpand { peak: f64, sigma: f64, threshold: f64 },
    /// Identity below `knee`, slope `slope` above, continuous at the knee.
    TwoSegment { knee: f64, slope: f64 },
}

impl ItmoParams {
    pub fn operator(&self) -> ItmoOperator {
        match self {
            Self::Linear { .. } => ItmoOperator::Linear,
            Self::Gamma { .. } => ItmoOperator::Gamma,
            Self::InverseReinhardExpand { .. } => ItmoOperator::InverseReinhardExpand,
            Self::ThresholdExpand { .. } => ItmoOperator::ThresholdExpand,
            Self::TwoSegment { .. } => ItmoOperator::TwoSegment,
        }
    }

    pub fn validate(&self) -> Result<(), ItmoError> {
        let unit = |t: f64| t > 0.0 && t <= 1.0;
        let ok = match *self {
            Self::Linear { .. } => true,
            Self::Gamma { scale } => scale >= 1.0 && scale.is_finite(),
            Self::InverseReinhardExpand { l_max, sigma, threshold } => l_max >= 1.0 && l_max.is_finite() && sigma > 0.0 && sigma.is_finite() && unit(threshold),
            Self::ThresholdExpand { peak, sigma, threshold } => peak >= 1.0 && peak.is_finite() && sigma > 0.0 && sigma.is_finite() && unit(threshold),
            Self::TwoSegment { knee, slope } => unit(knee) && slope >= 1.0 && slope.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(ItmoError::Params(self.to_string()))
        }
    }
}

impl fmt::Display for ItmoParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Linear { linearize } => write!(f, "linear linearize={linearize}"),
            Self::Gamma { scale } => write!(f, "gamma scale={scale:?}"),
            Self::InverseReinhardExpand { l_max, sigma, threshold } => {
                write!(f, "inverse-reinhard-expand l_max={l_max:?} sigma={sigma:?} threshold={threshold:?}")
            }
            Self::ThresholdExpand { peak, sigma, threshold } => write!(f, "threshold-expand peak={peak:?} sigma={sigma:?} threshold={threshold:?}"),
            Self::TwoSegment { knee, slope } => write!(f, "two-segment knee={knee:?} slope={slope:?}"),
        }
    }
}

/// Inverse of `L_d = L_w (1 + L_w / l_max²) / (1 + L_w)`; maps 1 to `l_max`.
pub fn inverse_reinhard(l_d: f64, l_max: f64) -> f64 {
    let w2 = l_max * l_max;
    let b = 1.0 - l_d;
    // the conjugate form avoids cancellation when l_max is large
    let disc = (b * b + 4.0 * l_d / w2).sqrt();
    if b > 0.0 {
        2.0 * l_d / (b + disc)
    } else {
        0.5 * w2 * (disc - b)
    }
}

pub fn two_segment(y: f64, knee: f64, slope: f64) -> f64 {
    if y <= knee {
        y
    } else {
        knee + slope * (y - knee)
    }
}

/// Normalized Gaussian blur of a `w × h` scalar map, wrapping across the
/// azimuth seam and renormalized at the poles.
pub fn gaussian_blur(map: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let mut tmp = vec![0.0; w * h];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            let mut norm = 0.0;
            for (i, k) in (-radius..=radius).enumerate() {
                let cc = (c as isize + k).rem_euclid(w as isize) as usize;
                acc += kernel[i] * map[r * w + cc];
                norm += kernel[i];
            }
            tmp[r * w + c] = acc / norm;
        }
    }
    let mut out = vec![0.0; w * h];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            let mut norm = 0.0;
            for (i, k) in (-radius..=radius).enumerate() {
                let rr = r as isize + k;
                if rr < 0 || rr >= h as isize {
                    continue;
                }
                acc += kernel[i] * tmp[rr as usize * w + c];
                norm += kernel[i];
            }
            out[r * w + c] = acc / norm;
        }
    }
    out
}

/// Mask grown by one pixel in the four directions, wrapping horizontally.
fn dilate(mask: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = mask.to_vec();
    for r in 0..h {
        for c in 0..w {
            let on = |rr: usize, cc: usize| mask[rr * w + cc] > 0.0;
            let hit = on(r, (c + 1) % w) || on(r, (c + w - 1) % w) || (r > 0 && on(r - 1, c)) || (r + 1 < h && on(r + 1, c));
            if hit {
                out[r * w + c] = 1.0;
            }
        }
    }
    out
}

/// Luminance of each pixel of interleaved RGB.
fn luminance(rgb: &[f64]) -> Vec<f64> {
    rgb.chunks_exact(3).map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]).collect()
}

/// Linearized input and the output luminance of every pixel.
fn expand(ldr: &LdrPanorama, params: &ItmoParams) -> Result<(Vec<f64>, Vec<f64>), ItmoError> {
    params.validate()?;
    let (w, h) = (ldr.width(), ldr.height());
    let gamma = !matches!(params, ItmoParams::Linear { linearize: false });
    let lin: Vec<f64> = ldr
        .data()
        .iter()
        .map(|&c| {
            let v = c as f64 / 255.0;
            if gamma {
                v.powf(2.2)
            } else {
                v
            }
        })
        .collect();
    let y = luminance(&lin);
    let mask = |t: f64| y.iter().map(|v| if *v >= t { 1.0 } else { 0.0 }).collect::<Vec<_>>();
    let y_out = match *params {
        ItmoParams::Linear { .. } => y.clone(),
        ItmoParams::Gamma { scale } => y.iter().map(|v| scale * v).collect(),
        ItmoParams::InverseReinhardExpand { l_max, sigma, threshold } => {
            let e = gaussian_blur(&mask(threshold), w, h, sigma);
            y.iter().zip(&e).map(|(&l, &e)| l + e * (inverse_reinhard(l, l_max) - l).max(0.0)).collect()
        }
        ItmoParams::ThresholdExpand { peak, sigma, threshold } => {
            let m = mask(threshold);
            let e = gaussian_blur(&m, w, h, sigma);
            let keep = dilate(&m, w, h);
            y.iter().zip(e.iter().zip(&keep)).map(|(&l, (&e, &k))| l * (1.0 + (peak - 1.0) * e * k)).collect()
        }
        ItmoParams::TwoSegment { knee, slope } => y.iter().map(|&v| two_segment(v, knee, slope)).collect(),
    };
    Ok((lin, y_out))
}

/// Expands an LDR panorama into linear HDR.
pub fn itmo_apply(ldr: &LdrPanorama, params: &ItmoParams) -> Result<HdrPanorama<f64>, ItmoError> {
    let (lin, y_out) = expand(ldr, params)?;
    let mut data = Vec::with_capacity(lin.len());
    for (px, yo) in lin.chunks_exact(3).zip(&y_out) {
        let y = LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2];
        let k = if y > 0.0 { yo / y } else { 0.0 };
        data.extend(px.iter().map(|v| v * k));
    }
    Ok(HdrPanorama::from_data(ldr.width(), ldr.height(), data)?)
}

/// One labelled example for the parameter search.
pub struct CvSample<'a> {
    pub ldr: &'a LdrPanorama,
    /// Planar tonemapped ground truth.
    pub truth_tm: Vec<f32>,
    /// Render of `truth_tm`.
    pub truth_render: Vec<f32>,
    pub truth_theta: f64,
    /// Elevation the baseline reports, e.g. from sun detection.
    pub pred_theta: f64,
}

impl<'a> CvSample<'a> {
    pub fn new(ldr: &'a LdrPanorama, truth: &HdrPanorama<f32>, truth_theta: f64, pred_theta: f64, t: &TransportMatrix<f32>, tm: &TonemapParams) -> Self {
        let truth_tm = tonemap(truth, tm).to_planar();
        let truth_render = crate::eval::render_planar(t, &truth_tm, truth.width(), truth.height());
        Self { ldr, truth_tm, truth_render, truth_theta, pred_theta }
    }
}

/// Per-sample metrics of one parameter setting.
pub fn itmo_metrics(
    params: &ItmoParams,
    samples: &[CvSample],
    t: &TransportMatrix<f32>,
    tm: &TonemapParams,
) -> Result<Vec<crate::eval::SampleMetrics>, ItmoError> {
    samples
        .iter()
        .map(|s| {
            let pred = itmo_apply(s.ldr, params)?.cast::<f32>();
            let pred_tm = tonemap(&pred, tm).to_planar();
            let (w, h) = (s.ldr.width(), s.ldr.height());
            Ok(metrics_planar(&pred_tm, &s.truth_tm, w, h, s.pred_theta, s.truth_theta, t, Some(&s.truth_render)))
        })
        .collect()
}

/// Grid point with the lowest aggregate `metric`; the first such point
/// wins ties. Returns the point and its score.
pub fn cross_validate(
    grid: &[ItmoParams],
    samples: &[CvSample],
    t: &TransportMatrix<f32>,
    tm: &TonemapParams,
    metric: Metric,
) -> Result<(ItmoParams, f64), ItmoError> {
    if grid.is_empty() || samples.is_empty() {
        return Err(ItmoError::Empty);
    }
    if grid.len() > MAX_GRID {
        return Err(ItmoError::GridTooLarge(grid.len()));
    }
    let scores: Vec<f64> = grid
        .par_iter()
        .map(|p| {
            let m = itmo_metrics(p, samples, t, tm)?;
            let v: Vec<f64> = m.iter().map(|m| metric.of(m)).collect();
            Ok(metric.aggregate(&v))
        })
        .collect::<Result<_, ItmoError>>()?;
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s < scores[best] {
            best = i;
        }
    }
    Ok((grid[best], scores[best]))
}
