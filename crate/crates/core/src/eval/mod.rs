//! Error metrics, distribution summaries, temporal coherence and retrieval.
//!
//! Intensity metrics live in the tonemapped domain. Per sample:
//! * `e_hdr`: mean absolute difference of the tonemapped panoramas, ×100;
//! * `e_theta`: absolute elevation error in radians;
//! * `e_sun`: absolute difference of the brightest tonemapped pixels, where
//!   a pixel's intensity is the mean of its three channels;
//! * `e_render`: RMS difference of the transport renders of the tonemapped
//!   top hemispheres, over every render pixel and channel.
//!
//! Aggregates: `e_hdr` is averaged; the other three are root-mean-squared.

pub mod matching;

use std::io::Write as _;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::net::{forward, ModelParams, NetError};
use crate::pano::io::{atomic_write, ImageIoError};
use crate::pano::{tonemap, HdrPanorama, LdrPanorama, TonemapParams};
use crate::transport::TransportMatrix;
use crate::Real;

pub use matching::{match_corpus, CorpusItem, IntensityTarget, MatchError, MatchTarget};

/// Errors of one sample.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SampleMetrics {
    pub e_hdr: f64,
    pub e_theta: f64,
    pub e_sun: f64,
    pub e_render: f64,
}

/// Brightest pixel of a planar `[3, h·w]` image; channel mean per pixel.
pub fn peak_intensity<S: Real>(planar: &[S]) -> f64 {
    let n = planar.len() / 3;
    (0..n)
        .map(|i| (planar[i].f64() + planar[n + i].f64() + planar[2 * n + i].f64()) / 3.0)
        .fold(0.0, f64::max)
}

/// Top-hemisphere rows of a planar `[3, h, w]` image, still planar.
pub fn top_half_planar<S: Real>(planar: &[S], width: usize, height: usize) -> Vec<S> {
    let plane = width * height;
    let half = width * (height / 2);
    let mut out = Vec::with_capacity(3 * half);
    for c in 0..3 {
        out.extend_from_slice(&planar[c * plane..c * plane + half]);
    }
    out
}

/// `[3, rows]` render of a planar tonemapped panorama.
pub fn render_planar<S: Real>(t: &TransportMatrix<S>, planar: &[S], width: usize, height: usize) -> Vec<S> {
    let sky = top_half_planar(planar, width, height);
    let mut out = vec![S::zero(); 3 * t.rows()];
    t.render_batch(&sky, 3, &mut out);
    out
}

/// Metrics on planar tonemapped images. `truth_render` may carry a
/// precomputed render of `truth_tm`.
#[allow(clippy::too_many_arguments)]
pub fn metrics_planar<S: Real>(
    pred_tm: &[S],
    truth_tm: &[S],
    width: usize,
    height: usize,
    pred_theta: f64,
    truth_theta: f64,
    t: &TransportMatrix<S>,
    truth_render: Option<&[S]>,
) -> SampleMetrics {
    assert_eq!(pred_tm.len(), truth_tm.len());
    assert_eq!(pred_tm.len(), 3 * width * height);
    let mae = pred_tm.iter().zip(truth_tm).map(|(a, b)| (a.f64() - b.f64()).abs()).sum::<f64>() / pred_tm.len() as f64;
    let rp = render_planar(t, pred_tm, width, height);
    let owned;
    let rt = match truth_render {
        Some(r) => r,
        None => {
            owned = render_planar(t, truth_tm, width, height);
            &owned
        }
    };
    let mse = rp.iter().zip(rt).map(|(a, b)| (a.f64() - b.f64()).powi(2)).sum::<f64>() / rp.len() as f64;
    SampleMetrics {
        e_hdr: 100.0 * mae,
        e_theta: (pred_theta - truth_theta).abs(),
        e_sun: (peak_intensity(pred_tm) - peak_intensity(truth_tm)).abs(),
        e_render: mse.sqrt(),
    }
}

/// Metrics of linear HDR panoramas, tonemapped internally.
pub fn metrics<S: Real>(
    pred: &HdrPanorama<S>,
    truth: &HdrPanorama<S>,
    pred_theta: f64,
    truth_theta: f64,
    t: &TransportMatrix<S>,
    tm: &TonemapParams,
) -> SampleMetrics {
    assert_eq!((pred.width(), pred.height()), (truth.width(), truth.height()), "panorama sizes differ");
    let p = tonemap(pred, tm).to_planar();
    let q = tonemap(truth, tm).to_planar();
    metrics_planar(&p, &q, pred.width(), pred.height(), pred_theta, truth_theta, t, None)
}

/// Linear-interpolated percentile of sorted data, `q` in `[0, 100]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty data");
    let pos = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Aggregate and quartiles of one metric.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Summary {
    /// Mean for `e_hdr`, root mean square for the others.
    pub aggregate: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
}

fn summarize(values: &[f64], rms: bool) -> Summary {
    if values.is_empty() {
        return Summary::default();
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    let aggregate = if rms { (values.iter().map(|v| v * v).sum::<f64>() / n).sqrt() } else { values.iter().sum::<f64>() / n };
    Summary { aggregate, p25: percentile(&s, 25.0), p50: percentile(&s, 50.0), p75: percentile(&s, 75.0) }
}

pub const METRIC_NAMES: [&str; 4] = ["e_hdr", "e_theta", "e_sun", "e_render"];

/// One of the four metrics, for selecting and aggregating.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Hdr,
    Theta,
    Sun,
    Render,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Hdr, Metric::Theta, Metric::Sun, Metric::Render];

    pub fn name(self) -> &'static str {
        METRIC_NAMES[self as usize]
    }

    pub fn of(self, m: &SampleMetrics) -> f64 {
        match self {
            Self::Hdr => m.e_hdr,
            Self::Theta => m.e_theta,
            Self::Sun => m.e_sun,
            Self::Render => m.e_render,
        }
    }

    /// Mean for `e_hdr`, root mean square for the others; 0 when empty.
    pub fn aggregate(self, values: &[f64]) -> f64 {
        summarize(values, self != Self::Hdr).aggregate
    }
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| format!("unknown metric {s:?} (expected one of {})", METRIC_NAMES.join(", ")))
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-sample metrics with their summaries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub samples: Vec<(String, SampleMetrics)>,
    pub e_hdr: Summary,
    pub e_theta: Summary,
    pub e_sun: Summary,
    pub e_render: Summary,
}

impl MetricReport {
    pub fn from_samples(samples: Vec<(String, SampleMetrics)>) -> Self {
        let col = |f: fn(&SampleMetrics) -> f64| samples.iter().map(|(_, m)| f(m)).collect::<Vec<_>>();
        Self {
            e_hdr: summarize(&col(|m| m.e_hdr), false),
            e_theta: summarize(&col(|m| m.e_theta), true),
            e_sun: summarize(&col(|m| m.e_sun), true),
            e_render: summarize(&col(|m| m.e_render), true),
            samples,
        }
    }

    pub fn summaries(&self) -> [(&'static str, Summary); 4] {
        [
            (METRIC_NAMES[0], self.e_hdr),
            (METRIC_NAMES[1], self.e_theta),
            (METRIC_NAMES[2], self.e_sun),
            (METRIC_NAMES[3], self.e_render),
        ]
    }

    /// `id,e_hdr,e_theta,e_sun,e_render`, one row per sample.
    pub fn samples_csv(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["id", "e_hdr", "e_theta", "e_sun", "e_render"]).expect("in-memory write");
        for (id, m) in &self.samples {
            w.write_record([id.clone(), fmt(m.e_hdr), fmt(m.e_theta), fmt(m.e_sun), fmt(m.e_render)])
                .expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }

    /// `metric,aggregate,p25,p50,p75`, one row per metric.
    pub fn summary_csv(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["metric", "aggregate", "p25", "p50", "p75"]).expect("in-memory write");
        for (name, s) in self.summaries() {
            w.write_record([name.to_string(), fmt(s.aggregate), fmt(s.p25), fmt(s.p50), fmt(s.p75)])
                .expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }

    /// Human-readable table.
    pub fn to_text(&self) -> String {
        let mut s = format!("samples: {}\n{:<10} {:>12} {:>12} {:>12} {:>12}\n", self.samples.len(), "metric", "aggregate", "p25", "p50", "p75");
        for (name, m) in self.summaries() {
            s.push_str(&format!("{name:<10} {:>12.6} {:>12.6} {:>12.6} {:>12.6}\n", m.aggregate, m.p25, m.p50, m.p75));
        }
        s
    }

    pub fn write(&self, samples_path: &Path, summary_path: &Path) -> Result<(), ImageIoError> {
        let a = self.samples_csv();
        atomic_write(samples_path, |w| w.write_all(&a))?;
        let b = self.summary_csv();
        atomic_write(summary_path, |w| w.write_all(&b))
    }
}

/// Shortest representation that parses back to the same value.
pub fn fmt(v: f64) -> String {
    format!("{v:?}")
}

/// Average ranks (ties share the mean rank), 1-based.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; `None` when either series has no variance.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "series lengths differ");
    if a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// One frame of a temporal evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemporalRow {
    pub index: usize,
    pub predicted: f64,
    pub truth: f64,
}

/// Per-frame series with its rank correlation.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalReport {
    pub rows: Vec<TemporalRow>,
    pub spearman: Option<f64>,
}

impl TemporalReport {
    pub fn from_series(predicted: &[f64], truth: &[f64]) -> Self {
        let rows = predicted
            .iter()
            .zip(truth)
            .enumerate()
            .map(|(index, (p, t))| TemporalRow { index, predicted: *p, truth: *t })
            .collect();
        Self { rows, spearman: spearman(predicted, truth) }
    }

    /// `index,predicted,truth` rows followed by nothing; the correlation is
    /// reported separately by [`spearman_text`](Self::spearman_text).
    pub fn csv(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["index", "predicted_sun", "true_sun"]).expect("in-memory write");
        for r in &self.rows {
            w.write_record([r.index.to_string(), fmt(r.predicted), fmt(r.truth)]).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }

    pub fn spearman_text(&self) -> String {
        self.spearman.map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}"))
    }
}

/// Runs the model on each frame independently and correlates peak intensities.
///
/// Frames must already be sun-centered; `truth` holds the true tonemapped
/// peak of each frame.
pub fn temporal_eval<S: Real>(
    params: &ModelParams<S>,
    frames: &[LdrPanorama],
    truth: &[f64],
) -> Result<TemporalReport, NetError> {
    assert_eq!(frames.len(), truth.len(), "one truth value per frame");
    let mut predicted = Vec::with_capacity(frames.len());
    for f in frames {
        let (w, h) = (f.width(), f.height());
        let x = Tensor::new(&[1, 3, h, w], f.normalized_planar::<S>());
        let (hdr, _) = forward(params, &x)?;
        predicted.push(peak_intensity(hdr.data()));
    }
    Ok(TemporalReport::from_series(&predicted, truth))
}
