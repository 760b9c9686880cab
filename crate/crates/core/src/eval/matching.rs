//! Nearest-neighbour retrieval of panoramas by predicted illumination.

use super::percentile;

/// Features of one corpus panorama, computed from model predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusItem {
    pub id: String,
    /// Brightest tonemapped pixel of the predicted HDR panorama.
    pub intensity: f64,
    /// Predicted sun elevation in radians.
    pub elevation: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum IntensityTarget {
    Value(f64),
    /// Percentile of corpus intensities, in `[0, 100]`.
    Percentile(f64),
    /// 75th percentile.
    Bright,
    /// 25th percentile.
    Dim,
}

impl std::str::FromStr for IntensityTarget {
    type Err = MatchError;

    /// `bright`, `dim`, `p<q>` (percentile) or a plain number.
    fn from_str(s: &str) -> Result<Self, MatchError> {
        let bad = || MatchError::Target(format!("cannot parse intensity target {s:?}"));
        match s.trim() {
            "bright" => Ok(Self::Bright),
            "dim" => Ok(Self::Dim),
            t if t.starts_with('p') => {
                let q: f64 = t[1..].parse().map_err(|_| bad())?;
                if !(0.0..=100.0).contains(&q) {
                    return Err(bad());
                }
                Ok(Self::Percentile(q))
            }
            t => {
                let v: f64 = t.parse().map_err(|_| bad())?;
                if !v.is_finite() {
                    return Err(bad());
                }
                Ok(Self::Value(v))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchTarget {
    pub intensity: IntensityTarget,
    pub elevation_degrees: f64,
    /// Weights of the z-scored intensity and elevation distances.
    pub weights: (f64, f64),
}

impl MatchTarget {
    pub fn new(intensity: IntensityTarget, elevation_degrees: f64) -> Self {
        Self { intensity, elevation_degrees, weights: (1.0, 1.0) }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MatchError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("{0}")]
    Target(String),
    #[error("duplicate corpus id {0:?}")]
    DuplicateId(String),
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
    (m, if s > 0.0 { s } else { 1.0 })
}

/// Returns up to `k` ids ordered by increasing distance, ties by id.
///
/// Features are z-scored over the corpus (population deviation; a constant
/// feature keeps unit scale). The result does not depend on corpus order.
pub fn match_corpus(corpus: &[CorpusItem], target: &MatchTarget, k: usize) -> Result<Vec<String>, MatchError> {
    if corpus.is_empty() {
        return Err(MatchError::EmptyCorpus);
    }
    if k == 0 {
        return Err(MatchError::ZeroK);
    }
    let mut items: Vec<&CorpusItem> = corpus.iter().collect();
    items.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = items.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(MatchError::DuplicateId(w[0].id.clone()));
    }
    let intens: Vec<f64> = items.iter().map(|c| c.intensity).collect();
    let elevs: Vec<f64> = items.iter().map(|c| c.elevation).collect();
    let mut sorted = intens.clone();
    sorted.sort_by(f64::total_cmp);
    let ti = match target.intensity {
        IntensityTarget::Value(v) => v,
        IntensityTarget::Percentile(q) => percentile(&sorted, q),
        IntensityTarget::Bright => percentile(&sorted, 75.0),
        IntensityTarget::Dim => percentile(&sorted, 25.0),
    };
    let te = target.elevation_degrees.to_radians();
    if !ti.is_finite() || !te.is_finite() {
        return Err(MatchError::Target("target must be finite".into()));
    }
    let (mi, si) = mean_std(&intens);
    let (me, se) = mean_std(&elevs);
    let (wi, we) = target.weights;
    let (zi, ze) = ((ti - mi) / si, (te - me) / se);
    let mut scored: Vec<(f64, &str)> = items
        .iter()
        .map(|c| {
            let di = (c.intensity - mi) / si - zi;
            let de = (c.elevation - me) / se - ze;
            ((wi * di * di + we * de * de).sqrt(), c.id.as_str())
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    Ok(scored.into_iter().take(k).map(|(_, id)| id.to_string()).collect())
}
