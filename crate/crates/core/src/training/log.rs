//! Per-epoch training log.
//!
//! CSV columns: `epoch,split,loss_hdr,loss_theta,loss_render,loss_all,
//! loss_domain,e_hdr,e_theta,e_sun,e_render`. Metrics are filled on
//! validation rows only, `loss_domain` on training rows of domain-adapted
//! runs only; absent values are empty fields.

use std::io::Write as _;
use std::path::Path;

use super::LossValues;
use crate::eval::{fmt, SampleMetrics};
use crate::pano::io::{atomic_write, ImageIoError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub losses: LossValues,
    pub loss_domain: Option<f64>,
    /// Aggregated validation metrics.
    pub metrics: Option<SampleMetrics>,
}

pub const LOG_COLUMNS: [&str; 11] =
    ["epoch", "split", "loss_hdr", "loss_theta", "loss_render", "loss_all", "loss_domain", "e_hdr", "e_theta", "e_sun", "e_render"];

pub fn log_csv(records: &[EpochRecord]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(LOG_COLUMNS).expect("in-memory write");
    let opt = |v: Option<f64>| v.map(fmt).unwrap_or_default();
    for r in records {
        let m = r.metrics;
        w.write_record([
            r.epoch.to_string(),
            r.split.as_str().to_string(),
            fmt(r.losses.hdr),
            fmt(r.losses.theta),
            fmt(r.losses.render),
            fmt(r.losses.all),
            opt(r.loss_domain),
            opt(m.map(|m| m.e_hdr)),
            opt(m.map(|m| m.e_theta)),
            opt(m.map(|m| m.e_sun)),
            opt(m.map(|m| m.e_render)),
        ])
        .expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn write_log_csv(path: &Path, records: &[EpochRecord]) -> Result<(), ImageIoError> {
    let bytes = log_csv(records);
    atomic_write(path, |w| w.write_all(&bytes))
}
