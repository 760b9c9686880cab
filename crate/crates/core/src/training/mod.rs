//! Losses, Adam, and the training loops.
//!
//! Targets live in the tonemapped domain. The network emits a full
//! panorama; the render loss crops the top hemisphere, pushes it through the
//! transport matrix and compares with the render of the target.

mod adam;
mod dataset;
mod domain;
mod log;

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{LinearOperator, Tape, Var};
use crate::eval::{metrics_planar, MetricReport, SampleMetrics};
use crate::net::{forward_tape, BnMode, Bound, ModelParams, NetError};
use crate::pano::TonemapParams;
use crate::transport::TransportMatrix;
use crate::Real;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use dataset::{Batch, Dataset, Sample};
pub use domain::{domain_accuracy, train_discriminator, train_domain_adapted};
pub use log::{log_csv, write_log_csv, EpochRecord, Split};

/// Weights of the elevation and render terms in the total loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub theta: f64,
    pub render: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { theta: 0.1, render: 0.1 }
    }
}

impl LossWeights {
    /// The panorama term alone.
    pub fn hdr_only() -> Self {
        Self { theta: 0.0, render: 0.0 }
    }
}

/// Values fed to the transport matrix in the render loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RenderDomain {
    Tonemapped,
    /// Inverse-tonemapped radiance.
    Linear,
}

impl std::str::FromStr for RenderDomain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "tonemapped" => Ok(Self::Tonemapped),
            "linear" => Ok(Self::Linear),
            _ => Err(format!("unknown render loss domain {s:?} (expected tonemapped or linear)")),
        }
    }
}

impl std::fmt::Display for RenderDomain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Tonemapped => "tonemapped",
            Self::Linear => "linear",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    /// Epochs without validation improvement tolerated before stopping.
    pub patience: usize,
    pub weights: LossWeights,
    pub render_domain: RenderDomain,
    pub tonemap: TonemapParams,
    /// Gradient-reversal strength for domain adaptation.
    pub lambda_grl: f64,
    /// Discriminator learning rate for domain adaptation.
    pub domain_lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale profile.
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 100,
            patience: 10,
            weights: LossWeights::default(),
            render_domain: RenderDomain::Tonemapped,
            tonemap: TonemapParams::default(),
            lambda_grl: 1.0,
            domain_lr: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Full-scale profile: minibatch 128, 500 epochs.
    pub fn paper() -> Self {
        Self { batch_size: 128, epochs: 500, ..Self::default() }
    }

    /// Desk profile with the fine-tuning learning rate.
    pub fn fine_tune() -> Self {
        Self { lr: 1e-4, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if !(self.weights.theta >= 0.0 && self.weights.render >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !(self.lambda_grl >= 0.0 && self.lambda_grl.is_finite()) {
            return bad("lambda_grl must be non-negative");
        }
        if !(self.domain_lr >= 0.0 && self.domain_lr.is_finite()) {
            return bad("domain_lr must be non-negative");
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig { lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0} set is empty")]
    EmptyDataset(&'static str),
    #[error("dataset does not fit the model or transport matrix: {0}")]
    Shape(String),
    #[error("group {0:?} appears in both the training and validation sets")]
    GroupOverlap(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Tape handles of the loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub hdr: Var,
    pub theta: Var,
    pub render: Var,
    pub all: Var,
}

/// Mean absolute difference over every pixel and channel.
pub fn loss_hdr<S: Real>(tape: &mut Tape<S>, pred: Var, target: Var) -> Var {
    tape.l1(pred, target)
}

/// Batch-mean squared elevation error in radians².
pub fn loss_theta<S: Real>(tape: &mut Tape<S>, pred: Var, target: Var) -> Var {
    tape.mse(pred, target)
}

/// Mean squared difference between the render of the predicted top
/// hemisphere and `target_render` (`[3N, rows]`, same domain).
pub fn loss_render<S: Real>(
    tape: &mut Tape<S>,
    pred: Var,
    target_render: Var,
    transport: Arc<dyn LinearOperator<S>>,
    domain: RenderDomain,
    tm: &TonemapParams,
) -> Var {
    let h = tape.shape(pred)[2];
    let top = tape.crop_rows(pred, 0, h / 2);
    let sky = match domain {
        RenderDomain::Tonemapped => top,
        RenderDomain::Linear => tape.pow_scale(top, tm.alpha().powf(-tm.gamma()), tm.gamma()),
    };
    let render = tape.fixed_linear(sky, transport);
    tape.mse(render, target_render)
}

/// `loss_hdr + λθ·loss_theta + λr·loss_render`.
#[allow(clippy::too_many_arguments)]
pub fn loss_all<S: Real>(
    tape: &mut Tape<S>,
    pred_hdr: Var,
    target_hdr: Var,
    pred_theta: Var,
    target_theta: Var,
    target_render: Var,
    transport: Arc<dyn LinearOperator<S>>,
    weights: LossWeights,
    domain: RenderDomain,
    tm: &TonemapParams,
) -> LossVars {
    let hdr = loss_hdr(tape, pred_hdr, target_hdr);
    let theta = loss_theta(tape, pred_theta, target_theta);
    let render = loss_render(tape, pred_hdr, target_render, transport, domain, tm);
    let wt = tape.scale(theta, S::lit(weights.theta));
    let wr = tape.scale(render, S::lit(weights.render));
    let a = tape.add(hdr, wt);
    let all = tape.add(a, wr);
    LossVars { hdr, theta, render, all }
}

/// Renders of the targets' top hemispheres in `domain`, one `[3, rows]`
/// block per sample.
pub fn render_targets<S: Real>(
    data: &Dataset<S>,
    t: &TransportMatrix<S>,
    domain: RenderDomain,
    tm: &TonemapParams,
) -> Vec<Vec<S>> {
    use rayon::prelude::*;
    let (w, h) = (data.width(), data.height());
    data.samples()
        .par_iter()
        .map(|s| {
            let mut sky = crate::eval::top_half_planar(&s.target, w, h);
            if domain == RenderDomain::Linear {
                let scale = tm.alpha().powf(-tm.gamma());
                sky.iter_mut().for_each(|v| *v = S::lit(scale * v.f64().max(0.0).powf(tm.gamma())));
            }
            let mut out = vec![S::zero(); 3 * t.rows()];
            t.render_batch(&sky, 3, &mut out);
            out
        })
        .collect()
}

/// Loss components averaged over a dataset.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub hdr: f64,
    pub theta: f64,
    pub render: f64,
    pub all: f64,
}

impl LossValues {
    fn accumulate(&mut self, other: &LossValues, weight: f64) {
        self.hdr += weight * other.hdr;
        self.theta += weight * other.theta;
        self.render += weight * other.render;
        self.all += weight * other.all;
    }

    fn scaled(mut self, s: f64) -> Self {
        self.hdr *= s;
        self.theta *= s;
        self.render *= s;
        self.all *= s;
        self
    }
}

fn loss_values<S: Real>(tape: &Tape<S>, l: &LossVars) -> LossValues {
    LossValues {
        hdr: tape.value(l.hdr).item().f64(),
        theta: tape.value(l.theta).item().f64(),
        render: tape.value(l.render).item().f64(),
        all: tape.value(l.all).item().f64(),
    }
}

/// Inference-mode losses and per-sample metrics of `params` on `data`.
pub struct Evaluation {
    pub losses: LossValues,
    pub report: MetricReport,
    /// Predicted elevations, in sample order.
    pub elevations: Vec<f64>,
}

/// Evaluates in chunks of `batch_size` with running batch-norm statistics.
pub fn evaluate<S: Real>(
    params: &ModelParams<S>,
    data: &Dataset<S>,
    t: &Arc<TransportMatrix<S>>,
    cfg: &TrainConfig,
) -> Result<Evaluation, TrainError> {
    let loss_targets = render_targets(data, t, cfg.render_domain, &cfg.tonemap);
    let metric_targets =
        if cfg.render_domain == RenderDomain::Tonemapped { None } else { Some(render_targets(data, t, RenderDomain::Tonemapped, &cfg.tonemap)) };
    evaluate_with(params, data, t, cfg, &loss_targets, metric_targets.as_deref().unwrap_or(&loss_targets))
}

fn evaluate_with<S: Real>(
    params: &ModelParams<S>,
    data: &Dataset<S>,
    t: &Arc<TransportMatrix<S>>,
    cfg: &TrainConfig,
    loss_targets: &[Vec<S>],
    metric_targets: &[Vec<S>],
) -> Result<Evaluation, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset("evaluation"));
    }
    let (w, h) = (data.width(), data.height());
    let op: Arc<dyn LinearOperator<S>> = t.clone();
    let mut losses = LossValues::default();
    let mut samples = Vec::with_capacity(data.len());
    let mut elevations = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(cfg.batch_size.max(1)) {
        let b = data.batch(chunk, loss_targets);
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, params, false);
        let x = tape.constant(b.inputs);
        let tr = forward_tape(&mut tape, params, &bound, x, BnMode::Running)?;
        let th = tape.constant(b.target_hdr);
        let te = tape.constant(b.target_theta);
        let tr_render = tape.constant(b.target_render);
        let l = loss_all(&mut tape, tr.hdr, th, tr.elevation, te, tr_render, op.clone(), cfg.weights, cfg.render_domain, &cfg.tonemap);
        losses.accumulate(&loss_values(&tape, &l), chunk.len() as f64);
        let pred = tape.value(tr.hdr).data();
        let elev = tape.value(tr.elevation).data();
        let per = 3 * w * h;
        for (k, &i) in chunk.iter().enumerate() {
            let s = &data.samples()[i];
            let m = metrics_planar(
                &pred[k * per..(k + 1) * per],
                &s.target,
                w,
                h,
                elev[k].f64(),
                s.elevation,
                t,
                Some(&metric_targets[i]),
            );
            samples.push((s.id.clone(), m));
            elevations.push(elev[k].f64());
        }
    }
    Ok(Evaluation { losses: losses.scaled(1.0 / data.len() as f64), report: MetricReport::from_samples(samples), elevations })
}

/// Result of a training run.
pub struct TrainOutcome<S> {
    /// Parameters with the lowest validation loss (the input when no epoch ran).
    pub params: ModelParams<S>,
    pub log: Vec<EpochRecord>,
    /// 1-based epoch of `params`; 0 when no epoch ran.
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

fn check_inputs<S: Real>(
    params: &ModelParams<S>,
    train: &Dataset<S>,
    val: &Dataset<S>,
    t: &TransportMatrix<S>,
) -> Result<(), TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyDataset("training"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptyDataset("validation"));
    }
    let cfg = params.config();
    for d in [train, val] {
        if (d.width(), d.height()) != (cfg.input_width, cfg.input_height) {
            return Err(TrainError::Shape(format!(
                "samples are {}x{}, model expects {}x{}",
                d.width(),
                d.height(),
                cfg.input_width,
                cfg.input_height
            )));
        }
    }
    if t.pano_dims() != (cfg.input_width, cfg.input_height) {
        return Err(TrainError::Shape(format!("transport matrix was built for {:?} panoramas", t.pano_dims())));
    }
    let groups: BTreeSet<&str> = train.samples().iter().map(|s| s.group.as_str()).collect();
    if let Some(s) = val.samples().iter().find(|s| groups.contains(s.group.as_str())) {
        return Err(TrainError::GroupOverlap(s.group.clone()));
    }
    Ok(())
}

/// Extra work done on every minibatch of a domain-adapted run.
pub(crate) trait StepHook<S: Real> {
    /// Adds terms to the tape and returns a loss to add to the task loss,
    /// with its value reported in the log.
    fn extend(&mut self, tape: &mut Tape<S>, params: &ModelParams<S>, bound: &Bound, latent: Var, n: usize) -> Result<Option<Var>, TrainError>;

    /// Applies updates to parameters the task optimizer leaves alone.
    fn update(&mut self, tape: &Tape<S>, params: &mut ModelParams<S>, bound: &Bound);
}

/// Blocks updated by the task optimizer.
fn is_task_block(name: &str) -> bool {
    !name.starts_with("dom.")
}

pub(crate) fn run<S: Real>(
    init: &ModelParams<S>,
    train: &Dataset<S>,
    val: &Dataset<S>,
    t: &Arc<TransportMatrix<S>>,
    cfg: &TrainConfig,
    batch_size: usize,
    mut hook: Option<&mut dyn StepHook<S>>,
) -> Result<TrainOutcome<S>, TrainError> {
    cfg.validate()?;
    check_inputs(init, train, val, t)?;
    let mut params = init.clone();
    let mut log = Vec::new();
    if cfg.epochs == 0 {
        return Ok(TrainOutcome { params, log, best_epoch: 0, best_val_loss: None, epochs_run: 0, stopped_early: false });
    }
    let train_targets = render_targets(train, t, cfg.render_domain, &cfg.tonemap);
    let val_targets = render_targets(val, t, cfg.render_domain, &cfg.tonemap);
    let val_metric_targets =
        if cfg.render_domain == RenderDomain::Tonemapped { None } else { Some(render_targets(val, t, RenderDomain::Tonemapped, &cfg.tonemap)) };
    let op: Arc<dyn LinearOperator<S>> = t.clone();
    let mut adam = Adam::new(&params, cfg.adam(cfg.lr), is_task_block);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, ModelParams<S>)> = None;
    let mut since_best = 0;
    let mut epochs_run = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossValues::default();
        let mut domain_sum = 0.0;
        for (bi, chunk) in order.chunks(batch_size).enumerate() {
            let b = train.batch(chunk, &train_targets);
            let mut tape = Tape::new();
            let bound = Bound::new(&mut tape, &params, true);
            let x = tape.constant(b.inputs);
            let tr = forward_tape(&mut tape, &params, &bound, x, BnMode::Batch)?;
            let th = tape.constant(b.target_hdr);
            let te = tape.constant(b.target_theta);
            let trr = tape.constant(b.target_render);
            let l = loss_all(&mut tape, tr.hdr, th, tr.elevation, te, trr, op.clone(), cfg.weights, cfg.render_domain, &cfg.tonemap);
            let mut total = l.all;
            let mut dom_loss = None;
            if let Some(h) = hook.as_deref_mut() {
                if let Some(d) = h.extend(&mut tape, &params, &bound, tr.latent, chunk.len())? {
                    dom_loss = Some(d);
                    total = tape.add(total, d);
                }
            }
            let values = loss_values(&tape, &l);
            let total_value = tape.value(total).item().f64();
            if !total_value.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch: bi + 1 });
            }
            tape.backward(total);
            adam.step(&mut params, &tape, &bound);
            if let Some(h) = hook.as_deref_mut() {
                h.update(&tape, &mut params, &bound);
            }
            params.update_running_stats(&tr.bn_stats);
            sums.accumulate(&values, chunk.len() as f64);
            if let Some(d) = dom_loss {
                domain_sum += chunk.len() as f64 * tape.value(d).item().f64();
            }
        }
        let n = train.len() as f64;
        let train_losses = sums.scaled(1.0 / n);
        log.push(EpochRecord {
            epoch,
            split: Split::Train,
            losses: train_losses,
            loss_domain: hook.is_some().then_some(domain_sum / n),
            metrics: None,
        });
        let ev = evaluate_with(&params, val, t, cfg, &val_targets, val_metric_targets.as_deref().unwrap_or(&val_targets))?;
        if !ev.losses.all.is_finite() {
            return Err(TrainError::NonFinite { epoch, batch: 0 });
        }
        let r = &ev.report;
        log.push(EpochRecord {
            epoch,
            split: Split::Val,
            losses: ev.losses,
            loss_domain: None,
            metrics: Some(SampleMetrics {
                e_hdr: r.e_hdr.aggregate,
                e_theta: r.e_theta.aggregate,
                e_sun: r.e_sun.aggregate,
                e_render: r.e_render.aggregate,
            }),
        });
        epochs_run = epoch;
        if best.as_ref().is_none_or(|b| ev.losses.all < b.0) {
            best = Some((ev.losses.all, epoch, params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_val, best_epoch, best_params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { params: best_params, log, best_epoch, best_val_loss: Some(best_val), epochs_run, stopped_early })
}

/// Trains from `init`; validation `loss_all` drives early stopping.
pub fn train<S: Real>(
    init: &ModelParams<S>,
    train: &Dataset<S>,
    val: &Dataset<S>,
    t: &Arc<TransportMatrix<S>>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<S>, TrainError> {
    run(init, train, val, t, cfg, cfg.batch_size, None)
}

/// Continues training a pretrained model. Identical to [`train`]; pass
/// [`TrainConfig::fine_tune`] for the lower learning rate.
pub fn fine_tune<S: Real>(
    pretrained: &ModelParams<S>,
    train_set: &Dataset<S>,
    val: &Dataset<S>,
    t: &Arc<TransportMatrix<S>>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<S>, TrainError> {
    train(pretrained, train_set, val, t, cfg)
}
