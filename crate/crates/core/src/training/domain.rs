//! Adversarial domain adaptation through a gradient-reversal layer.
//!
//! Each minibatch pairs `B/2` labelled synthetic samples with `B/2`
//! unlabelled real inputs. Task losses see the synthetic half only. The
//! discriminator classifies every latent (synthetic 0, real 1); its
//! cross-entropy reaches the encoder through gradient reversal.
//!
//! The synthetic half follows exactly the sample order of plain training at
//! batch size `B/2` under the same seed; real inputs are drawn from a
//! separate random stream. Real inputs pass the encoder with batch
//! statistics that never reach the running averages.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{run, Adam, StepHook, TrainConfig, TrainError, TrainOutcome};
use crate::autodiff::{Tape, Tensor, Var};
use crate::net::{domain_tape, encode, BnMode, Bound, ModelParams};
use crate::training::Dataset;
use crate::transport::TransportMatrix;
use crate::Real;

/// Mixed into the seed of the real-input stream.
const REAL_STREAM: u64 = 0x5245_414c_5f44_4f4d;
/// Mixed into the seed of a freshly attached discriminator.
const HEAD_SEED: u64 = 0x4845_4144;

pub const SYNTHETIC_LABEL: usize = 0;
pub const REAL_LABEL: usize = 1;

fn is_domain_block(name: &str) -> bool {
    name.starts_with("dom.")
}

fn stack<S: Real>(inputs: &[Vec<S>], idx: &[usize], w: usize, h: usize) -> Tensor<S> {
    let mut x = Vec::with_capacity(idx.len() * 3 * w * h);
    for &i in idx {
        x.extend_from_slice(&inputs[i]);
    }
    Tensor::new(&[idx.len(), 3, h, w], x)
}

fn check_inputs<S>(inputs: &[Vec<S>], w: usize, h: usize, what: &'static str) -> Result<(), TrainError> {
    if inputs.is_empty() {
        return Err(TrainError::EmptyDataset(what));
    }
    if let Some(i) = inputs.iter().position(|v| v.len() != 3 * w * h) {
        return Err(TrainError::Shape(format!("{what} input {i} has {} values, expected {}", inputs[i].len(), 3 * w * h)));
    }
    Ok(())
}

/// Sample-weighted mean cross-entropy of both halves.
fn domain_loss<S: Real>(tape: &mut Tape<S>, synth_logits: Var, real_logits: Var) -> Var {
    let n = tape.shape(synth_logits)[0];
    let m = tape.shape(real_logits)[0];
    let xs = tape.softmax_xent(synth_logits, &vec![SYNTHETIC_LABEL; n], None);
    let xr = tape.softmax_xent(real_logits, &vec![REAL_LABEL; m], None);
    let total = (n + m) as f64;
    let a = tape.scale(xs, S::lit(n as f64 / total));
    let b = tape.scale(xr, S::lit(m as f64 / total));
    tape.add(a, b)
}

struct DomainHook<'a, S> {
    real: &'a [Vec<S>],
    width: usize,
    height: usize,
    rng: ChaCha8Rng,
    lambda: S,
    adam: Adam,
}

impl<S: Real> StepHook<S> for DomainHook<'_, S> {
    fn extend(&mut self, tape: &mut Tape<S>, params: &ModelParams<S>, bound: &Bound, latent: Var, n: usize) -> Result<Option<Var>, TrainError> {
        let idx: Vec<usize> = (0..n).map(|_| self.rng.random_range(0..self.real.len())).collect();
        let xr = tape.constant(stack(self.real, &idx, self.width, self.height));
        let (real_latent, _, _) = encode(tape, params, bound, xr, BnMode::Batch)?;
        let ls = domain_tape(tape, params, bound, latent, self.lambda);
        let lr = domain_tape(tape, params, bound, real_latent, self.lambda);
        Ok(Some(domain_loss(tape, ls, lr)))
    }

    fn update(&mut self, tape: &Tape<S>, params: &mut ModelParams<S>, bound: &Bound) {
        self.adam.step(params, tape, bound);
    }
}

/// Domain-adapted training. A discriminator is attached when `init` has none.
pub fn train_domain_adapted<S: Real>(
    init: &ModelParams<S>,
    synthetic: &Dataset<S>,
    real_inputs: &[Vec<S>],
    val: &Dataset<S>,
    t: &Arc<TransportMatrix<S>>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<S>, TrainError> {
    cfg.validate()?;
    check_inputs(real_inputs, synthetic.width(), synthetic.height(), "unlabelled")?;
    let params = if init.has_domain_head() { init.clone() } else { init.with_domain_head(cfg.seed ^ HEAD_SEED) };
    let adam = Adam::new(&params, cfg.adam(cfg.domain_lr), is_domain_block);
    let mut hook = DomainHook {
        real: real_inputs,
        width: synthetic.width(),
        height: synthetic.height(),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ REAL_STREAM),
        lambda: S::lit(cfg.lambda_grl),
        adam,
    };
    let half = (cfg.batch_size / 2).max(1);
    run(&params, synthetic, val, t, cfg, half, Some(&mut hook))
}

fn latents<S: Real>(params: &ModelParams<S>, inputs: &[Vec<S>], chunk: usize) -> Result<Vec<Tensor<S>>, TrainError> {
    let cfg = params.config();
    let idx: Vec<usize> = (0..inputs.len()).collect();
    let mut out = Vec::new();
    for c in idx.chunks(chunk.max(1)) {
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, params, false);
        let x = tape.constant(stack(inputs, c, cfg.input_width, cfg.input_height));
        let (l, _, _) = encode(&mut tape, params, &bound, x, BnMode::Running)?;
        out.push(tape.value(l).clone());
    }
    Ok(out)
}

/// Fraction of inputs the discriminator assigns to their true domain.
pub fn domain_accuracy<S: Real>(params: &ModelParams<S>, synthetic: &[Vec<S>], real: &[Vec<S>]) -> Result<f64, TrainError> {
    let cfg = params.config();
    check_inputs(synthetic, cfg.input_width, cfg.input_height, "synthetic")?;
    check_inputs(real, cfg.input_width, cfg.input_height, "real")?;
    let mut correct = 0usize;
    for (inputs, label) in [(synthetic, SYNTHETIC_LABEL), (real, REAL_LABEL)] {
        for lat in latents(params, inputs, 64)? {
            let logits = crate::net::forward_domain(params, &lat, S::one())?;
            for row in logits.data().chunks(2) {
                let pred = usize::from(row[1] > row[0]);
                correct += usize::from(pred == label);
            }
        }
    }
    Ok(correct as f64 / (synthetic.len() + real.len()) as f64)
}

/// Trains only the discriminator on a frozen encoder for `steps` minibatches.
pub fn train_discriminator<S: Real>(
    init: &ModelParams<S>,
    synthetic: &[Vec<S>],
    real: &[Vec<S>],
    cfg: &TrainConfig,
    steps: usize,
) -> Result<ModelParams<S>, TrainError> {
    cfg.validate()?;
    let nc = init.config();
    let (w, h) = (nc.input_width, nc.input_height);
    check_inputs(synthetic, w, h, "synthetic")?;
    check_inputs(real, w, h, "real")?;
    let mut params = if init.has_domain_head() { init.clone() } else { init.with_domain_head(cfg.seed ^ HEAD_SEED) };
    let mut adam = Adam::new(&params, cfg.adam(cfg.domain_lr), is_domain_block);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let half = (cfg.batch_size / 2).max(1);
    for _ in 0..steps {
        let si: Vec<usize> = (0..half).map(|_| rng.random_range(0..synthetic.len())).collect();
        let ri: Vec<usize> = (0..half).map(|_| rng.random_range(0..real.len())).collect();
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &params, true);
        let xs = tape.constant(stack(synthetic, &si, w, h));
        let xr = tape.constant(stack(real, &ri, w, h));
        let (ls, _, _) = encode(&mut tape, &params, &bound, xs, BnMode::Running)?;
        let (lr, _, _) = encode(&mut tape, &params, &bound, xr, BnMode::Running)?;
        let ds = domain_tape(&mut tape, &params, &bound, ls, S::one());
        let dr = domain_tape(&mut tape, &params, &bound, lr, S::one());
        let loss = domain_loss(&mut tape, ds, dr);
        if !tape.value(loss).item().is_finite() {
            return Err(TrainError::NonFinite { epoch: 0, batch: 0 });
        }
        tape.backward(loss);
        adam.step(&mut params, &tape, &bound);
    }
    Ok(params)
}
