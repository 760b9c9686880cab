use crate::autodiff::Tape;
use crate::net::{Bound, ModelParams};
use crate::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment estimates of one parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { step: 0, m: vec![0.0; len], v: vec![0.0; len] }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step<S: Real>(params: &mut [S], grads: &[S], state: &mut AdamState, cfg: &AdamConfig) {
    assert_eq!(params.len(), grads.len(), "parameter and gradient lengths differ");
    assert_eq!(params.len(), state.m.len(), "state length");
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let g = g.f64();
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let update = cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        *p = S::lit(p.f64() - update);
    }
}

/// Adam over the trainable blocks of a model selected by name.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    states: Vec<Option<AdamState>>,
}

impl Adam {
    pub fn new<S: Real>(params: &ModelParams<S>, cfg: AdamConfig, select: impl Fn(&str) -> bool) -> Self {
        let states = params
            .blocks()
            .iter()
            .map(|b| (b.trainable && select(&b.name)).then(|| AdamState::new(b.tensor.numel())))
            .collect();
        Self { cfg, states }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// Applies the gradients recorded on `tape`. Blocks without a gradient
    /// take a zero-gradient step.
    pub fn step<S: Real>(&mut self, params: &mut ModelParams<S>, tape: &Tape<S>, bound: &Bound) {
        for (i, (block, state)) in params.blocks_mut().iter_mut().zip(&mut self.states).enumerate() {
            let (Some(state), Some(var)) = (state.as_mut(), bound.var(i)) else { continue };
            let zeros;
            let g = match tape.grad(var) {
                Some(g) => g,
                None => {
                    zeros = vec![S::zero(); block.tensor.numel()];
                    &zeros
                }
            };
            adam_step(block.tensor.data_mut(), g, state, &self.cfg);
        }
    }
}
