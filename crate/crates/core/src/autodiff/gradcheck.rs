//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};

/// Outcome of [`gradcheck`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Worst per-input `max|analytic − numeric| / max|numeric|` over the
    /// sampled coordinates.
    pub max_rel_error: f64,
    /// Relative error of the directional derivative along a random direction.
    pub directional_rel_error: f64,
    /// Coordinates compared.
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol && self.directional_rel_error < tol
    }
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.value(out).item()
}

/// Compares reverse-mode gradients of the scalar `f` with central
/// differences at step `eps`, sampling up to `coords` entries per input.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], eps: f64, coords: usize, seed: u64) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.backward(out);
    let grads: Vec<Vec<f64>> =
        vars.iter().zip(inputs).map(|(v, t)| tape.grad(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    for (k, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let idx: Vec<usize> = if n <= coords { (0..n).collect() } else { (0..coords).map(|_| rng.random_range(0..n)).collect() };
        let (mut num_max, mut err_max): (f64, f64) = (0.0, 0.0);
        for i in idx {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += eps;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= eps;
            let numeric = (eval(&f, &plus) - eval(&f, &minus)) / (2.0 * eps);
            num_max = num_max.max(numeric.abs());
            err_max = err_max.max((numeric - grads[k][i]).abs());
            checked += 1;
        }
        let rel = if num_max > 0.0 { err_max / num_max } else { err_max };
        max_rel = max_rel.max(rel);
    }

    let dirs: Vec<Vec<f64>> = inputs.iter().map(|t| (0..t.numel()).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let shifted = |sign: f64| -> Vec<Tensor<f64>> {
        inputs
            .iter()
            .zip(&dirs)
            .map(|(t, d)| {
                let mut t = t.clone();
                t.data_mut().iter_mut().zip(d).for_each(|(v, dv)| *v += sign * eps * dv);
                t
            })
            .collect()
    };
    let numeric = (eval(&f, &shifted(1.0)) - eval(&f, &shifted(-1.0))) / (2.0 * eps);
    let analytic: f64 = grads.iter().zip(&dirs).flat_map(|(g, d)| g.iter().zip(d).map(|(a, b)| a * b)).sum();
    let directional = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-12);
    GradCheckReport { max_rel_error: max_rel, directional_rel_error: directional, checked }
}
