//! Randomised finite-difference checks for every tape operation.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::gradcheck;
use super::{LinearOperator, Tape, Tensor, Var};

/// Central-difference step in double precision.
pub const SUITE_EPS: f64 = 1e-5;
/// Coordinates sampled per input and instance.
pub const SUITE_COORDS: usize = 24;

/// Worst case over all instances of one operation.
#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub instances: usize,
    pub worst_rel_error: f64,
    pub passed: bool,
}

type Loss = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var + Send + Sync>;
type Case = fn(&mut ChaCha8Rng) -> (Loss, Vec<Tensor<f64>>);

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Uniform in `±[lo, hi]`; keeps inputs off kinks at zero.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 } * rng.random_range(lo..hi)).collect(),
    )
}

/// Weighted sum against a fixed random tensor: a generic scalar readout.
fn readout(t: &mut Tape<f64>, y: Var, w: &Tensor<f64>) -> Var {
    let c = t.constant(w.clone());
    let p = t.mul(y, c);
    t.sum(p)
}

fn conv_dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize, usize) {
    let k = [1, 3, 5][rng.random_range(0..3)];
    (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(3..8), rng.random_range(3..9), k)
}

fn case_conv2d(rng: &mut ChaCha8Rng) -> (Loss, Vec<Tensor<f64>>) {
    let (n, c, h, w, k) = conv_dims(rng);
    let (co, stride) = (rng.random_range(1..4), rng.random_range(1..3));
    let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
    let r = uniform(&[n, co, oh, ow], rng, -1.0, 1.0);
    let inputs = vec![uniform(&[n, c, h, w], rng, -1.0, 1.0), uniform(&[co, c, k, k], rng, -0.5, 0.5), uniform(&[co], rng, -0.5, 0.5)];
    (
        Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], stride);
            readout(t, y, &r)
        }),
        inputs,
    )
}

fn case_conv_transpose2d(rng: &mut ChaCha8Rng) -> (Loss, Vec<Tensor<f64>>) {
    let (n, ci, h, w, k) = conv_dims(rng);
    let (co, stride) = (rng.random_range(1..4), rng.random_range(1..3));
    let r = uniform(&[n, co, h * stride, w * stride], rng, -1.0, 1.0);
    let inputs = vec![uniform(&[n, ci, h, w], rng, -1.0, 1.0), uniform(&[ci, co, k, k], rng, -0.5, 0.5), uniform(&[co], rng, -0.5, 0.5)];
    (
        Box::new(move |t, v| {
            let y = t.conv_transpose2d(v[0], v[1], v[2], stride);
            readout(t, y, &r)
        }),
        inputs,
    )
}

fn bn_inputs(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Tensor<f64>) {
    let shape = [rng.random_range(2..4), rng.random_range(1..4), rng.random_range(2..5), rng.random_range(2..5)];
    let c = shape[1];
    let inputs = vec![uniform(&shape, rng, -1.0, 1.0), uniform(&[c], rng, 0.5, 1.5), uniform(&[c], rng, -0.5, 0.5)];
    (inputs, uniform(&shape, rng, -1.0, 1.0))
}

fn case_batchnorm_train(rng: &mut ChaCha8Rng) -> (Loss, Vec<Tensor<f64>>) {
    let (inputs, r) = bn_inputs(rng);
    (
        Box::new(move |t, v| {
            let (y, _) = t.batchnorm_train(v[0], v[1], v[2], 1e-5);
            readout(t, y, &r)
        }),
        inputs,
    )
}

fn case_batchnorm_infer(rng: &mut ChaCha8Rng) -> (Loss, Vec<Tensor<f64>>) {
    let (inputs, r) = bn_inputs(rng);
    let c = inputs[1].numel();
    let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..2.0)).collect();
    (
        Box::new(move |t, v| {
            let y = t.batchnorm_infer(v[0], v[1], v[2], &mean, &var, 1e-5);
            readout(t, y, &r)
        }),
        inputs,
    )
}

fn flat_shape(rng: &mut ChaCha8Rng) -> [usize; 2] {
    [rng.random_range(1..5), rng.random_range(1..7)]
}

fn case_elu(rng: &mut ChaCha8Rng) -> (Loss, Vec<Tensor<f64>>) {
    let s = flat_shape(rng);
    let r = uniform(&s, rng, -1.0, 1.0);
    let x = off_zero(&s, rng, 0.01, 2.0);
    (
        Box::new(move |t, v| {
            let y = t.elu(v[0]);
            readout(t, y, &r)
        }),
        vec![x],
    )
}

fn case_add_scalar(rng: &mut ChaCha8Rng) -> (Loss, Vec<Tensor<f64>>) {
    let s = flat_shape(rng);
    let c = rng.random_range(-2.0..2.0);
    let x = uniform(&s, rng, -1.0, 1.0);
    (
        Box::new(move |t, v| {
            let y = t.add_scalar(v[0], c);
            let q = t.mul(y, y);
            t.sum(q)
        }),
        vec![x],
    )
}

fn case_scale(rng: &mut ChaCha8Rng) -> (Loss, Vec<Tensor<f64>>) {
    let s = flat_shape(rng);
    let c = rng.random_range(-2.0..2.0);
    let r = uniform(&s, rng, -1.0, 1.0);
    let x = uniform(&s, rng, -1.0, 1.0);
    (
        Box::new(move |t, v| {
            let y = t.scale(v[0], c);
            readout(t, y, &r)
        }),
        vec![x],
    )
}

fn case_add(rng: &mut ChaCha8Rng) -> (Loss, Vec<Tensor<f64>>) {
    let s = flat_shape(rng);
    let inputs = vec![uniform(&s, rng, -1.0, 1.0), uniform(&s, rng, -1.0, 1.0)];
    (
        Box::new(|t, v| {
            let y = t.add(v[0], v[1]);
            let q = t.mul(y, y);
            t.sum(q)
        }),
        inputs,
    )
}

fn case_mul(rng: &mut ChaCha8Rng) -> (Loss, Vec<Tensor<f64>>) {
    let s = flat_shape(rng);
    let r = uniform(&s, rng, -1.0, 1.0);
    let inputs = vec![uniform(&s, rng, -1.0, 1.0), uniform(&s, rng, -1.0, 1.0)];
    (
        Box::new(move |t, v| {
            let y = t.mul(v[0], v[1]);
            readout(t, y, &r)
        }),
        inputs,
    )
}

fn case_sum(rng: &mut ChaCha8Rng) -> (Loss, Vec<Tensor<f64>>) {
    let s = flat_shape(rng);
    let x = uniform(&s, rng, -1.0, 1.0);
    (
        Box::new(|t, v| {
            let y = t.sum(v[0]);
            t.mul(y, y)
        }),
        vec![x],
    )
}

fn case_linear(rng: &mut ChaCha8Rng) -> (Loss, Vec<Tensor<f64>>) {
    let (n, i, o) = (rng.random_range(1..5), rng.random_range(1..7), rng.random_range(1..6));
    let r = uniform(&[n, o], rng, -1.0, 1.0);
    let inputs = vec![uniform(&[n, i], rng, -1.0, 1.0), uniform(&[o, i], rng, -1.0, 1.0), uniform(&[o], rng, -1.0, 1.0)];
    (
        Box::new(move |t, v| {
            let y = t.linear(v[0], v[1], v[2]);
            readout(t, y, &r)
        }),
        inputs,
    )
}

fn case_mse(rng: &mut ChaCha8Rng) -> (Loss, Vec<Tensor<f64>>) {
    let s = flat_shape(rng);
    let inputs = vec![uniform(&s, rng, -1.0, 1.0), uniform(&s, rng, -1.0, 1.0)];
    (Box::new(|t, v| t.mse(v[0], v[1])), inputs)
}

fn case_l1(rng: &mut ChaCha8Rng) -> (Loss, Vec<Tensor<f64>>) {
    let s = flat_shape(rng);
    let x = uniform(&s, rng, -1.0, 1.0);
    let gap = off_zero(&s, rng, 0.01, 1.0);
    let target = Tensor::new(&s, x.data().iter().zip(gap.data()).map(|(a, d)| a + d).collect());
    (Box::new(|t, v| t.l1(v[0], v[1])), vec![x, target])
}

fn case_softmax_xent(rng: &mut ChaCha8Rng) -> (Loss, Vec<Tensor<f64>>) {
    let (n, k) = (rng.random_range(1..6), rng.random_range(2..5));
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..2.0)).collect();
    let logits = uniform(&[n, k], rng, -3.0, 3.0);
    (Box::new(move |t, v| t.softmax_xent(v[0], &labels, Some(&weights))), vec![logits])
}

fn case_reshape(rng: &mut ChaCha8Rng) -> (Loss, Vec<Tensor<f64>>) {
    let (a, b, c) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..5));
    let r = uniform(&[a * b, c], rng, -1.0, 1.0);
    let x = uniform(&[a, b, c], rng, -1.0, 1.0);
    (
        Box::new(move |t, v| {
            let y = t.reshape(v[0], &[a * b, c]);
            readout(t, y, &r)
        }),
        vec![x],
    )
}

fn case_crop_rows(rng: &mut ChaCha8Rng) -> (Loss, Vec<Tensor<f64>>) {
    let shape = [rng.random_range(1..3), rng.random_range(1..3), rng.random_range(2..7), rng.random_range(1..5)];
    let start = rng.random_range(0..shape[2] - 1);
    let end = rng.random_range(start + 1..=shape[2]);
    let r = uniform(&[shape[0], shape[1], end - start, shape[3]], rng, -1.0, 1.0);
    let x = uniform(&shape, rng, -1.0, 1.0);
    (
        Box::new(move |t, v| {
            let y = t.crop_rows(v[0], start, end);
            readout(t, y, &r)
        }),
        vec![x],
    )
}

fn case_narrow_batch(rng: &mut ChaCha8Rng) -> (Loss, Vec<Tensor<f64>>) {
    let shape = [rng.random_range(2..6), rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4)];
    let start = rng.random_range(0..shape[0]);
    let len = rng.random_range(1..=shape[0] - start);
    let r = uniform(&[len, shape[1], shape[2], shape[3]], rng, -1.0, 1.0);
    let x = uniform(&shape, rng, -1.0, 1.0);
    (
        Box::new(move |t, v| {
            let y = t.narrow_batch(v[0], start, len);
            readout(t, y, &r)
        }),
        vec![x],
    )
}

fn case_pow_scale(rng: &mut ChaCha8Rng) -> (Loss, Vec<Tensor<f64>>) {
    let s = flat_shape(rng);
    let (scale, exponent) = (rng.random_range(1.0..40.0), rng.random_range(1.2..3.0));
    let r = uniform(&s, rng, -1.0, 1.0);
    let x = uniform(&s, rng, 0.05, 1.0);
    (
        Box::new(move |t, v| {
            let y = t.pow_scale(v[0], scale, exponent);
            readout(t, y, &r)
        }),
        vec![x],
    )
}

/// Row-major dense matrix as a fixed linear operator.
pub struct DenseOperator {
    pub rows: usize,
    pub cols: usize,
    pub a: Vec<f64>,
}

impl LinearOperator<f64> for DenseOperator {
    fn in_dim(&self) -> usize {
        self.cols
    }
    fn out_dim(&self) -> usize {
        self.rows
    }
    fn apply_batch(&self, x: &[f64], m: usize, out: &mut [f64]) {
        for k in 0..m {
            for i in 0..self.rows {
                out[k * self.rows + i] = (0..self.cols).map(|j| self.a[i * self.cols + j] * x[k * self.cols + j]).sum();
            }
        }
    }
    fn adjoint_batch_acc(&self, g: &[f64], m: usize, out: &mut [f64]) {
        for k in 0..m {
            for j in 0..self.cols {
                out[k * self.cols + j] += (0..self.rows).map(|i| self.a[i * self.cols + j] * g[k * self.rows + i]).sum::<f64>();
            }
        }
    }
}

fn case_fixed_linear(rng: &mut ChaCha8Rng) -> (Loss, Vec<Tensor<f64>>) {
    let (m, c, h, w, rows) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..6));
    let cols = c * h * w;
    let op: Arc<dyn LinearOperator<f64>> =
        Arc::new(DenseOperator { rows, cols, a: (0..rows * cols).map(|_| rng.random_range(0.0..1.0)).collect() });
    let r = uniform(&[m, rows], rng, -1.0, 1.0);
    let x = uniform(&[m, c, h, w], rng, -1.0, 1.0);
    (
        Box::new(move |t, v| {
            let y = t.fixed_linear(v[0], op.clone());
            readout(t, y, &r)
        }),
        vec![x],
    )
}

const CASES: [(&str, Case); 19] = [
    ("conv2d", case_conv2d),
    ("conv_transpose2d", case_conv_transpose2d),
    ("batchnorm_train", case_batchnorm_train),
    ("batchnorm_infer", case_batchnorm_infer),
    ("elu", case_elu),
    ("add_scalar", case_add_scalar),
    ("scale", case_scale),
    ("add", case_add),
    ("mul", case_mul),
    ("sum", case_sum),
    ("linear", case_linear),
    ("mse", case_mse),
    ("l1", case_l1),
    ("softmax_xent", case_softmax_xent),
    ("reshape", case_reshape),
    ("crop_rows", case_crop_rows),
    ("narrow_batch", case_narrow_batch),
    ("pow_scale", case_pow_scale),
    ("fixed_linear", case_fixed_linear),
];

/// The reversal layer is the identity forward and `−λ·` backward, so it is
/// checked against `−λ` times the finite-difference gradient of its
/// identity twin.
fn reversal_error(rng: &mut ChaCha8Rng) -> f64 {
    let s = flat_shape(rng);
    let lambda = rng.random_range(0.05..2.0);
    let r = uniform(&s, rng, -1.0, 1.0);
    let x = uniform(&s, rng, -1.0, 1.0);
    let loss = |t: &mut Tape<f64>, y: Var| {
        let q = t.mul(y, y);
        readout(t, q, &r)
    };
    let mut t = Tape::new();
    let xv = t.param(x.clone());
    let y = t.gradient_reversal(xv, lambda);
    let out = loss(&mut t, y);
    t.backward(out);
    let analytic = t.grad(xv).expect("reversal gradient").to_vec();
    let eval = |x: Tensor<f64>| {
        let mut t = Tape::new();
        let v = t.param(x);
        let out = loss(&mut t, v);
        t.value(out).item()
    };
    let (mut err, mut scale): (f64, f64) = (0.0, 0.0);
    for i in 0..x.numel() {
        let (mut plus, mut minus) = (x.clone(), x.clone());
        plus.data_mut()[i] += SUITE_EPS;
        minus.data_mut()[i] -= SUITE_EPS;
        let expected = -lambda * (eval(plus) - eval(minus)) / (2.0 * SUITE_EPS);
        err = err.max((expected - analytic[i]).abs());
        scale = scale.max(expected.abs());
    }
    if scale > 0.0 { err / scale } else { err }
}

/// Runs `instances` random problems per operation and reports the worst
/// relative error of each against `tol`.
pub fn gradcheck_suite(instances: usize, seed: u64, tol: f64) -> Vec<OpCheck> {
    let mut rows: Vec<OpCheck> = CASES
        .iter()
        .enumerate()
        .map(|(k, (op, case))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((k as u64 + 1) << 32));
            let worst = (0..instances)
                .map(|i| {
                    let (f, inputs) = case(&mut rng);
                    let r = gradcheck(f, &inputs, SUITE_EPS, SUITE_COORDS, seed.wrapping_add(i as u64));
                    r.max_rel_error.max(r.directional_rel_error)
                })
                .fold(0.0, f64::max);
            OpCheck { op, instances, worst_rel_error: worst, passed: worst < tol }
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((CASES.len() as u64 + 1) << 32));
    let worst = (0..instances).map(|_| reversal_error(&mut rng)).fold(0.0, f64::max);
    rows.push(OpCheck { op: "gradient_reversal", instances, worst_rel_error: worst, passed: worst < tol });
    rows
}
