use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv::ConvGeom;
use super::gradcheck::gradcheck;
use super::*;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Same-padded strided convolution by direct summation.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize) -> Tensor<f64> {
    let [n, c, h, wd] = *x.shape() else { unreachable!() };
    let [co, _, k, _] = *w.shape() else { unreachable!() };
    let g = ConvGeom::same(c, h, wd, k, stride);
    let mut out = vec![0.0; n * co * g.out_h * g.out_w];
    for s in 0..n {
        for o in 0..co {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = b[o];
                    for ci in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * stride + ki) as isize - g.pad_top as isize;
                                let ix = (ox * stride + kj) as isize - g.pad_left as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((s * c + ci) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * c + ci) * k + ki) * k + kj];
                            }
                        }
                    }
                    out[((s * co + o) * g.out_h + oy) * g.out_w + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, co, g.out_h, g.out_w], out)
}

/// Transposed convolution by scattering each input pixel's kernel.
fn naive_conv_transpose(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize) -> Tensor<f64> {
    let [n, ci, h, wd] = *x.shape() else { unreachable!() };
    let [_, co, k, _] = *w.shape() else { unreachable!() };
    let (oh, ow) = (h * stride, wd * stride);
    let g = ConvGeom::same(co, oh, ow, k, stride);
    let mut out = vec![0.0; n * co * oh * ow];
    for s in 0..n {
        for o in 0..co {
            for v in &mut out[(s * co + o) * oh * ow..][..oh * ow] {
                *v = b[o];
            }
        }
        for c in 0..ci {
            for iy in 0..h {
                for ix in 0..wd {
                    let xv = x.data()[((s * ci + c) * h + iy) * wd + ix];
                    for o in 0..co {
                        for ki in 0..k {
                            for kj in 0..k {
                                let y = (iy * stride + ki) as isize - g.pad_top as isize;
                                let xx = (ix * stride + kj) as isize - g.pad_left as isize;
                                if y < 0 || xx < 0 || y >= oh as isize || xx >= ow as isize {
                                    continue;
                                }
                                out[((s * co + o) * oh + y as usize) * ow + xx as usize] +=
                                    xv * w.data()[((c * co + o) * k + ki) * k + kj];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, co, oh, ow], out)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn conv_1x1_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&[2, 3, 4, 5], &mut rng, -1.0, 1.0);
    let mut w = Tensor::zeros(&[3, 3, 1, 1]);
    for c in 0..3 {
        w.data_mut()[c * 3 + c] = 1.0;
    }
    let mut t = Tape::<f64>::new();
    let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w), t.constant(Tensor::zeros(&[3])));
    let y = t.conv2d(xv, wv, bv, 1);
    assert_eq!(t.value(y), &x);
}

#[test]
fn conv_zero_input_is_bias() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::zeros(&[1, 2, 6, 8]));
    let w = t.constant(Tensor::full(&[3, 2, 3, 3], 0.7));
    let b = t.constant(Tensor::new(&[3], vec![1.0, -2.0, 0.5]));
    let y = t.conv2d(x, w, b, 2);
    assert_eq!(t.shape(y), [1, 3, 3, 4]);
    for (i, v) in t.value(y).data().iter().enumerate() {
        assert_eq!(*v, [1.0, -2.0, 0.5][i / 12]);
    }
}

#[test]
fn conv_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (k, stride) in [(3, 2), (5, 2), (3, 1), (4, 2)] {
        let x = rand_tensor(&[2, 2, 6, 8], &mut rng, -1.0, 1.0);
        let w = rand_tensor(&[3, 2, k, k], &mut rng, -1.0, 1.0);
        let b = rand_tensor(&[3], &mut rng, -1.0, 1.0);
        let mut t = Tape::<f64>::new();
        let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
        let y = t.conv2d(xv, wv, bv, stride);
        let want = naive_conv(&x, &w, b.data(), stride);
        assert_eq!(t.shape(y), want.shape());
        assert!(max_abs_diff(t.value(y).data(), want.data()) < 1e-10, "k={k} s={stride}");
    }
}

#[test]
fn conv_transpose_zero_input_is_bias() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::zeros(&[1, 2, 3, 4]));
    let w = t.constant(Tensor::full(&[2, 3, 5, 5], 0.3));
    let b = t.constant(Tensor::new(&[3], vec![0.25, 0.5, -1.0]));
    let y = t.conv_transpose2d(x, w, b, 2);
    assert_eq!(t.shape(y), [1, 3, 6, 8]);
    for (i, v) in t.value(y).data().iter().enumerate() {
        assert_eq!(*v, [0.25, 0.5, -1.0][i / 48]);
    }
}

#[test]
fn conv_transpose_of_delta_scatters_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut x = Tensor::zeros(&[1, 1, 4, 4]);
    x.data_mut()[4 + 2] = 1.0;
    let w = rand_tensor(&[1, 2, 3, 3], &mut rng, -1.0, 1.0);
    let b = vec![0.0, 0.0];
    let mut t = Tape::<f64>::new();
    let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(Tensor::zeros(&[2])));
    let y = t.conv_transpose2d(xv, wv, bv, 2);
    let want = naive_conv_transpose(&x, &w, &b, 2);
    assert!(max_abs_diff(t.value(y).data(), want.data()) < 1e-12);
    // the delta at (1, 2) lands at (2, 4) minus padding; 3x3 kernel copies per channel
    let nonzero = t.value(y).data().iter().filter(|v| **v != 0.0).count();
    assert_eq!(nonzero, 2 * 9);
    let g = ConvGeom::same(2, 8, 8, 3, 2);
    for o in 0..2 {
        for ki in 0..3 {
            for kj in 0..3 {
                let (r, c) = (2 + ki - g.pad_top, 4 + kj - g.pad_left);
                assert_eq!(t.value(y).data()[(o * 8 + r) * 8 + c], w.data()[(o * 3 + ki) * 3 + kj]);
            }
        }
    }
}

#[test]
fn conv_transpose_matches_scatter_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for k in [3, 5, 4] {
        let x = rand_tensor(&[2, 3, 3, 5], &mut rng, -1.0, 1.0);
        let w = rand_tensor(&[3, 2, k, k], &mut rng, -1.0, 1.0);
        let b = rand_tensor(&[2], &mut rng, -1.0, 1.0);
        let mut t = Tape::<f64>::new();
        let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
        let y = t.conv_transpose2d(xv, wv, bv, 2);
        let want = naive_conv_transpose(&x, &w, b.data(), 2);
        assert!(max_abs_diff(t.value(y).data(), want.data()) < 1e-10, "k={k}");
    }
}

fn inner(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_adjoint(seed: u64, c_in: usize, c_out: usize, h: usize, w: usize, k: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&[2, c_in, h * 2, w * 2], &mut rng, -1.0, 1.0);
    let y = rand_tensor(&[2, c_out, h, w], &mut rng, -1.0, 1.0);
    let wt = rand_tensor(&[c_out, c_in, k, k], &mut rng, -1.0, 1.0);
    let mut t = Tape::<f64>::new();
    let (xv, yv, wv) = (t.constant(x.clone()), t.constant(y.clone()), t.constant(wt));
    let (b1, b2) = (t.constant(Tensor::zeros(&[c_out])), t.constant(Tensor::zeros(&[c_in])));
    let cx = t.conv2d(xv, wv, b1, 2);
    let ty = t.conv_transpose2d(yv, wv, b2, 2);
    let lhs = inner(t.value(cx).data(), y.data());
    let rhs = inner(x.data(), t.value(ty).data());
    (lhs - rhs).abs() / lhs.abs().max(1.0)
}

#[test]
fn conv_and_transpose_are_adjoint() {
    assert!(check_adjoint(5, 2, 3, 3, 4, 3) < 1e-8);
    assert!(check_adjoint(6, 3, 2, 4, 8, 5) < 1e-8);
}

#[test]
fn batchnorm_constant_channel_gives_shift() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::full(&[4, 2, 3, 3], 5.0));
    let g = t.constant(Tensor::new(&[2], vec![2.0, 3.0]));
    let b = t.constant(Tensor::new(&[2], vec![0.5, -0.25]));
    let (y, stats) = t.batchnorm_train(x, g, b, 1e-5);
    for (i, v) in t.value(y).data().iter().enumerate() {
        assert_eq!(*v, [0.5, -0.25][(i / 9) % 2]);
    }
    assert_eq!(stats.mean, vec![5.0, 5.0]);
    assert_eq!(stats.var, vec![0.0, 0.0]);
}

#[test]
fn batchnorm_of_normalized_batch_is_near_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut v: Vec<f64> = (0..64).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mean = v.iter().sum::<f64>() / 64.0;
    v.iter_mut().for_each(|x| *x -= mean);
    let sd = (v.iter().map(|x| x * x).sum::<f64>() / 64.0).sqrt();
    v.iter_mut().for_each(|x| *x /= sd);
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::new(&[64, 1], v.clone()));
    let g = t.constant(Tensor::full(&[1], 1.0));
    let b = t.constant(Tensor::zeros(&[1]));
    let (y, _) = t.batchnorm_train(x, g, b, 1e-5);
    assert!(max_abs_diff(t.value(y).data(), &v) < 1e-4);
}

#[test]
fn batchnorm_infer_uses_running_stats() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::new(&[2, 1], vec![3.0, 5.0]));
    let g = t.constant(Tensor::full(&[1], 2.0));
    let b = t.constant(Tensor::full(&[1], 1.0));
    let y = t.batchnorm_infer(x, g, b, &[1.0], &[4.0 - 1e-5], 1e-5);
    assert!(max_abs_diff(t.value(y).data(), &[3.0, 5.0]) < 1e-12);
}

#[test]
fn elementwise_definitions() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::new(&[4], vec![0.0, 1.0, -1e3, -1.0]));
    let y = t.elu(x);
    let v = t.value(y).data();
    assert_eq!(v[0], 0.0);
    assert_eq!(v[1], 1.0);
    assert_eq!(v[2], -1.0);
    assert!((v[3] - ((-1f64).exp() - 1.0)).abs() < 1e-15);
    let l1 = t.l1(x, x);
    let mse = t.mse(x, x);
    assert_eq!(t.value(l1).item(), 0.0);
    assert_eq!(t.value(mse).item(), 0.0);
    let logits = t.constant(Tensor::new(&[3, 2], vec![0.3; 6]));
    let xent = t.softmax_xent(logits, &[0, 1, 1], None);
    assert!((t.value(xent).item() - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn gradient_reversal_forward_and_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let xt = rand_tensor(&[2, 3], &mut rng, -1.0, 1.0);
    let mut t = Tape::<f64>::new();
    let x = t.param(xt.clone());
    let r = t.gradient_reversal(x, 1.0);
    assert_eq!(t.value(r), &xt);
    let s = t.sum(r);
    t.backward(s);
    assert!(t.grad(x).unwrap().iter().all(|g| *g == -1.0));
}

#[test]
fn gradient_reversal_twin_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let xt = rand_tensor(&[4, 5], &mut rng, -1.0, 1.0);
    let wt = rand_tensor(&[3, 5], &mut rng, -1.0, 1.0);
    let bt = rand_tensor(&[3], &mut rng, -1.0, 1.0);
    let target = rand_tensor(&[4, 3], &mut rng, -1.0, 1.0);
    let run = |lambda: Option<f64>| {
        let mut t = Tape::<f64>::new();
        let x = t.param(xt.clone());
        let (w, b, tg) = (t.param(wt.clone()), t.param(bt.clone()), t.constant(target.clone()));
        let h = match lambda {
            Some(l) => t.gradient_reversal(x, l),
            None => x,
        };
        let y = t.linear(h, w, b);
        let loss = t.mse(y, tg);
        t.backward(loss);
        (t.grad(x).unwrap().to_vec(), t.grad(w).unwrap().to_vec())
    };
    let (gx, gw) = run(None);
    for lambda in [1.0, 0.3] {
        let (rx, rw) = run(Some(lambda));
        for (a, b) in rx.iter().zip(&gx) {
            assert!((a + lambda * b).abs() < 1e-15);
        }
        assert_eq!(rw, gw, "parameters after the reversal are unaffected");
    }
}

#[test]
fn backward_is_deterministic_and_idempotent() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let xt = rand_tensor(&[3, 2, 8, 8], &mut rng, -1.0, 1.0).cast::<f32>();
    let wt = rand_tensor(&[4, 2, 3, 3], &mut rng, -1.0, 1.0).cast::<f32>();
    let run = || {
        let mut t = Tape::<f32>::new();
        let x = t.param(xt.clone());
        let w = t.param(wt.clone());
        let b = t.param(Tensor::zeros(&[4]));
        let (g, be) = (t.param(Tensor::full(&[4], 1.0)), t.param(Tensor::zeros(&[4])));
        let y = t.conv2d(x, w, b, 2);
        let (y, _) = t.batchnorm_train(y, g, be, 1e-5);
        let y = t.elu(y);
        let s = t.sum(y);
        t.backward(s);
        let first: Vec<u32> = t.grad(w).unwrap().iter().map(|v| v.to_bits()).collect();
        t.backward(s);
        let second: Vec<u32> = t.grad(w).unwrap().iter().map(|v| v.to_bits()).collect();
        assert_eq!(first, second);
        (first, t.grad(x).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

fn assert_gradcheck<F>(name: &str, f: F, inputs: &[Tensor<f64>])
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let r = gradcheck(f, inputs, 1e-3, 40, 11);
    assert!(r.passes(1e-3), "{name}: {r:?}");
}

#[test]
fn gradcheck_every_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x4 = rand_tensor(&[2, 2, 6, 8], &mut rng, -1.0, 1.0);
    let w = rand_tensor(&[3, 2, 3, 3], &mut rng, -0.5, 0.5);
    let b3 = rand_tensor(&[3], &mut rng, -0.5, 0.5);
    let wt = rand_tensor(&[2, 3, 5, 5], &mut rng, -0.5, 0.5);
    let tgt = rand_tensor(&[2, 3, 3, 4], &mut rng, -1.0, 1.0);
    let weights = rand_tensor(&[2, 2, 6, 8], &mut rng, -1.0, 1.0);

    assert_gradcheck(
        "conv2d",
        |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 2);
            let tg = t.constant(tgt.clone());
            t.mse(y, tg)
        },
        &[x4.clone(), w.clone(), b3.clone()],
    );
    let y3 = rand_tensor(&[2, 2, 3, 4], &mut rng, -1.0, 1.0);
    assert_gradcheck(
        "conv_transpose2d",
        |t, v| {
            let y = t.conv_transpose2d(v[0], v[1], v[2], 2);
            let tg = t.constant(Tensor::zeros(&[2, 3, 6, 8]));
            t.mse(y, tg)
        },
        &[y3, wt, b3.clone()],
    );
    let gamma = rand_tensor(&[2], &mut rng, 0.5, 1.5);
    let beta = rand_tensor(&[2], &mut rng, -0.5, 0.5);
    assert_gradcheck(
        "batchnorm_train",
        |t, v| {
            let (y, _) = t.batchnorm_train(v[0], v[1], v[2], 1e-5);
            let m = t.constant(weights.clone());
            let p = t.mul(y, m);
            t.sum(p)
        },
        &[x4.clone(), gamma.clone(), beta.clone()],
    );
    assert_gradcheck(
        "batchnorm_infer",
        |t, v| {
            let y = t.batchnorm_infer(v[0], v[1], v[2], &[0.2, -0.1], &[0.8, 1.7], 1e-5);
            let m = t.constant(weights.clone());
            let p = t.mul(y, m);
            t.sum(p)
        },
        &[x4.clone(), gamma, beta],
    );
    // keep inputs away from the ELU seam at zero
    let xe = Tensor::new(
        &[3, 4],
        (0..12).map(|i| if i % 2 == 0 { 0.2 + 0.1 * i as f64 } else { -0.3 - 0.1 * i as f64 }).collect(),
    );
    assert_gradcheck(
        "elu+shift+scale",
        |t, v| {
            let y = t.elu(v[0]);
            let y = t.add_scalar(y, 1.0);
            let y = t.scale(y, 0.7);
            let z = t.mul(y, y);
            t.sum(z)
        },
        &[xe.clone()],
    );
    let wl = rand_tensor(&[5, 4], &mut rng, -1.0, 1.0);
    let bl = rand_tensor(&[5], &mut rng, -1.0, 1.0);
    let tl = rand_tensor(&[3, 5], &mut rng, -1.0, 1.0);
    assert_gradcheck(
        "linear+mse",
        |t, v| {
            let y = t.linear(v[0], v[1], v[2]);
            let tg = t.constant(tl.clone());
            t.mse(y, tg)
        },
        &[xe.clone(), wl, bl],
    );
    let tgt_l1 = Tensor::new(&[3, 4], xe.data().iter().map(|v| v + 0.37).collect());
    assert_gradcheck("l1", |t, v| t.l1(v[0], v[1]), &[xe.clone(), tgt_l1]);
    let logits = rand_tensor(&[4, 2], &mut rng, -2.0, 2.0);
    assert_gradcheck(
        "softmax_xent",
        |t, v| t.softmax_xent(v[0], &[0, 1, 1, 0], Some(&[1.0, 2.0, 0.5, 1.0])),
        &[logits],
    );
    assert_gradcheck(
        "add",
        |t, v| {
            let s = t.add(v[0], v[1]);
            let q = t.mul(s, s);
            t.sum(q)
        },
        &[xe.clone(), xe.clone()],
    );
    let xp = rand_tensor(&[2, 3, 4, 6], &mut rng, 0.1, 1.0);
    assert_gradcheck(
        "crop+narrow+reshape+pow",
        |t, v| {
            let c = t.crop_rows(v[0], 1, 3);
            let n = t.narrow_batch(c, 1, 1);
            let r = t.reshape(n, &[3, 12]);
            let p = t.pow_scale(r, 27.0, 2.2);
            let q = t.mul(p, p);
            t.sum(q)
        },
        &[xp],
    );
}

struct Dense {
    rows: usize,
    cols: usize,
    a: Vec<f64>,
}

impl LinearOperator<f64> for Dense {
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

#[test]
fn gradcheck_fixed_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let op: Arc<dyn LinearOperator<f64>> =
        Arc::new(Dense { rows: 5, cols: 8, a: (0..40).map(|_| rng.random_range(0.0..1.0)).collect() });
    let x = rand_tensor(&[3, 1, 2, 4], &mut rng, -1.0, 1.0);
    let tg = rand_tensor(&[3, 5], &mut rng, -1.0, 1.0);
    assert_gradcheck(
        "fixed_linear",
        |t, v| {
            let y = t.fixed_linear(v[0], op.clone());
            let c = t.constant(tg.clone());
            t.mse(y, c)
        },
        &[x],
    );
}

#[test]
fn constants_receive_no_gradient() {
    let mut t = Tape::<f64>::new();
    let a = t.param(Tensor::full(&[2], 1.0));
    let c = t.constant(Tensor::full(&[2], 3.0));
    let s = t.mul(a, c);
    let s = t.sum(s);
    t.backward(s);
    assert_eq!(t.grad(a).unwrap(), &[3.0, 3.0]);
    assert!(t.grad(c).is_none());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn adjoint_identity_random_shapes(seed in any::<u64>(), ci in 1usize..4, co in 1usize..4, h in 1usize..5, w in 1usize..6, k in 1usize..6) {
        prop_assert!(check_adjoint(seed, ci, co, h, w, k) < 1e-8);
    }
}
