//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order; [`Tape::backward`] walks it once in reverse.
//! Storage is `S`; reductions (means, batch statistics, bias gradients)
//! accumulate in `f64`.

pub mod conv;
pub mod gradcheck;
pub mod suite;

use std::sync::Arc;

use crate::Real;
use conv::{col2im_acc, im2col, ConvGeom};

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Real> Tensor<S> {
    /// Panics if `data.len()` does not match the shape.
    pub fn new(shape: &[usize], data: Vec<S>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor shape {shape:?} vs {} values", data.len());
        Self { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: S) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len(), "reshape to {shape:?}");
        self.shape = shape.to_vec();
        self
    }

    pub fn cast<T: Real>(&self) -> Tensor<T> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| T::lit(v.f64())).collect() }
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.data.len(), 1, "item() of a tensor with {} values", self.data.len());
        self.data[0]
    }
}

/// Fixed matrix applied to batches of vectors, e.g. light transport.
pub trait LinearOperator<S>: Send + Sync {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    /// `out[k] = A · x[k]` for `m` contiguous vectors.
    fn apply_batch(&self, x: &[S], m: usize, out: &mut [S]);
    /// `out[k] += Aᵀ · g[k]` for `m` contiguous vectors.
    fn adjoint_batch_acc(&self, g: &[S], m: usize, out: &mut [S]);
}

impl<S: Real> LinearOperator<S> for crate::transport::TransportMatrix<S> {
    fn in_dim(&self) -> usize {
        self.cols()
    }

    fn out_dim(&self) -> usize {
        self.rows()
    }

    fn apply_batch(&self, x: &[S], m: usize, out: &mut [S]) {
        self.render_batch(x, m, out)
    }

    fn adjoint_batch_acc(&self, g: &[S], m: usize, out: &mut [S]) {
        self.render_backward_batch(g, m, out)
    }
}

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics from a training-mode normalisation, per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the estimator folded into running statistics.
    pub var: Vec<f64>,
}

enum Op<S> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, inv_std: Vec<f64>, batch_stats: bool },
    Elu { x: Var },
    AddScalar { x: Var },
    Scale { x: Var, c: S },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Linear { x: Var, w: Var, b: Var },
    L1 { x: Var, t: Var },
    Mse { x: Var, t: Var },
    SoftmaxXent { logits: Var, labels: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
    GradReverse { x: Var, lambda: S },
    Reshape { x: Var },
    CropRows { x: Var, start: usize },
    NarrowBatch { x: Var, start: usize },
    Sum { x: Var },
    PowScale { x: Var, scale: f64, exponent: f64 },
    Fixed { x: Var, op: Arc<dyn LinearOperator<S>> },
}

struct Node<S> {
    value: Tensor<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
    op: Op<S>,
}

/// Recorded computation. Not shared across threads.
pub struct Tape<S = f32> {
    nodes: Vec<Node<S>>,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Dimensions `(N, C, H, W)` of a 4-d tensor; `(N, F)` counts as `(N, F, 1, 1)`.
fn nchw(shape: &[usize]) -> (usize, usize, usize, usize) {
    match *shape {
        [n, c, h, w] => (n, c, h, w),
        [n, f] => (n, f, 1, 1),
        _ => panic!("expected a 2-d or 4-d tensor, got {shape:?}"),
    }
}

fn elu<S: Real>(x: S) -> S {
    if x > S::zero() {
        x
    } else {
        x.exp_m1()
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input.
    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.nodes.push(Node { value: t, grad: None, requires_grad: true, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.nodes.push(Node { value: t, grad: None, requires_grad: false, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Gradient after [`backward`](Self::backward); `None` when no path reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<S>> {
        self.nodes[v.0].grad.take()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let (n, c, h, wd) = nchw(self.shape(x));
        let ws = self.shape(w).to_vec();
        assert!(ws.len() == 4 && ws[1] == c && ws[2] == ws[3], "conv weight {ws:?} for input channels {c}");
        let co = ws[0];
        assert_eq!(self.shape(b), [co], "conv bias");
        let geom = ConvGeom::same(c, h, wd, ws[2], stride);
        let (kd, p) = (geom.patch_len(), geom.out_len());
        let mut out = vec![S::zero(); n * co * p];
        let mut cols = vec![S::zero(); kd * p];
        let (xv, wv, bv) = (&self.value(x).data, &self.value(w).data, &self.value(b).data);
        for s in 0..n {
            im2col(&geom, &xv[s * geom.in_len()..(s + 1) * geom.in_len()], &mut cols);
            let y = &mut out[s * co * p..(s + 1) * co * p];
            for (o, chunk) in y.chunks_mut(p).enumerate() {
                chunk.fill(bv[o]);
            }
            S::gemm(co, kd, p, S::one(), (wv, kd as isize, 1), (&cols, p as isize, 1), S::one(), (y, p as isize, 1));
        }
        let value = Tensor::new(&[n, co, geom.out_h, geom.out_w], out);
        self.push(value, Op::Conv2d { x, w, b, geom }, &[x, w, b])
    }

    /// Adjoint of a same-padded strided convolution; weight is `[C_in, C_out, k, k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let (n, ci, h, wd) = nchw(self.shape(x));
        let ws = self.shape(w).to_vec();
        assert!(ws.len() == 4 && ws[0] == ci && ws[2] == ws[3], "deconv weight {ws:?} for input channels {ci}");
        let co = ws[1];
        assert_eq!(self.shape(b), [co], "deconv bias");
        let geom = ConvGeom::same(co, h * stride, wd * stride, ws[2], stride);
        debug_assert_eq!((geom.out_h, geom.out_w), (h, wd));
        let (kd, p) = (geom.patch_len(), geom.out_len());
        let mut out = vec![S::zero(); n * geom.in_len()];
        let mut cols = vec![S::zero(); kd * p];
        let (xv, wv, bv) = (&self.value(x).data, &self.value(w).data, &self.value(b).data);
        let plane = geom.in_h * geom.in_w;
        for s in 0..n {
            S::gemm(
                kd,
                ci,
                p,
                S::one(),
                (wv, 1, kd as isize),
                (&xv[s * ci * p..(s + 1) * ci * p], p as isize, 1),
                S::zero(),
                (&mut cols, p as isize, 1),
            );
            let y = &mut out[s * geom.in_len()..(s + 1) * geom.in_len()];
            for (o, chunk) in y.chunks_mut(plane).enumerate() {
                chunk.fill(bv[o]);
            }
            col2im_acc(&geom, &cols, y);
        }
        let value = Tensor::new(&[n, co, geom.in_h, geom.in_w], out);
        self.push(value, Op::ConvTranspose2d { x, w, b, geom }, &[x, w, b])
    }

    /// Normalises with batch statistics; the caller folds the returned
    /// statistics into its running estimates.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, BatchStats) {
        let (n, c, h, w) = nchw(self.shape(x));
        assert_eq!(self.shape(gamma), [c]);
        assert_eq!(self.shape(beta), [c]);
        let hw = h * w;
        let m = (n * hw) as f64;
        let xv = &self.value(x).data;
        let (g, bt) = (&self.value(gamma).data, &self.value(beta).data);
        let mut mean = vec![0f64; c];
        let mut var = vec![0f64; c];
        for s in 0..n {
            for ch in 0..c {
                mean[ch] += xv[(s * c + ch) * hw..][..hw].iter().map(|v| v.f64()).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for s in 0..n {
            for ch in 0..c {
                var[ch] += xv[(s * c + ch) * hw..][..hw].iter().map(|v| (v.f64() - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / m + eps).sqrt()).collect();
        let mut xhat = vec![S::zero(); xv.len()];
        let mut out = vec![S::zero(); xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                let (gc, bc) = (g[ch].f64(), bt[ch].f64());
                for i in base..base + hw {
                    let xh = (xv[i].f64() - mean[ch]) * inv_std[ch];
                    xhat[i] = S::lit(xh);
                    out[i] = S::lit(gc * xh + bc);
                }
            }
        }
        let unbiased = var.iter().map(|v| if m > 1.0 { v / (m - 1.0) } else { 0.0 }).collect();
        let value = Tensor::new(self.shape(x), out);
        let stats = BatchStats { mean, var: unbiased };
        (self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats: true }, &[x, gamma, beta]), stats)
    }

    /// Normalises with fixed running statistics.
    pub fn batchnorm_infer(&mut self, x: Var, gamma: Var, beta: Var, mean: &[S], var: &[S], eps: f64) -> Var {
        let (n, c, h, w) = nchw(self.shape(x));
        assert_eq!(self.shape(gamma), [c]);
        assert_eq!(self.shape(beta), [c]);
        assert!(mean.len() == c && var.len() == c, "running statistics length");
        let hw = h * w;
        let xv = &self.value(x).data;
        let (g, bt) = (&self.value(gamma).data, &self.value(beta).data);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v.f64() + eps).sqrt()).collect();
        let mut xhat = vec![S::zero(); xv.len()];
        let mut out = vec![S::zero(); xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                let (gc, bc, mu) = (g[ch].f64(), bt[ch].f64(), mean[ch].f64());
                for i in base..base + hw {
                    let xh = (xv[i].f64() - mu) * inv_std[ch];
                    xhat[i] = S::lit(xh);
                    out[i] = S::lit(gc * xh + bc);
                }
            }
        }
        let value = Tensor::new(self.shape(x), out);
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats: false };
        self.push(value, op, &[x, gamma, beta])
    }

    /// ELU with unit scale: `x` for `x > 0`, `eˣ − 1` otherwise.
    pub fn elu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(&v.shape, v.data.iter().map(|&a| elu(a)).collect());
        self.push(out, Op::Elu { x }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: S) -> Var {
        let v = self.value(x);
        let out = Tensor::new(&v.shape, v.data.iter().map(|&a| a + c).collect());
        self.push(out, Op::AddScalar { x }, &[x])
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let v = self.value(x);
        let out = Tensor::new(&v.shape, v.data.iter().map(|&a| a * c).collect());
        self.push(out, Op::Scale { x, c }, &[x])
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let (va, vb) = (self.value(a), self.value(b));
        let out = Tensor::new(&va.shape, va.data.iter().zip(&vb.data).map(|(x, y)| *x + *y).collect());
        self.push(out, Op::Add { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        let (va, vb) = (self.value(a), self.value(b));
        let out = Tensor::new(&va.shape, va.data.iter().zip(&vb.data).map(|(x, y)| *x * *y).collect());
        self.push(out, Op::Mul { a, b }, &[a, b])
    }

    /// `x · Wᵀ + b` with `x: [N, F]`, `W: [O, F]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 2, "linear input must be [N, F], got {xs:?}");
        let (n, f) = (xs[0], xs[1]);
        let ws = self.shape(w).to_vec();
        assert!(ws.len() == 2 && ws[1] == f, "linear weight {ws:?} for {f} features");
        let o = ws[0];
        assert_eq!(self.shape(b), [o], "linear bias");
        let mut out = vec![S::zero(); n * o];
        let bv = &self.value(b).data;
        for row in out.chunks_mut(o) {
            row.copy_from_slice(bv);
        }
        S::gemm(
            n,
            f,
            o,
            S::one(),
            (&self.value(x).data, f as isize, 1),
            (&self.value(w).data, 1, f as isize),
            S::one(),
            (&mut out, o as isize, 1),
        );
        self.push(Tensor::new(&[n, o], out), Op::Linear { x, w, b }, &[x, w, b])
    }

    /// Mean absolute difference.
    pub fn l1(&mut self, x: Var, t: Var) -> Var {
        assert_eq!(self.shape(x), self.shape(t), "l1 shapes");
        let (a, b) = (&self.value(x).data, &self.value(t).data);
        let s: f64 = a.iter().zip(b).map(|(p, q)| (p.f64() - q.f64()).abs()).sum();
        let v = S::lit(s / a.len() as f64);
        self.push(Tensor::scalar(v), Op::L1 { x, t }, &[x, t])
    }

    /// Mean squared difference.
    pub fn mse(&mut self, x: Var, t: Var) -> Var {
        assert_eq!(self.shape(x), self.shape(t), "mse shapes");
        let (a, b) = (&self.value(x).data, &self.value(t).data);
        let s: f64 = a.iter().zip(b).map(|(p, q)| (p.f64() - q.f64()).powi(2)).sum();
        let v = S::lit(s / a.len() as f64);
        self.push(Tensor::scalar(v), Op::Mse { x, t }, &[x, t])
    }

    /// Weighted mean over rows of softmax cross-entropy; `logits: [N, K]`.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize], weights: Option<&[f64]>) -> Var {
        let s = self.shape(logits).to_vec();
        assert_eq!(s.len(), 2, "logits must be [N, K]");
        let (n, k) = (s[0], s[1]);
        assert_eq!(labels.len(), n, "one label per row");
        assert!(labels.iter().all(|&l| l < k), "label out of range");
        let weights = weights.map(|w| w.to_vec()).unwrap_or_else(|| vec![1.0; n]);
        assert_eq!(weights.len(), n);
        let wsum: f64 = weights.iter().sum();
        assert!(wsum > 0.0, "weights must not all be zero");
        let lv = &self.value(logits).data;
        let mut probs = vec![0f64; n * k];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &lv[r * k..(r + 1) * k];
            let mx = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v.f64() - mx).exp()).sum();
            for j in 0..k {
                probs[r * k + j] = (row[j].f64() - mx).exp() / z;
            }
            loss += weights[r] * (z.ln() + mx - row[labels[r]].f64());
        }
        let op = Op::SoftmaxXent { logits, labels: labels.to_vec(), weights, probs };
        self.push(Tensor::scalar(S::lit(loss / wsum)), op, &[logits])
    }

    /// Identity forward; multiplies the gradient by `−lambda` on the way back.
    pub fn gradient_reversal(&mut self, x: Var, lambda: S) -> Var {
        let out = self.value(x).clone();
        self.push(out, Op::GradReverse { x, lambda }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshaped(shape);
        self.push(out, Op::Reshape { x }, &[x])
    }

    /// Rows `start..end` of every channel of `[N, C, H, W]`.
    pub fn crop_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let (n, c, h, w) = nchw(self.shape(x));
        assert!(start < end && end <= h, "crop rows {start}..{end} of {h}");
        let v = &self.value(x).data;
        let mut out = Vec::with_capacity(n * c * (end - start) * w);
        for plane in v.chunks(h * w) {
            out.extend_from_slice(&plane[start * w..end * w]);
        }
        self.push(Tensor::new(&[n, c, end - start, w], out), Op::CropRows { x, start }, &[x])
    }

    /// Samples `start..start+len` along the leading axis.
    pub fn narrow_batch(&mut self, x: Var, start: usize, len: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(start + len <= shape[0], "narrow {start}+{len} of {}", shape[0]);
        let per = shape[1..].iter().product::<usize>();
        let out = self.value(x).data[start * per..(start + len) * per].to_vec();
        let mut s = shape.clone();
        s[0] = len;
        self.push(Tensor::new(&s, out), Op::NarrowBatch { x, start }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data.iter().map(|v| v.f64()).sum();
        self.push(Tensor::scalar(S::lit(s)), Op::Sum { x }, &[x])
    }

    /// `scale · x^exponent` for `x ≥ 0`, e.g. the inverse tonemap curve.
    pub fn pow_scale(&mut self, x: Var, scale: f64, exponent: f64) -> Var {
        let v = self.value(x);
        let out = v.data.iter().map(|a| S::lit(scale * a.f64().max(0.0).powf(exponent))).collect();
        let out = Tensor::new(&v.shape, out);
        self.push(out, Op::PowScale { x, scale, exponent }, &[x])
    }

    /// Applies a fixed operator to each of the `numel / in_dim` vectors of `x`.
    pub fn fixed_linear(&mut self, x: Var, op: Arc<dyn LinearOperator<S>>) -> Var {
        let v = &self.value(x).data;
        assert_eq!(v.len() % op.in_dim(), 0, "operator input length");
        let m = v.len() / op.in_dim();
        let mut out = vec![S::zero(); m * op.out_dim()];
        op.apply_batch(v, m, &mut out);
        let value = Tensor::new(&[m, op.out_dim()], out);
        self.push(value, Op::Fixed { x, op }, &[x])
    }

    /// Populates gradients of every node that `loss` depends on.
    ///
    /// Previous gradients are discarded, so repeated calls are idempotent.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return;
        }
        self.nodes[loss.0].grad = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let Some(g) = node.grad.take() else { continue };
            backward_node(before, &node.op, &node.value, &g);
            node.grad = Some(g);
        }
    }
}

/// Gradient buffer of an input node, allocated on first use; `None` when
/// the input is not differentiable.
fn grad_buf<S: Real>(nodes: &mut [Node<S>], v: Var) -> Option<&mut Vec<S>> {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let n = node.value.numel();
    Some(node.grad.get_or_insert_with(|| vec![S::zero(); n]))
}

fn acc_elementwise<S: Real>(nodes: &mut [Node<S>], v: Var, g: &[S], f: impl Fn(usize, S) -> S) {
    if let Some(buf) = grad_buf(nodes, v) {
        for (i, (b, gi)) in buf.iter_mut().zip(g).enumerate() {
            *b += f(i, *gi);
        }
    }
}

fn backward_node<S: Real>(nodes: &mut [Node<S>], op: &Op<S>, out: &Tensor<S>, g: &[S]) {
    match op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, geom } => {
            let (kd, p) = (geom.patch_len(), geom.out_len());
            let n = nodes[x.0].value.shape[0];
            let co = nodes[w.0].value.shape[0];
            let mut cols = vec![S::zero(); kd * p];
            let mut dcols = vec![S::zero(); kd * p];
            if let Some(db) = grad_buf(nodes, *b) {
                for (o, d) in db.iter_mut().enumerate() {
                    let s: f64 = (0..n).map(|s| g[(s * co + o) * p..][..p].iter().map(|v| v.f64()).sum::<f64>()).sum();
                    *d += S::lit(s);
                }
            }
            let xv = nodes[x.0].value.data.clone();
            let wv = nodes[w.0].value.data.clone();
            let need_w = nodes[w.0].requires_grad;
            let need_x = nodes[x.0].requires_grad;
            for s in 0..n {
                let gy = &g[s * co * p..(s + 1) * co * p];
                if need_w {
                    im2col(geom, &xv[s * geom.in_len()..(s + 1) * geom.in_len()], &mut cols);
                    let dw = grad_buf(nodes, *w).unwrap();
                    S::gemm(co, p, kd, S::one(), (gy, p as isize, 1), (&cols, 1, p as isize), S::one(), (dw, kd as isize, 1));
                }
                if need_x {
                    S::gemm(kd, co, p, S::one(), (&wv, 1, kd as isize), (gy, p as isize, 1), S::zero(), (&mut dcols, p as isize, 1));
                    let dx = grad_buf(nodes, *x).unwrap();
                    col2im_acc(geom, &dcols, &mut dx[s * geom.in_len()..(s + 1) * geom.in_len()]);
                }
            }
        }
        Op::ConvTranspose2d { x, w, b, geom } => {
            let (kd, p) = (geom.patch_len(), geom.out_len());
            let n = nodes[x.0].value.shape[0];
            let ci = nodes[w.0].value.shape[0];
            let co = geom.channels;
            let plane = geom.in_h * geom.in_w;
            if let Some(db) = grad_buf(nodes, *b) {
                for (o, d) in db.iter_mut().enumerate() {
                    let s: f64 = (0..n).map(|s| g[(s * co + o) * plane..][..plane].iter().map(|v| v.f64()).sum::<f64>()).sum();
                    *d += S::lit(s);
                }
            }
            let xv = nodes[x.0].value.data.clone();
            let wv = nodes[w.0].value.data.clone();
            let need_w = nodes[w.0].requires_grad;
            let need_x = nodes[x.0].requires_grad;
            let mut cols = vec![S::zero(); kd * p];
            for s in 0..n {
                if !(need_w || need_x) {
                    break;
                }
                im2col(geom, &g[s * geom.in_len()..(s + 1) * geom.in_len()], &mut cols);
                if need_x {
                    let dx = &mut grad_buf(nodes, *x).unwrap()[s * ci * p..(s + 1) * ci * p];
                    S::gemm(ci, kd, p, S::one(), (&wv, kd as isize, 1), (&cols, p as isize, 1), S::one(), (dx, p as isize, 1));
                }
                if need_w {
                    let dw = grad_buf(nodes, *w).unwrap();
                    let xs = &xv[s * ci * p..(s + 1) * ci * p];
                    S::gemm(ci, p, kd, S::one(), (xs, p as isize, 1), (&cols, 1, p as isize), S::one(), (dw, kd as isize, 1));
                }
            }
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
            let (n, c, h, w) = nchw(&nodes[x.0].value.shape);
            let hw = h * w;
            let m = (n * hw) as f64;
            let mut sum_g = vec![0f64; c];
            let mut sum_gx = vec![0f64; c];
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * hw;
                    for i in base..base + hw {
                        sum_g[ch] += g[i].f64();
                        sum_gx[ch] += g[i].f64() * xhat[i].f64();
                    }
                }
            }
            if let Some(db) = grad_buf(nodes, *beta) {
                for ch in 0..c {
                    db[ch] += S::lit(sum_g[ch]);
                }
            }
            if let Some(dg) = grad_buf(nodes, *gamma) {
                for ch in 0..c {
                    dg[ch] += S::lit(sum_gx[ch]);
                }
            }
            let gam: Vec<f64> = nodes[gamma.0].value.data.iter().map(|v| v.f64()).collect();
            if let Some(dx) = grad_buf(nodes, *x) {
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        let k = gam[ch] * inv_std[ch];
                        for i in base..base + hw {
                            let gi = g[i].f64();
                            // fixed statistics contribute no correction terms
                            let v = if *batch_stats {
                                k * (gi - sum_g[ch] / m - xhat[i].f64() * sum_gx[ch] / m)
                            } else {
                                k * gi
                            };
                            dx[i] += S::lit(v);
                        }
                    }
                }
            }
        }
        Op::Elu { x } => {
            let y = &out.data;
            acc_elementwise(nodes, *x, g, |i, gi| if y[i] > S::zero() { gi } else { gi * (y[i] + S::one()) });
        }
        Op::AddScalar { x } | Op::Reshape { x } => acc_elementwise(nodes, *x, g, |_, gi| gi),
        Op::Scale { x, c } => acc_elementwise(nodes, *x, g, |_, gi| gi * *c),
        Op::Add { a, b } => {
            acc_elementwise(nodes, *a, g, |_, gi| gi);
            acc_elementwise(nodes, *b, g, |_, gi| gi);
        }
        Op::Mul { a, b } => {
            let va = nodes[a.0].value.data.clone();
            let vb = nodes[b.0].value.data.clone();
            acc_elementwise(nodes, *a, g, |i, gi| gi * vb[i]);
            acc_elementwise(nodes, *b, g, |i, gi| gi * va[i]);
        }
        Op::Linear { x, w, b } => {
            let (n, f) = (nodes[x.0].value.shape[0], nodes[x.0].value.shape[1]);
            let o = nodes[w.0].value.shape[0];
            if let Some(db) = grad_buf(nodes, *b) {
                for (j, d) in db.iter_mut().enumerate() {
                    *d += S::lit((0..n).map(|r| g[r * o + j].f64()).sum());
                }
            }
            if nodes[x.0].requires_grad {
                let wv = nodes[w.0].value.data.clone();
                let dx = grad_buf(nodes, *x).unwrap();
                S::gemm(n, o, f, S::one(), (g, o as isize, 1), (&wv, f as isize, 1), S::one(), (dx, f as isize, 1));
            }
            if nodes[w.0].requires_grad {
                let xv = nodes[x.0].value.data.clone();
                let dw = grad_buf(nodes, *w).unwrap();
                S::gemm(o, n, f, S::one(), (g, 1, o as isize), (&xv, f as isize, 1), S::one(), (dw, f as isize, 1));
            }
        }
        Op::L1 { x, t } => {
            let n = nodes[x.0].value.numel() as f64;
            let k = g[0].f64() / n;
            let d: Vec<S> = nodes[x.0]
                .value
                .data
                .iter()
                .zip(&nodes[t.0].value.data)
                .map(|(a, b)| S::lit(k * sign(a.f64() - b.f64())))
                .collect();
            acc_elementwise(nodes, *x, &d, |_, v| v);
            acc_elementwise(nodes, *t, &d, |_, v| -v);
        }
        Op::Mse { x, t } => {
            let n = nodes[x.0].value.numel() as f64;
            let k = 2.0 * g[0].f64() / n;
            let d: Vec<S> = nodes[x.0]
                .value
                .data
                .iter()
                .zip(&nodes[t.0].value.data)
                .map(|(a, b)| S::lit(k * (a.f64() - b.f64())))
                .collect();
            acc_elementwise(nodes, *x, &d, |_, v| v);
            acc_elementwise(nodes, *t, &d, |_, v| -v);
        }
        Op::SoftmaxXent { logits, labels, weights, probs } => {
            let k = nodes[logits.0].value.shape[1];
            let wsum: f64 = weights.iter().sum();
            let g0 = g[0].f64();
            if let Some(dl) = grad_buf(nodes, *logits) {
                for (r, &label) in labels.iter().enumerate() {
                    let wr = g0 * weights[r] / wsum;
                    for j in 0..k {
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        dl[r * k + j] += S::lit(wr * (probs[r * k + j] - onehot));
                    }
                }
            }
        }
        Op::GradReverse { x, lambda } => {
            let c = -*lambda;
            acc_elementwise(nodes, *x, g, |_, gi| gi * c);
        }
        Op::CropRows { x, start } => {
            let (_, _, h, w) = nchw(&nodes[x.0].value.shape);
            let rows = out.shape[2];
            if let Some(dx) = grad_buf(nodes, *x) {
                for (plane, gp) in dx.chunks_mut(h * w).zip(g.chunks(rows * w)) {
                    for (d, v) in plane[start * w..(start + rows) * w].iter_mut().zip(gp) {
                        *d += *v;
                    }
                }
            }
        }
        Op::NarrowBatch { x, start } => {
            let per: usize = out.shape[1..].iter().product();
            if let Some(dx) = grad_buf(nodes, *x) {
                for (d, v) in dx[start * per..].iter_mut().zip(g) {
                    *d += *v;
                }
            }
        }
        Op::Sum { x } => {
            let g0 = g[0];
            acc_elementwise(nodes, *x, &vec![g0; nodes[x.0].value.numel()], |_, v| v);
        }
        Op::PowScale { x, scale, exponent } => {
            let xv: Vec<f64> = nodes[x.0].value.data.iter().map(|v| v.f64()).collect();
            let (s, e) = (*scale, *exponent);
            acc_elementwise(nodes, *x, g, |i, gi| {
                let d = if xv[i] > 0.0 { s * e * xv[i].powf(e - 1.0) } else { 0.0 };
                S::lit(gi.f64() * d)
            });
        }
        Op::Fixed { x, op } => {
            let m = g.len() / op.out_dim();
            if let Some(dx) = grad_buf(nodes, *x) {
                op.adjoint_batch_acc(g, m, dx);
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests;
