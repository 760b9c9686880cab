use crate::autodiff::Tensor;
use crate::Real;

/// One labelled training pair, images planar `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<S> {
    pub id: String,
    /// Samples sharing a group never straddle splits.
    pub group: String,
    /// Network input in `[0, 1]`.
    pub input: Vec<S>,
    /// Tonemapped ground truth.
    pub target: Vec<S>,
    /// Sun elevation in radians.
    pub elevation: f64,
}

/// Samples of one split, all of the same size.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<S> {
    width: usize,
    height: usize,
    samples: Vec<Sample<S>>,
}

/// Stacked tensors of a minibatch.
pub struct Batch<S> {
    pub inputs: Tensor<S>,
    pub target_hdr: Tensor<S>,
    /// `[N, 1]`.
    pub target_theta: Tensor<S>,
    /// `[3N, rows]`.
    pub target_render: Tensor<S>,
}

impl<S: Real> Dataset<S> {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, samples: Vec::new() }
    }

    pub fn push(&mut self, sample: Sample<S>) {
        let n = 3 * self.width * self.height;
        assert_eq!(sample.input.len(), n, "input size of {}", sample.id);
        assert_eq!(sample.target.len(), n, "target size of {}", sample.id);
        self.samples.push(sample);
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample<S>] {
        &self.samples
    }

    /// Subset in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self { width: self.width, height: self.height, samples: indices.iter().map(|&i| self.samples[i].clone()).collect() }
    }

    /// Network inputs of the given samples, `[N, 3, H, W]`.
    pub fn inputs(&self, indices: &[usize]) -> Tensor<S> {
        let mut x = Vec::with_capacity(indices.len() * 3 * self.width * self.height);
        for &i in indices {
            x.extend_from_slice(&self.samples[i].input);
        }
        Tensor::new(&[indices.len(), 3, self.height, self.width], x)
    }

    /// Stacks the given samples; `renders[i]` is the target render of sample `i`.
    pub fn batch(&self, indices: &[usize], renders: &[Vec<S>]) -> Batch<S> {
        let n = indices.len();
        let mut t = Vec::with_capacity(n * 3 * self.width * self.height);
        let mut r = Vec::new();
        let mut th = Vec::with_capacity(n);
        for &i in indices {
            let s = &self.samples[i];
            t.extend_from_slice(&s.target);
            r.extend_from_slice(&renders[i]);
            th.push(S::lit(s.elevation));
        }
        let rows = renders.first().map_or(0, |v| v.len() / 3);
        Batch {
            inputs: self.inputs(indices),
            target_hdr: Tensor::new(&[n, 3, self.height, self.width], t),
            target_theta: Tensor::new(&[n, 1], th),
            target_render: Tensor::new(&[3 * n, rows], r),
        }
    }
}
