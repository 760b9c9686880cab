//! im2col / col2im kernels shared by convolution and its transpose.

use crate::Real;

/// Geometry of a strided convolution with "same" padding.
///
/// Output extent is `ceil(in / stride)`; the total padding
/// `max((out − 1)·stride + k − in, 0)` is split with the smaller half on
/// the top/left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn same(channels: usize, in_h: usize, in_w: usize, kernel: usize, stride: usize) -> Self {
        assert!(kernel >= 1 && stride >= 1, "kernel and stride must be positive");
        let out_h = in_h.div_ceil(stride);
        let out_w = in_w.div_ceil(stride);
        let pad_h = ((out_h - 1) * stride + kernel).saturating_sub(in_h);
        let pad_w = ((out_w - 1) * stride + kernel).saturating_sub(in_w);
        Self { channels, in_h, in_w, kernel, stride, pad_top: pad_h / 2, pad_left: pad_w / 2, out_h, out_w }
    }

    /// Rows of the column matrix: `channels · k · k`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_len(&self) -> usize {
        self.channels * self.in_h * self.in_w
    }
}

/// Unfolds one `[C, H, W]` image into a `[C·k·k, out_h·out_w]` matrix.
pub fn im2col<S: Real>(g: &ConvGeom, x: &[S], cols: &mut [S]) {
    debug_assert_eq!(x.len(), g.in_len());
    debug_assert_eq!(cols.len(), g.patch_len() * g.out_len());
    let k = g.kernel;
    let p = g.out_len();
    for c in 0..g.channels {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((c * k + ki) * k + kj) * p..][..p];
                for oh in 0..g.out_h {
                    let out = &mut row[oh * g.out_w..(oh + 1) * g.out_w];
                    let ih = (oh * g.stride + ki) as isize - g.pad_top as isize;
                    if ih < 0 || ih >= g.in_h as isize {
                        out.fill(S::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                    for (ow, o) in out.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad_left as isize;
                        *o = if iw < 0 || iw >= g.in_w as isize { S::zero() } else { src[iw as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
pub fn col2im_acc<S: Real>(g: &ConvGeom, cols: &[S], x: &mut [S]) {
    debug_assert_eq!(x.len(), g.in_len());
    debug_assert_eq!(cols.len(), g.patch_len() * g.out_len());
    let k = g.kernel;
    let p = g.out_len();
    for c in 0..g.channels {
        let plane = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((c * k + ki) * k + kj) * p..][..p];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad_top as isize;
                    if ih < 0 || ih >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                    for (ow, v) in row[oh * g.out_w..(oh + 1) * g.out_w].iter().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad_left as isize;
                        if iw >= 0 && iw < g.in_w as isize {
                            dst[iw as usize] += *v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_halves_even_sizes() {
        for (h, k) in [(64, 5), (32, 5), (16, 3), (8, 3), (7, 3)] {
            let g = ConvGeom::same(1, h, 2 * h, k, 2);
            assert_eq!(g.out_h, h.div_ceil(2));
            assert_eq!(g.out_w, h);
        }
        let g = ConvGeom::same(1, 64, 128, 5, 2);
        assert_eq!((g.pad_top, g.pad_left), (1, 1));
        let g = ConvGeom::same(1, 9, 9, 3, 1);
        assert_eq!((g.out_h, g.pad_top), (9, 1));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::same(2, 7, 6, 3, 2);
        let x: Vec<f64> = (0..g.in_len()).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let y: Vec<f64> = (0..g.patch_len() * g.out_len()).map(|i| ((i * 13 % 7) as f64) - 3.0).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&g, &x, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im_acc(&g, &y, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
