//! Lat-long panorama data model, tonemapping and exposure.
//!
//! Pixels are stored RGB-interleaved, row-major, row 0 at the zenith.
//! See [`geometry`] for the direction and solid-angle conventions.

pub mod geometry;
pub mod io;

use thiserror::Error;

use crate::real::Real;

pub use geometry::{
    direction_of_pixel, elevation_of_row, pixel_of_direction, solid_angle, center_col,
};

#[derive(Debug, Error, PartialEq)]
pub enum PanoError {
    #[error("panorama must satisfy height * 2 == width, got {width}x{height}")]
    BadDims { width: usize, height: usize },
    #[error("pixel buffer holds {got} values, expected {expected}")]
    BadLength { expected: usize, got: usize },
    #[error("value {value} at index {index} is negative or not finite")]
    Domain { index: usize, value: f64 },
    #[error("invalid tonemap parameters alpha={alpha} gamma={gamma}")]
    BadTonemap { alpha: f64, gamma: f64 },
    #[error("exposure factor must be positive and finite, got {0}")]
    BadExposure(f64),
}

fn check_dims(width: usize, height: usize) -> Result<(), PanoError> {
    if height == 0 || height * 2 != width {
        return Err(PanoError::BadDims { width, height });
    }
    Ok(())
}

/// Linear (or tonemapped) float radiance panorama. Values are finite and
/// non-negative.
#[derive(Clone, Debug, PartialEq)]
pub struct HdrPanorama<S = f32> {
    width: usize,
    height: usize,
    data: Vec<S>,
}

impl<S: Real> HdrPanorama<S> {
    pub fn zeros(width: usize, height: usize) -> Result<Self, PanoError> {
        check_dims(width, height)?;
        Ok(Self { width, height, data: vec![S::zero(); width * height * 3] })
    }

    pub fn from_data(width: usize, height: usize, data: Vec<S>) -> Result<Self, PanoError> {
        check_dims(width, height)?;
        let expected = width * height * 3;
        if data.len() != expected {
            return Err(PanoError::BadLength { expected, got: data.len() });
        }
        if let Some((index, v)) =
            data.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= S::zero()))
        {
            return Err(PanoError::Domain { index, value: v.f64() });
        }
        Ok(Self { width, height, data })
    }

    /// Build from a per-pixel closure returning RGB.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [S; 3],
    ) -> Result<Self, PanoError> {
        check_dims(width, height)?;
        let mut data = Vec::with_capacity(width * height * 3);
        for r in 0..height {
            for c in 0..width {
                data.extend_from_slice(&f(r, c));
            }
        }
        Self::from_data(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> [S; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Overwrites one pixel. Panics on negative or non-finite input.
    pub fn set(&mut self, row: usize, col: usize, rgb: [S; 3]) {
        assert!(rgb.iter().all(|v| v.is_finite() && *v >= S::zero()), "pixel out of domain");
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Applies a per-value map that keeps the result in the valid domain.
    pub fn try_map(&self, f: impl Fn(S) -> S) -> Result<Self, PanoError> {
        Self::from_data(self.width, self.height, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<T: Real>(&self) -> HdrPanorama<T> {
        HdrPanorama {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| T::lit(v.f64())).collect(),
        }
    }

    /// Largest channel value in the image.
    pub fn max_value(&self) -> S {
        self.data.iter().copied().fold(S::zero(), S::max)
    }

    /// Rows `0..height/2`, channel-planar: `[3][rows*width]`.
    pub fn top_hemisphere_planar(&self) -> Vec<S> {
        let rows = self.height / 2;
        let n = rows * self.width;
        let mut out = vec![S::zero(); 3 * n];
        for p in 0..n {
            for ch in 0..3 {
                out[ch * n + p] = self.data[p * 3 + ch];
            }
        }
        out
    }

    /// Channel-planar copy `[3][height*width]`.
    pub fn to_planar(&self) -> Vec<S> {
        let n = self.width * self.height;
        let mut out = vec![S::zero(); 3 * n];
        for p in 0..n {
            for ch in 0..3 {
                out[ch * n + p] = self.data[p * 3 + ch];
            }
        }
        out
    }

    pub fn from_planar(width: usize, height: usize, planar: &[S]) -> Result<Self, PanoError> {
        check_dims(width, height)?;
        let n = width * height;
        if planar.len() != 3 * n {
            return Err(PanoError::BadLength { expected: 3 * n, got: planar.len() });
        }
        let mut data = vec![S::zero(); 3 * n];
        for p in 0..n {
            for ch in 0..3 {
                data[p * 3 + ch] = planar[ch * n + p];
            }
        }
        Self::from_data(width, height, data)
    }

    pub fn rotate_azimuth(&self, shift: isize) -> Self {
        Self { width: self.width, height: self.height, data: rotate_cols(&self.data, self.width, shift) }
    }

    pub fn hflip(&self) -> Self {
        Self { width: self.width, height: self.height, data: flip_cols(&self.data, self.width) }
    }
}

/// 8-bit lat-long panorama.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LdrPanorama {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl LdrPanorama {
    pub fn from_data(width: usize, height: usize, data: Vec<u8>) -> Result<Self, PanoError> {
        check_dims(width, height)?;
        let expected = width * height * 3;
        if data.len() != expected {
            return Err(PanoError::BadLength { expected, got: data.len() });
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [u8; 3],
    ) -> Result<Self, PanoError> {
        check_dims(width, height)?;
        let mut data = Vec::with_capacity(width * height * 3);
        for r in 0..height {
            for c in 0..width {
                data.extend_from_slice(&f(r, c));
            }
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn rotate_azimuth(&self, shift: isize) -> Self {
        Self { width: self.width, height: self.height, data: rotate_cols(&self.data, self.width, shift) }
    }

    pub fn hflip(&self) -> Self {
        Self { width: self.width, height: self.height, data: flip_cols(&self.data, self.width) }
    }

    /// Codes divided by 255, channel-planar `[3][height*width]`.
    pub fn normalized_planar<S: Real>(&self) -> Vec<S> {
        let n = self.width * self.height;
        let scale = S::lit(1.0 / 255.0);
        let mut out = vec![S::zero(); 3 * n];
        for p in 0..n {
            for ch in 0..3 {
                out[ch * n + p] = S::lit(self.data[p * 3 + ch] as f64) * scale;
            }
        }
        out
    }
}

/// Circular column shift: content at column `c` moves to `(c + shift) mod width`.
fn rotate_cols<T: Copy>(data: &[T], width: usize, shift: isize) -> Vec<T> {
    let s = shift.rem_euclid(width as isize) as usize;
    let mut out = data.to_vec();
    for (src, dst) in data.chunks_exact(width * 3).zip(out.chunks_exact_mut(width * 3)) {
        for c in 0..width {
            let d = (c + s) % width;
            dst[d * 3..d * 3 + 3].copy_from_slice(&src[c * 3..c * 3 + 3]);
        }
    }
    out
}

fn flip_cols<T: Copy>(data: &[T], width: usize) -> Vec<T> {
    let mut out = data.to_vec();
    for (src, dst) in data.chunks_exact(width * 3).zip(out.chunks_exact_mut(width * 3)) {
        for c in 0..width {
            let d = width - 1 - c;
            dst[d * 3..d * 3 + 3].copy_from_slice(&src[c * 3..c * 3 + 3]);
        }
    }
    out
}

/// `t = alpha * x^(1/gamma)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TonemapParams {
    alpha: f64,
    gamma: f64,
}

impl Default for TonemapParams {
    /// `alpha = 1/30`, `gamma = 2.2`: a bright sun lands near 1.
    fn default() -> Self {
        Self { alpha: 1.0 / 30.0, gamma: 2.2 }
    }
}

impl TonemapParams {
    pub fn new(alpha: f64, gamma: f64) -> Result<Self, PanoError> {
        if !(alpha > 0.0 && alpha.is_finite() && gamma >= 1.0 && gamma.is_finite()) {
            return Err(PanoError::BadTonemap { alpha, gamma });
        }
        Ok(Self { alpha, gamma })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    #[inline]
    pub fn forward<S: Real>(&self, x: S) -> Result<S, PanoError> {
        if !(x.is_finite() && x >= S::zero()) {
            return Err(PanoError::Domain { index: 0, value: x.f64() });
        }
        Ok(S::lit(self.alpha) * x.powf(S::lit(1.0 / self.gamma)))
    }

    #[inline]
    pub fn inverse<S: Real>(&self, q: S) -> Result<S, PanoError> {
        if !(q.is_finite() && q >= S::zero()) {
            return Err(PanoError::Domain { index: 0, value: q.f64() });
        }
        Ok((q / S::lit(self.alpha)).powf(S::lit(self.gamma)))
    }

    /// Tonemaps a raw slice in place; fails on the first out-of-domain value.
    pub fn forward_slice<S: Real>(&self, xs: &mut [S]) -> Result<(), PanoError> {
        for (i, x) in xs.iter_mut().enumerate() {
            *x = self.forward(*x).map_err(|_| PanoError::Domain { index: i, value: x.f64() })?;
        }
        Ok(())
    }

    pub fn inverse_slice<S: Real>(&self, xs: &mut [S]) -> Result<(), PanoError> {
        for (i, x) in xs.iter_mut().enumerate() {
            *x = self.inverse(*x).map_err(|_| PanoError::Domain { index: i, value: x.f64() })?;
        }
        Ok(())
    }
}

/// Tonemapped copy of a linear panorama.
pub fn tonemap<S: Real>(p: &HdrPanorama<S>, tp: &TonemapParams) -> HdrPanorama<S> {
    let mut data = p.data.clone();
    tp.forward_slice(&mut data).expect("panorama values are validated non-negative");
    HdrPanorama { width: p.width, height: p.height, data }
}

/// Linear radiance from a tonemapped panorama.
pub fn inverse_tonemap<S: Real>(q: &HdrPanorama<S>, tp: &TonemapParams) -> Result<HdrPanorama<S>, PanoError> {
    let mut data = q.data.clone();
    tp.inverse_slice(&mut data)?;
    HdrPanorama::from_data(q.width, q.height, data)
}

pub fn expose<S: Real>(p: &HdrPanorama<S>, factor: f64) -> Result<HdrPanorama<S>, PanoError> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(PanoError::BadExposure(factor));
    }
    let f = S::lit(factor);
    p.try_map(|v| v * f)
}

/// Clamp to `[0,1]`, scale by 255, round half away from zero. NaN maps to 0.
#[inline]
pub fn quantize_value(x: f64) -> u8 {
    if x.is_nan() {
        return 0;
    }
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn quantize_ldr<S: Real>(p: &HdrPanorama<S>) -> LdrPanorama {
    LdrPanorama {
        width: p.width,
        height: p.height,
        data: p.data.iter().map(|v| quantize_value(v.f64())).collect(),
    }
}
