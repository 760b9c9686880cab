//! Lambertian light transport of a fixed scene under a sky panorama.
//!
//! Row `i` of the matrix is one render pixel, column `j` one pixel of the
//! top hemisphere of the panorama (row-major over `rows 0..h/2`). Entry
//! `ρ/π · max(0, n·d_j) · ω_j · V(x, d_j)`; single bounce, no
//! interreflections. The same matrix serves every color channel.

pub mod scene;

use std::fs::File;
use std::io::{self, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::pano::io::atomic_write;
use crate::pano::{direction_of_pixel, solid_angle, HdrPanorama};
use crate::Real;
pub use scene::{Scene, SceneSpec, Surface};

pub const CACHE_MAGIC: [u8; 8] = *b"SKYTRANS";
pub const CACHE_VERSION: u32 = 1;
/// Fixed header size in bytes of the cache file.
pub const CACHE_HEADER_LEN: usize = 8 + 4 + 32 + 6 * 4;

const SHADOW_OFFSET: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("degenerate scene: {0}")]
    DegenerateScene(String),
    #[error("unsupported panorama size {width}x{height}: need width = 2*height, height even")]
    BadDims { width: usize, height: usize },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: malformed transport cache: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}: cache was built for a different scene or panorama size")]
    HashMismatch { path: PathBuf },
}

/// Dense `rows x cols` transport matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportMatrix<S = f32> {
    render_width: usize,
    render_height: usize,
    pano_width: usize,
    pano_height: usize,
    scene_hash: [u8; 32],
    data: Vec<S>,
}

/// Per-channel planar render: `planar[c * w * h + row * w + col]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderImage<S = f32> {
    pub width: usize,
    pub height: usize,
    pub planar: Vec<S>,
}

impl<S: Real> RenderImage<S> {
    pub fn to_interleaved_f32(&self) -> Vec<f32> {
        let n = self.width * self.height;
        let mut out = vec![0f32; n * 3];
        for c in 0..3 {
            for i in 0..n {
                out[i * 3 + c] = self.planar[c * n + i].f64() as f32;
            }
        }
        out
    }
}

fn check_pano_dims(width: usize, height: usize) -> Result<(), TransportError> {
    if height == 0 || height % 2 != 0 || width != 2 * height {
        return Err(TransportError::BadDims { width, height });
    }
    Ok(())
}

/// Computes one matrix row in `f64`.
fn transport_row(scene: &Scene, row: usize, col: usize, dirs: &[([f64; 3], f64)], out: &mut [f64]) {
    let (o, d) = scene.camera_ray(row, col);
    let Some(hit) = scene.trace(o, d) else {
        return;
    };
    let origin = scene::add(hit.point, scene::scale(hit.normal, SHADOW_OFFSET));
    let k = scene.spec.albedo / std::f64::consts::PI;
    for (j, &(dir, omega)) in dirs.iter().enumerate() {
        let cos = scene::dot(hit.normal, dir);
        if cos <= 0.0 || scene.occluded(origin, dir) {
            continue;
        }
        out[j] = k * cos * omega;
    }
}

/// Top-hemisphere directions and solid angles in column order.
pub fn sky_columns(pano_width: usize, pano_height: usize) -> Vec<([f64; 3], f64)> {
    let mut v = Vec::with_capacity(pano_width * pano_height / 2);
    for r in 0..pano_height / 2 {
        for c in 0..pano_width {
            v.push((direction_of_pixel(r, c, pano_width, pano_height), solid_angle(r, pano_width, pano_height)));
        }
    }
    v
}

/// Builds the matrix; rows are independent and computed in parallel.
pub fn build_transport<S: Real>(
    spec: &SceneSpec,
    pano_width: usize,
    pano_height: usize,
) -> Result<TransportMatrix<S>, TransportError> {
    check_pano_dims(pano_width, pano_height)?;
    if spec.resolution == 0 {
        return Err(TransportError::DegenerateScene("render resolution is zero".into()));
    }
    if !(spec.fov_degrees > 0.0 && spec.fov_degrees < 180.0) {
        return Err(TransportError::DegenerateScene(format!("field of view {} out of (0, 180)", spec.fov_degrees)));
    }
    if !(spec.albedo >= 0.0 && spec.albedo.is_finite()) {
        return Err(TransportError::DegenerateScene(format!("albedo {} must be finite and >= 0", spec.albedo)));
    }
    if !(spec.base_radius > 0.0) || spec.spike_amplitude < 0.0 || !(spec.spike_sharpness > 0.0) {
        return Err(TransportError::DegenerateScene("object parameters must be positive".into()));
    }
    let scene = Scene::new(spec.clone());
    if scene.camera_inside_geometry() {
        return Err(TransportError::DegenerateScene("camera is inside the geometry".into()));
    }
    let dirs = sky_columns(pano_width, pano_height);
    let n = spec.resolution;
    let cols = dirs.len();
    let mut data = vec![S::zero(); n * n * cols];
    data.par_chunks_mut(cols).enumerate().for_each(|(i, out)| {
        let mut row = vec![0f64; cols];
        transport_row(&scene, i / n, i % n, &dirs, &mut row);
        for (o, v) in out.iter_mut().zip(&row) {
            *o = S::lit(*v);
        }
    });
    Ok(TransportMatrix {
        render_width: n,
        render_height: n,
        pano_width,
        pano_height,
        scene_hash: spec.hash(pano_width, pano_height),
        data,
    })
}

impl<S: Real> TransportMatrix<S> {
    pub fn rows(&self) -> usize {
        self.render_width * self.render_height
    }

    pub fn cols(&self) -> usize {
        self.pano_width * self.pano_height / 2
    }

    pub fn render_width(&self) -> usize {
        self.render_width
    }

    pub fn render_height(&self) -> usize {
        self.render_height
    }

    pub fn pano_dims(&self) -> (usize, usize) {
        (self.pano_width, self.pano_height)
    }

    pub fn scene_hash(&self) -> [u8; 32] {
        self.scene_hash
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols()..(i + 1) * self.cols()]
    }

    pub fn get(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols() + j]
    }

    pub fn cast<T: Real>(&self) -> TransportMatrix<T> {
        TransportMatrix {
            render_width: self.render_width,
            render_height: self.render_height,
            pano_width: self.pano_width,
            pano_height: self.pano_height,
            scene_hash: self.scene_hash,
            data: self.data.iter().map(|v| T::lit(v.f64())).collect(),
        }
    }

    /// `T · sky` for one channel; `sky.len() == cols()`.
    pub fn render(&self, sky: &[S]) -> Vec<S> {
        let mut out = vec![S::zero(); self.rows()];
        self.render_batch(sky, 1, &mut out);
        out
    }

    /// `Tᵀ · upstream` for one channel; `upstream.len() == rows()`.
    pub fn render_backward(&self, upstream: &[S]) -> Vec<S> {
        let mut out = vec![S::zero(); self.cols()];
        self.render_backward_batch(upstream, 1, &mut out);
        out
    }

    /// Renders `m` contiguous sky vectors into `m` contiguous render vectors.
    pub fn render_batch(&self, skies: &[S], m: usize, out: &mut [S]) {
        let (r, c) = (self.rows(), self.cols());
        assert_eq!(skies.len(), m * c, "sky batch length");
        assert_eq!(out.len(), m * r, "render batch length");
        S::gemm(
            r,
            c,
            m,
            S::one(),
            (&self.data, c as isize, 1),
            (skies, 1, c as isize),
            S::zero(),
            (out, 1, r as isize),
        );
    }

    /// Adjoint of [`render_batch`](Self::render_batch), accumulated into `out`.
    pub fn render_backward_batch(&self, upstream: &[S], m: usize, out: &mut [S]) {
        let (r, c) = (self.rows(), self.cols());
        assert_eq!(upstream.len(), m * r, "upstream batch length");
        assert_eq!(out.len(), m * c, "gradient batch length");
        S::gemm(
            c,
            r,
            m,
            S::one(),
            (&self.data, 1, c as isize),
            (upstream, 1, r as isize),
            S::one(),
            (out, 1, c as isize),
        );
    }

    /// Renders the top hemisphere of a full panorama, all three channels.
    pub fn render_panorama(&self, pano: &HdrPanorama<S>) -> RenderImage<S> {
        assert_eq!((pano.width(), pano.height()), (self.pano_width, self.pano_height), "panorama size");
        let sky = pano.top_hemisphere_planar();
        let mut planar = vec![S::zero(); 3 * self.rows()];
        self.render_batch(&sky, 3, &mut planar);
        RenderImage { width: self.render_width, height: self.render_height, planar }
    }

    /// Serialises to the cache layout, always as little-endian `f32`.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CACHE_HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(&CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.scene_hash);
        for v in [
            self.rows(),
            self.cols(),
            self.render_width,
            self.render_height,
            self.pano_width,
            self.pano_height,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
        out
    }

    pub fn decode(buf: &[u8], path: &Path) -> Result<Self, TransportError> {
        let bad = |msg: String| TransportError::Format { path: path.to_path_buf(), msg };
        if buf.len() < CACHE_HEADER_LEN {
            return Err(bad(format!("file is {} bytes, shorter than the header", buf.len())));
        }
        if buf[..8] != CACHE_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let u32_at = |off: usize| u32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]]) as usize;
        let version = u32_at(8) as u32;
        if version != CACHE_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut scene_hash = [0u8; 32];
        scene_hash.copy_from_slice(&buf[12..44]);
        let dims: Vec<usize> = (0..6).map(|i| u32_at(44 + 4 * i)).collect();
        let (rows, cols, rw, rh, pw, ph) = (dims[0], dims[1], dims[2], dims[3], dims[4], dims[5]);
        check_pano_dims(pw, ph).map_err(|e| bad(e.to_string()))?;
        if rows != rw * rh || cols != pw * ph / 2 {
            return Err(bad("inconsistent dimensions".into()));
        }
        let n = rows.checked_mul(cols).ok_or_else(|| bad("dims overflow".into()))?;
        let body = &buf[CACHE_HEADER_LEN..];
        if body.len() != n * 4 {
            return Err(bad(format!("expected {} data bytes, found {}", n * 4, body.len())));
        }
        let mut data = Vec::with_capacity(n);
        for (k, ch) in body.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([ch[0], ch[1], ch[2], ch[3]]);
            if !(v >= 0.0 && v.is_finite()) {
                return Err(bad(format!("entry {k} is {v}, must be finite and >= 0")));
            }
            data.push(S::lit(v as f64));
        }
        Ok(Self { render_width: rw, render_height: rh, pano_width: pw, pano_height: ph, scene_hash, data })
    }

    pub fn write_cache(&self, path: &Path) -> Result<(), TransportError> {
        let bytes = self.encode();
        atomic_write(path, |w| w.write_all(&bytes)).map_err(|e| TransportError::Io {
            path: path.to_path_buf(),
            source: io::Error::other(e.to_string()),
        })
    }

    pub fn read_cache(path: &Path) -> Result<Self, TransportError> {
        let io_err = |source| TransportError::Io { path: path.to_path_buf(), source };
        let mut buf = Vec::new();
        BufReader::new(File::open(path).map_err(io_err)?).read_to_end(&mut buf).map_err(io_err)?;
        Self::decode(&buf, path)
    }
}

/// Loads `path` if it matches `spec`, otherwise builds and writes it.
pub fn load_or_build<S: Real>(
    spec: &SceneSpec,
    pano_width: usize,
    pano_height: usize,
    path: &Path,
) -> Result<TransportMatrix<S>, TransportError> {
    if path.exists() {
        match TransportMatrix::<S>::read_cache(path) {
            Ok(t) if t.scene_hash == spec.hash(pano_width, pano_height) => return Ok(t),
            Ok(_) | Err(TransportError::Format { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    let t = build_transport::<S>(spec, pano_width, pano_height)?;
    t.write_cache(path)?;
    Ok(t)
}

/// Like [`TransportMatrix::read_cache`] but rejects caches built for another scene.
pub fn read_cache_checked<S: Real>(
    spec: &SceneSpec,
    pano_width: usize,
    pano_height: usize,
    path: &Path,
) -> Result<TransportMatrix<S>, TransportError> {
    let t = TransportMatrix::<S>::read_cache(path)?;
    if t.scene_hash != spec.hash(pano_width, pano_height) {
        return Err(TransportError::HashMismatch { path: path.to_path_buf() });
    }
    Ok(t)
}
