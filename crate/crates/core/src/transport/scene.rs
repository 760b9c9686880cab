//! The "spiky sphere on a ground plane" scene and its ray queries.
//!
//! The object is an implicit star-shaped surface: a sphere whose radius is
//! modulated by smooth von Mises bumps around fixed spike axes,
//! `R(u) = r0 · (1 + A · Σ_k exp(κ (u·s_k − 1)))`. The implicit function
//! `f(p) = |p − c| − R(û)` is not a distance, so marching divides it by a
//! Lipschitz bound.

use std::f64::consts::PI;

use sha2::{Digest, Sha256};

pub type Vec3 = [f64; 3];

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

/// Scene description. The pose is a config constant, versioned through
/// [`SceneSpec::hash`] together with the cached matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub base_radius: f64,
    pub center_height: f64,
    pub spike_count: usize,
    pub spike_amplitude: f64,
    /// von Mises concentration of each bump; larger is sharper.
    pub spike_sharpness: f64,
    pub ground_height: f64,
    pub camera_position: Vec3,
    pub camera_target: Vec3,
    pub fov_degrees: f64,
    pub resolution: usize,
    pub albedo: f64,
    /// When false the object is removed and only the plane remains.
    pub with_object: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            base_radius: 0.6,
            center_height: 0.75,
            spike_count: 14,
            spike_amplitude: 0.5,
            spike_sharpness: 40.0,
            ground_height: 0.0,
            camera_position: [0.0, 3.0, 1.5],
            camera_target: [0.0, 0.2, -0.35],
            fov_degrees: 55.0,
            resolution: 64,
            albedo: 1.0,
            with_object: true,
        }
    }
}

impl SceneSpec {
    /// Stable content hash of every field, used to key cached matrices.
    pub fn hash(&self, pano_width: usize, pano_height: usize) -> [u8; 32] {
        let text = format!(
            "scene-v1;r0={:?};ch={:?};n={};a={:?};k={:?};g={:?};cam={:?};tgt={:?};fov={:?};res={};rho={:?};obj={};pano={}x{}",
            self.base_radius,
            self.center_height,
            self.spike_count,
            self.spike_amplitude,
            self.spike_sharpness,
            self.ground_height,
            self.camera_position,
            self.camera_target,
            self.fov_degrees,
            self.resolution,
            self.albedo,
            self.with_object,
            pano_width,
            pano_height
        );
        Sha256::digest(text.as_bytes()).into()
    }
}

/// Evenly spread unit vectors (Fibonacci lattice), deterministic in `n`.
pub fn fibonacci_directions(n: usize) -> Vec<Vec3> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).sqrt();
            let t = golden * i as f64;
            [r * t.cos(), y, r * t.sin()]
        })
        .collect()
}

/// Ray-queryable geometry built from a [`SceneSpec`].
#[derive(Clone, Debug)]
pub struct Scene {
    pub spec: SceneSpec,
    center: Vec3,
    spikes: Vec<Vec3>,
    bound_radius: f64,
    lipschitz: f64,
    /// Bumps below this cosine contribute less than 1e-7 and are skipped.
    cos_cutoff: f64,
}

pub const HIT_EPS: f64 = 1e-5;
const MAX_STEPS: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Surface {
    Ground,
    Object,
}

#[derive(Clone, Copy, Debug)]
pub struct Hit {
    pub t: f64,
    pub point: Vec3,
    pub normal: Vec3,
    pub surface: Surface,
}

impl Scene {
    pub fn new(spec: SceneSpec) -> Self {
        let center = [0.0, spec.center_height, 0.0];
        let spikes = fibonacci_directions(spec.spike_count);
        let k = spec.spike_sharpness;
        let cos_cutoff = 1.0 - 16.2 / k.max(1e-9);
        let mut scene = Self { spec, center, spikes, bound_radius: 0.0, lipschitz: 1.0, cos_cutoff };
        // bound the bump sum by dense sampling plus margin
        let max_sum = fibonacci_directions(20_000)
            .into_iter()
            .map(|u| scene.bump_sum(u))
            .fold(0.0, f64::max)
            .max(1.0);
        let a = scene.spec.spike_amplitude;
        scene.bound_radius = scene.spec.base_radius * (1.0 + a * max_sum * 1.05) + 1e-3;
        // |∇_u R| <= r0·A·sqrt(κ)·e^{-1/2}·(overlap), evaluated where |p−c| >= r0
        let tangential = a * k.sqrt() * (-0.5f64).exp() * max_sum * 1.25;
        scene.lipschitz = (1.0 + tangential * tangential).sqrt();
        scene
    }

    pub fn bound_radius(&self) -> f64 {
        self.bound_radius
    }

    fn bump_sum(&self, u: Vec3) -> f64 {
        let k = self.spec.spike_sharpness;
        let mut s = 0.0;
        for sp in &self.spikes {
            let c = dot(u, *sp);
            if c > self.cos_cutoff {
                s += (k * (c - 1.0)).exp();
            }
        }
        s
    }

    /// Implicit function: negative inside the object.
    pub fn object_field(&self, p: Vec3) -> f64 {
        let q = sub(p, self.center);
        let r = norm(q);
        if r < 1e-12 {
            return -self.spec.base_radius;
        }
        let u = scale(q, 1.0 / r);
        r - self.spec.base_radius * (1.0 + self.spec.spike_amplitude * self.bump_sum(u))
    }

    fn object_normal(&self, p: Vec3) -> Vec3 {
        let h = 1e-6;
        let mut g = [0.0; 3];
        for (i, gi) in g.iter_mut().enumerate() {
            let mut a = p;
            let mut b = p;
            a[i] += h;
            b[i] -= h;
            *gi = self.object_field(a) - self.object_field(b);
        }
        normalize(g)
    }

    /// Parametric interval where the ray is inside the bounding sphere.
    fn bound_interval(&self, o: Vec3, d: Vec3) -> Option<(f64, f64)> {
        let oc = sub(o, self.center);
        let b = dot(oc, d);
        let c = dot(oc, oc) - self.bound_radius * self.bound_radius;
        let disc = b * b - c;
        if disc <= 0.0 {
            return None;
        }
        let s = disc.sqrt();
        let (t0, t1) = (-b - s, -b + s);
        if t1 <= 0.0 {
            return None;
        }
        Some((t0.max(0.0), t1))
    }

    /// First object intersection along a unit-direction ray, if any.
    pub fn intersect_object(&self, o: Vec3, d: Vec3, t_max: f64) -> Option<f64> {
        if !self.spec.with_object {
            return None;
        }
        let (mut t, t1) = self.bound_interval(o, d)?;
        let t1 = t1.min(t_max);
        for _ in 0..MAX_STEPS {
            if t > t1 {
                return None;
            }
            let f = self.object_field(add(o, scale(d, t)));
            if f < HIT_EPS {
                return Some(t);
            }
            t += (f / self.lipschitz).max(HIT_EPS * 0.5);
        }
        None
    }

    pub fn occluded(&self, o: Vec3, d: Vec3) -> bool {
        self.intersect_object(o, d, f64::INFINITY).is_some()
    }

    /// Nearest visible surface along a primary ray.
    pub fn trace(&self, o: Vec3, d: Vec3) -> Option<Hit> {
        let g = self.spec.ground_height;
        let t_ground = if d[1] < 0.0 && o[1] > g { Some((g - o[1]) / d[1]) } else { None };
        let t_obj = self.intersect_object(o, d, t_ground.unwrap_or(f64::INFINITY));
        match (t_obj, t_ground) {
            (Some(t), _) => {
                let p = add(o, scale(d, t));
                Some(Hit { t, point: p, normal: self.object_normal(p), surface: Surface::Object })
            }
            (None, Some(t)) => {
                Some(Hit { t, point: add(o, scale(d, t)), normal: [0.0, 1.0, 0.0], surface: Surface::Ground })
            }
            (None, None) => None,
        }
    }

    /// Pinhole camera ray for render pixel `(row, col)`.
    pub fn camera_ray(&self, row: usize, col: usize) -> (Vec3, Vec3) {
        let s = &self.spec;
        let fwd = normalize(sub(s.camera_target, s.camera_position));
        let mut hint = [0.0, 1.0, 0.0];
        if norm(cross(fwd, hint)) < 1e-6 {
            hint = [0.0, 0.0, -1.0];
        }
        let right = normalize(cross(fwd, hint));
        let up = cross(right, fwd);
        let tan = (s.fov_degrees.to_radians() * 0.5).tan();
        let n = s.resolution as f64;
        let x = (2.0 * (col as f64 + 0.5) / n - 1.0) * tan;
        let y = (1.0 - 2.0 * (row as f64 + 0.5) / n) * tan;
        (s.camera_position, normalize(add(fwd, add(scale(right, x), scale(up, y)))))
    }

    pub fn camera_inside_geometry(&self) -> bool {
        let c = self.spec.camera_position;
        c[1] <= self.spec.ground_height || (self.spec.with_object && self.object_field(c) <= 0.0)
    }
}
