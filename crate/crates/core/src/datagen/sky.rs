//! Analytic clear/overcast sky with a supersampled solar disk.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;

use super::DatagenError;
use crate::pano::geometry::{angles_of_direction, direction_from_angles, direction_of_pixel, elevation_of_row, pixel_of_direction, solid_angle};
use crate::pano::HdrPanorama;
use crate::sun::wrap_angle;

/// Angular radius of the solar disk, radians.
pub const SUN_ANGULAR_RADIUS: f64 = 0.2555 * PI / 180.0;
pub const MIN_SUN_ELEVATION: f64 = 0.05;
pub const MAX_SUN_ELEVATION: f64 = 1.45;
pub const MIN_SUN_RATIO: f64 = 1e2;
pub const MAX_SUN_RATIO: f64 = 1.3e5;
/// Horizontal over vertical extent of the glow around the sun.
pub const GLOW_ASPECT: f64 = 3.0;
/// Disk samples per side when splatting the sun into pixels.
const DISK_SAMPLES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SkyParams {
    pub sun_elevation: f64,
    pub sun_azimuth: f64,
    /// Sun-disk radiance over the base sky radiance.
    pub sun_ratio: f64,
    pub base_radiance: f64,
    /// Falloff of the glow around the sun, radians of [`SkyParams::glow_offset`].
    pub circumsolar_width: f64,
    /// Peak glow relative to the surrounding sky.
    pub circumsolar_gain: f64,
    /// Extra brightening toward the horizon.
    pub horizon_gradient: f64,
    pub tint: [f64; 3],
    /// Blend weight of the overcast component, in `[0, 1]`.
    pub cloudiness: f64,
}

impl SkyParams {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |m: String| Err(DatagenError::Params(m));
        if !(MIN_SUN_ELEVATION..=MAX_SUN_ELEVATION).contains(&self.sun_elevation) {
            return bad(format!("sun elevation {} outside [{MIN_SUN_ELEVATION}, {MAX_SUN_ELEVATION}]", self.sun_elevation));
        }
        if !(MIN_SUN_RATIO..=MAX_SUN_RATIO).contains(&self.sun_ratio) {
            return bad(format!("sun ratio {} outside [{MIN_SUN_RATIO}, {MAX_SUN_RATIO}]", self.sun_ratio));
        }
        if !(self.base_radiance > 0.0 && self.base_radiance.is_finite()) {
            return bad("base radiance must be positive".into());
        }
        if !(self.circumsolar_width > 0.0 && self.circumsolar_gain >= 0.0 && self.horizon_gradient >= 0.0) {
            return bad("circumsolar width must be positive, gain and gradient non-negative".into());
        }
        if !self.tint.iter().all(|t| *t > 0.0 && t.is_finite()) {
            return bad("tint must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.cloudiness) || !self.sun_azimuth.is_finite() {
            return bad("cloudiness must lie in [0, 1] and azimuth be finite".into());
        }
        Ok(())
    }

    /// Random sky. One clearness draw sets the log-uniform sun ratio and the
    /// cloud cover together, so brighter suns come with clearer skies. The
    /// glow is strong enough that the brightest half percent of the sphere
    /// surrounds the sun.
    pub fn sample(rng: &mut impl Rng) -> Self {
        let clearness: f64 = rng.random();
        let log_ratio = MIN_SUN_RATIO.log10() + clearness * (MAX_SUN_RATIO.log10() - MIN_SUN_RATIO.log10());
        Self {
            sun_elevation: rng.random_range(MIN_SUN_ELEVATION..=MAX_SUN_ELEVATION),
            sun_azimuth: rng.random_range(-PI..PI),
            sun_ratio: 10f64.powf(log_ratio).clamp(MIN_SUN_RATIO, MAX_SUN_RATIO),
            base_radiance: rng.random_range(0.5..2.0),
            circumsolar_width: rng.random_range(0.04..0.07),
            circumsolar_gain: 10f64.powf(rng.random_range(2.0..400f64.log10())),
            horizon_gradient: rng.random_range(0.0..0.6),
            tint: [rng.random_range(0.6..0.9), rng.random_range(0.8..0.95), 1.0],
            cloudiness: 0.3 * (1.0 - clearness),
        }
    }

    pub fn sun_direction(&self) -> [f64; 3] {
        direction_from_angles(self.sun_elevation, self.sun_azimuth)
    }

    /// Angular offset from the sun that drives the glow: elevation and
    /// azimuth differences with the azimuth shrunk by `GLOW_ASPECT`.
    ///
    /// Measured in panorama angles rather than along great circles, the
    /// glow keeps the same flattened footprint in the image at every sun
    /// elevation, so its clipped core stays centered on the sun even near
    /// the zenith and the horizon.
    pub fn glow_offset(&self, d: [f64; 3]) -> f64 {
        let (el, az) = angles_of_direction(d);
        let d_az = wrap_angle(az - self.sun_azimuth) / GLOW_ASPECT;
        (el - self.sun_elevation).hypot(d_az)
    }

    /// Sky radiance without the disk along a direction above the horizon.
    pub fn radiance(&self, d: [f64; 3]) -> [f64; 3] {
        let sin_theta = d[1].clamp(0.0, 1.0);
        let glow = self.circumsolar_gain * (-self.glow_offset(d) / self.circumsolar_width).exp();
        let clear = (1.0 + self.horizon_gradient * (1.0 - sin_theta)) * (1.0 + glow);
        let overcast = (1.0 + 2.0 * sin_theta) / 3.0 * 1.5;
        let v = self.base_radiance * ((1.0 - self.cloudiness) * clear + self.cloudiness * overcast);
        [v * self.tint[0], v * self.tint[1], v * self.tint[2]]
    }

    pub fn sun_radiance(&self) -> f64 {
        self.sun_ratio * self.base_radiance
    }
}

/// Solid angle of the solar disk.
pub fn sun_solid_angle() -> f64 {
    2.0 * PI * (1.0 - SUN_ANGULAR_RADIUS.cos())
}

/// Fraction of the disk landing in each pixel, in row-major pixel order.
pub fn disk_coverage(center: [f64; 3], width: usize, height: usize) -> Vec<((usize, usize), f64)> {
    let up = if center[1].abs() < 0.99 { [0.0, 1.0, 0.0] } else { [1.0, 0.0, 0.0] };
    let cross = |a: [f64; 3], b: [f64; 3]| [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
    let norm = |a: [f64; 3]| {
        let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
        [a[0] / n, a[1] / n, a[2] / n]
    };
    let u = norm(cross(up, center));
    let v = cross(center, u);
    let r = SUN_ANGULAR_RADIUS.tan();
    let mut hits: Vec<((usize, usize), usize)> = Vec::new();
    let mut total = 0usize;
    for i in 0..DISK_SAMPLES {
        for j in 0..DISK_SAMPLES {
            let x = (2.0 * (i as f64 + 0.5) / DISK_SAMPLES as f64 - 1.0) * r;
            let y = (2.0 * (j as f64 + 0.5) / DISK_SAMPLES as f64 - 1.0) * r;
            if x * x + y * y > r * r {
                continue;
            }
            let d = norm([center[0] + x * u[0] + y * v[0], center[1] + x * u[1] + y * v[1], center[2] + x * u[2] + y * v[2]]);
            let px = pixel_of_direction(d, width, height);
            total += 1;
            match hits.iter_mut().find(|(p, _)| *p == px) {
                Some(h) => h.1 += 1,
                None => hits.push((px, 1)),
            }
        }
    }
    hits.sort();
    hits.into_iter().map(|(p, n)| (p, n as f64 / total as f64)).collect()
}

/// Top hemisphere of the sky; rows below the horizon are zero.
pub fn gen_sky(sp: &SkyParams, width: usize, height: usize) -> Result<HdrPanorama<f64>, DatagenError> {
    sp.validate()?;
    let mut p = HdrPanorama::<f64>::zeros(width, height)?;
    for r in 0..height / 2 {
        for c in 0..width {
            p.set(r, c, sp.radiance(direction_of_pixel(r, c, width, height)));
        }
    }
    let energy = sp.sun_radiance() * sun_solid_angle();
    for ((r, c), frac) in disk_coverage(sp.sun_direction(), width, height) {
        if elevation_of_row(r, height) <= 0.0 {
            continue;
        }
        let add = energy * frac / solid_angle(r, width, height);
        let px = p.get(r, c);
        p.set(r, c, [px[0] + add, px[1] + add, px[2] + add]);
    }
    Ok(p)
}

/// Elevation of the center of `row`, clamped into the sun's allowed range.
pub fn snap_elevation(elevation: f64, height: usize) -> f64 {
    let row = crate::pano::geometry::row_of_elevation(elevation, height).round() as usize;
    let mut e = elevation_of_row(row.min(height - 1), height);
    // step toward the horizon or zenith until inside the allowed range
    let step = PI / height as f64;
    while e < MIN_SUN_ELEVATION {
        e += step;
    }
    while e > MAX_SUN_ELEVATION.min(FRAC_PI_2) {
        e -= step;
    }
    e
}
