//! Ground plane and box buildings around the camera, lit by the sky.
//!
//! The camera stands `CAMERA_HEIGHT` above an infinite Lambertian ground at
//! the origin. Buildings are axis-aligned boxes kept out of the azimuth
//! sector facing the sun so the solar disk is never hidden. Ground and
//! facade radiance gather the unoccluded sky: `ρ/π · Σ L(ω) max(0, n·ω) V Ω`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::sky::{gen_sky, snap_elevation, SkyParams};
use super::DatagenError;
use crate::pano::geometry::{azimuth_of_col, center_col, direction_of_pixel, solid_angle};
use crate::pano::HdrPanorama;
use crate::sun::SunPosition;

pub const CAMERA_HEIGHT: f64 = 1.0;
/// Half-width of the building-free azimuth sector centered on the sun.
pub const SUN_CLEAR_SECTOR: f64 = 50.0 * PI / 180.0;
const SHADOW_OFFSET: f64 = 1e-6;

/// Axis-aligned box standing on the ground.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Occluder {
    /// `(x, z)` of the footprint center.
    pub center: [f64; 2],
    pub half_size: [f64; 2],
    pub height: f64,
}

impl Occluder {
    /// Nearest entry distance and outward normal of a ray, if it hits.
    fn hit(&self, o: [f64; 3], d: [f64; 3]) -> Option<(f64, [f64; 3])> {
        let lo = [self.center[0] - self.half_size[0], 0.0, self.center[1] - self.half_size[1]];
        let hi = [self.center[0] + self.half_size[0], self.height, self.center[1] + self.half_size[1]];
        let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
        let mut axis = usize::MAX;
        let mut sign = 0.0;
        for a in 0..3 {
            if d[a].abs() < 1e-15 {
                if o[a] < lo[a] || o[a] > hi[a] {
                    return None;
                }
                continue;
            }
            let (mut ta, mut tb) = ((lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]);
            let mut s = -1.0;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
                s = 1.0;
            }
            if ta > t0 {
                t0 = ta;
                axis = a;
                sign = s;
            }
            t1 = t1.min(tb);
            if t0 > t1 {
                return None;
            }
        }
        if axis == usize::MAX {
            return None;
        }
        let mut n = [0.0; 3];
        n[axis] = sign;
        Some((t0, n))
    }

    /// Bounding circle radius of the footprint.
    fn radius(&self) -> f64 {
        self.half_size[0].hypot(self.half_size[1])
    }

    /// Bounding cone of the box seen from `o`, for cheap ray rejection.
    fn cone(&self, o: [f64; 3]) -> Cone {
        let dx = self.center[0] - o[0];
        let dz = self.center[1] - o[2];
        let dist = dx.hypot(dz);
        let r = self.radius();
        if dist <= r {
            return Cone { dx, dz, dist, tan_top: f64::INFINITY, cos_half: -1.0 };
        }
        Cone { dx, dz, dist, tan_top: (self.height - o[1]).max(0.0) / (dist - r), cos_half: (1.0 - (r / dist).powi(2)).max(0.0).sqrt() }
    }

    /// Whether a ray from `o` toward `d` can reach the box; conservative.
    #[cfg(test)]
    fn may_block(&self, o: [f64; 3], d: [f64; 3]) -> bool {
        self.cone(o).admits(d, (d[0] * d[0] + d[2] * d[2]).sqrt())
    }
}

/// Azimuth sector and elevation cap enclosing a box as seen from a point.
struct Cone {
    dx: f64,
    dz: f64,
    dist: f64,
    tan_top: f64,
    cos_half: f64,
}

impl Cone {
    /// `horiz` is the horizontal length of `d`.
    fn admits(&self, d: [f64; 3], horiz: f64) -> bool {
        if self.cos_half < 0.0 {
            return true;
        }
        if horiz < 1e-12 || d[1] > self.tan_top * horiz {
            return false;
        }
        self.dx * d[0] + self.dz * d[2] >= self.cos_half * self.dist * horiz
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundParams {
    /// Albedo of ground and facades.
    pub albedo: [f64; 3],
    pub layout_seed: u64,
    pub occluder_count: usize,
}

impl GroundParams {
    pub fn validate(&self) -> Result<(), DatagenError> {
        if !self.albedo.iter().all(|a| (0.0..=1.0).contains(a)) {
            return Err(DatagenError::Params(format!("albedo {:?} outside [0, 1]", self.albedo)));
        }
        Ok(())
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        let g = rng.random_range(0.1..0.35);
        Self {
            albedo: [g * rng.random_range(0.9..1.1), g, g * rng.random_range(0.8..1.0)],
            layout_seed: rng.random(),
            occluder_count: rng.random_range(2..=7),
        }
    }

    /// Buildings in a frame whose `+z` axis faces the sun.
    pub fn occluders(&self) -> Vec<Occluder> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.layout_seed);
        (0..self.occluder_count)
            .map(|_| {
                let az = rng.random_range(SUN_CLEAR_SECTOR..2.0 * PI - SUN_CLEAR_SECTOR);
                let dist = rng.random_range(8.0..18.0);
                Occluder {
                    center: [dist * az.sin(), dist * az.cos()],
                    half_size: [rng.random_range(1.0..2.5), rng.random_range(1.0..2.5)],
                    height: rng.random_range(1.5..4.5),
                }
            })
            .collect()
    }

    /// Highest occluded elevation per column as seen from the camera.
    pub fn skyline(&self, width: usize, height: usize) -> Vec<f64> {
        let boxes = self.occluders();
        let cam = [0.0, CAMERA_HEIGHT, 0.0];
        (0..width)
            .map(|c| {
                (0..height / 2)
                    .filter(|&r| {
                        let d = direction_of_pixel(r, c, width, height);
                        boxes.iter().any(|b| b.hit(cam, d).is_some())
                    })
                    .map(|r| crate::pano::geometry::elevation_of_row(r, height))
                    .fold(0.0, f64::max)
            })
            .collect()
    }
}

/// Sky radiance samples used for gathering.
struct SkySamples {
    dirs: Vec<[f64; 3]>,
    /// Radiance times solid angle.
    flux: Vec<[f64; 3]>,
}

impl SkySamples {
    /// Target number of sky rows after binning; keeps gathering cheap.
    const BIN_ROWS: usize = 16;

    /// Sky pixels summed over square bins. A bin's direction is the
    /// flux-weighted mean of its pixel directions, so the sun keeps its place.
    fn new(sky: &HdrPanorama<f64>) -> Self {
        let (w, h) = (sky.width(), sky.height());
        let bin = (h / 2 / Self::BIN_ROWS).max(1);
        let mut dirs = Vec::new();
        let mut flux = Vec::new();
        for r0 in (0..h / 2).step_by(bin) {
            for c0 in (0..w).step_by(bin) {
                let mut f = [0.0; 3];
                let mut d = [0.0; 3];
                for r in r0..(r0 + bin).min(h / 2) {
                    let om = solid_angle(r, w, h);
                    for c in c0..(c0 + bin).min(w) {
                        let l = sky.get(r, c);
                        let y = (l[0] + l[1] + l[2]) * om;
                        let dir = direction_of_pixel(r, c, w, h);
                        for k in 0..3 {
                            f[k] += l[k] * om;
                            d[k] += y * dir[k];
                        }
                    }
                }
                let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                if n > 0.0 {
                    dirs.push([d[0] / n, d[1] / n, d[2] / n]);
                    flux.push(f);
                }
            }
        }
        Self { dirs, flux }
    }

    /// `Σ flux · max(0, n·ω) · V` from point `p`.
    fn irradiance(&self, p: [f64; 3], n: [f64; 3], boxes: &[Occluder]) -> [f64; 3] {
        let o = [p[0] + SHADOW_OFFSET * n[0], p[1] + SHADOW_OFFSET * n[1], p[2] + SHADOW_OFFSET * n[2]];
        let cones: Vec<(Cone, &Occluder)> = boxes.iter().map(|b| (b.cone(o), b)).collect();
        let mut e = [0.0; 3];
        for (d, f) in self.dirs.iter().zip(&self.flux) {
            let cos = n[0] * d[0] + n[1] * d[1] + n[2] * d[2];
            if cos <= 0.0 {
                continue;
            }
            let horiz = (d[0] * d[0] + d[2] * d[2]).sqrt();
            if cones.iter().any(|(c, b)| c.admits(*d, horiz) && b.hit(o, *d).is_some()) {
                continue;
            }
            for k in 0..3 {
                e[k] += f[k] * cos;
            }
        }
        e
    }
}

/// Lights the scene with a top-hemisphere `sky`; returns the full panorama.
pub fn shade_scene(sky: &HdrPanorama<f64>, gp: &GroundParams) -> Result<HdrPanorama<f64>, DatagenError> {
    gp.validate()?;
    let (w, h) = (sky.width(), sky.height());
    let boxes = gp.occluders();
    let samples = SkySamples::new(sky);
    let cam = [0.0, CAMERA_HEIGHT, 0.0];
    let rows: Vec<Vec<[f64; 3]>> = (0..h)
        .into_par_iter()
        .map(|r| {
            (0..w)
                .map(|c| {
                    let d = direction_of_pixel(r, c, w, h);
                    let box_hit = boxes.iter().filter_map(|b| b.hit(cam, d)).min_by(|a, b| a.0.total_cmp(&b.0));
                    let ground_t = if d[1] < 0.0 { Some(CAMERA_HEIGHT / -d[1]) } else { None };
                    let (t, n) = match (box_hit, ground_t) {
                        (Some((tb, nb)), Some(tg)) if tb < tg => (tb, nb),
                        (Some(hit), None) => hit,
                        (_, Some(tg)) => (tg, [0.0, 1.0, 0.0]),
                        (None, None) => return sky.get(r, c),
                    };
                    if gp.albedo == [0.0; 3] {
                        return [0.0; 3];
                    }
                    let p = [cam[0] + t * d[0], cam[1] + t * d[1], cam[2] + t * d[2]];
                    let e = samples.irradiance(p, n, &boxes);
                    [gp.albedo[0] / PI * e[0], gp.albedo[1] / PI * e[1], gp.albedo[2] / PI * e[2]]
                })
                .collect()
        })
        .collect();
    let data: Vec<f64> = rows.into_iter().flatten().flatten().collect();
    Ok(HdrPanorama::from_data(w, h, data)?)
}

/// Full panorama with the sun parked on the center column.
///
/// The sun is moved to the center of the nearest pixel row inside the
/// allowed elevation range and to the center of the middle column, so the
/// disk never straddles pixels; the returned position is the rendered one.
pub fn gen_panorama(sp: &SkyParams, gp: &GroundParams, width: usize, height: usize) -> Result<(HdrPanorama<f64>, SunPosition), DatagenError> {
    sp.validate()?;
    let centered = SkyParams {
        sun_elevation: snap_elevation(sp.sun_elevation, height),
        sun_azimuth: azimuth_of_col(center_col(width), width),
        ..*sp
    };
    let sky = gen_sky(&centered, width, height)?;
    let pano = shade_scene(&sky, gp)?;
    let sun = SunPosition::from_angles(centered.sun_elevation, centered.sun_azimuth, width, height);
    Ok((pano, sun))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pano::quantize_ldr;
    use crate::sun::detect_sun;

    fn open_ground(albedo: f64) -> GroundParams {
        GroundParams { albedo: [albedo; 3], layout_seed: 0, occluder_count: 0 }
    }

    #[test]
    fn zero_albedo_leaves_bottom_black() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sp = SkyParams::sample(&mut rng);
        let gp = GroundParams { albedo: [0.0; 3], ..GroundParams::sample(&mut rng) };
        let (p, _) = gen_panorama(&sp, &gp, 64, 32).unwrap();
        assert!((16..32).all(|r| (0..64).all(|c| p.get(r, c) == [0.0; 3])));
    }

    #[test]
    fn uniform_sky_gives_albedo_times_radiance() {
        let (w, h) = (128, 64);
        let sky = HdrPanorama::from_fn(w, h, |r, _| if r < h / 2 { [2.0; 3] } else { [0.0; 3] }).unwrap();
        let p = shade_scene(&sky, &open_ground(0.3)).unwrap();
        for r in h / 2..h {
            for c in [0, 31, 64] {
                let v = p.get(r, c)[0];
                assert!((v - 0.6).abs() < 0.02 * 0.6, "row {r}: {v}");
            }
        }
    }

    #[test]
    fn buildings_avoid_the_sun_and_cast_shadows() {
        let gp = GroundParams { albedo: [0.3; 3], layout_seed: 17, occluder_count: 6 };
        let sky_line = gp.skyline(128, 64);
        let c0 = center_col(128);
        for dc in -8i32..=8 {
            assert_eq!(sky_line[(c0 as i32 + dc) as usize], 0.0);
        }
        assert!(sky_line.iter().any(|e| *e > 0.0));
        // a box on the ground darkens the point right next to it
        let b = Occluder { center: [0.0, -3.0], half_size: [1.0, 1.0], height: 3.0 };
        let sky = HdrPanorama::from_fn(64, 32, |r, _| if r < 16 { [1.0; 3] } else { [0.0; 3] }).unwrap();
        let s = SkySamples::new(&sky);
        let near = s.irradiance([0.0, 0.0, -1.9], [0.0, 1.0, 0.0], &[b]);
        let free = s.irradiance([0.0, 0.0, -1.9], [0.0, 1.0, 0.0], &[]);
        assert!(near[0] < 0.8 * free[0]);
    }

    #[test]
    fn slab_test_against_bruteforce_march() {
        let b = Occluder { center: [2.0, 5.0], half_size: [1.0, 1.5], height: 2.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let o = [rng.random_range(-3.0..3.0), rng.random_range(0.1..3.0), rng.random_range(-3.0..3.0)];
            let d = {
                let v = [rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.6), rng.random_range(-1.0..1.0f64)];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                [v[0] / n, v[1] / n, v[2] / n]
            };
            let inside = |p: [f64; 3]| {
                (p[0] - 2.0).abs() <= 1.0 && (p[2] - 5.0).abs() <= 1.5 && p[1] >= 0.0 && p[1] <= 2.0
            };
            let marched = (0..4000).map(|i| i as f64 * 0.005).find(|t| inside([o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]]));
            let hit = b.hit(o, d).map(|h| h.0);
            match (marched, hit) {
                (Some(m), Some(t)) => assert!((m - t).abs() < 0.01, "{m} vs {t}"),
                (None, None) => {}
                (m, t) => {
                    // grazing hits may slip between march steps
                    let t = t.or(m).unwrap();
                    let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
                    let dist_to_edge = [(p[0] - 2.0).abs() - 1.0, (p[2] - 5.0).abs() - 1.5, p[1] - 2.0, -p[1]]
                        .iter()
                        .fold(f64::NEG_INFINITY, |a, b| a.max(*b));
                    assert!(dist_to_edge.abs() < 0.02 || t > 19.9, "{m:?} vs hit");
                }
            }
            if hit.is_some() && d[1] > 0.0 {
                assert!(b.may_block(o, d), "prefilter rejected a hit");
            }
        }
    }

    #[test]
    fn sun_lands_on_center_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let sp = SkyParams::sample(&mut rng);
            let gp = GroundParams::sample(&mut rng);
            let (p, sun) = gen_panorama(&sp, &gp, 128, 64).unwrap();
            assert_eq!(sun.pixel_col, center_col(128));
            assert!(sun.azimuth.abs() <= PI / 128.0 + 1e-12);
            let brightest = (0..64 * 128).max_by(|&a, &b| p.get(a / 128, a % 128)[0].total_cmp(&p.get(b / 128, b % 128)[0])).unwrap();
            assert_eq!((brightest / 128, brightest % 128), (sun.pixel_row, sun.pixel_col));
        }
    }

    #[test]
    fn detected_sun_matches_ground_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut worst: f64 = 0.0;
        for _ in 0..40 {
            let sp = SkyParams::sample(&mut rng);
            let gp = GroundParams::sample(&mut rng);
            let (p, sun) = gen_panorama(&sp, &gp, 128, 64).unwrap();
            let k = super::super::auto_exposure(&p, super::super::WbShift::default());
            let ldr = quantize_ldr(&p.try_map(|v| v * k / 1.75).unwrap());
            let det = detect_sun(&ldr, crate::sun::DEFAULT_SATURATION_THRESHOLD).unwrap();
            let dc = (det.col - sun.col).abs();
            let err = (det.row - sun.row).hypot(dc.min(128.0 - dc));
            worst = worst.max(err);
        }
        assert!(worst <= 2.0, "worst detection error {worst} px");
    }
}
