//! Sun localisation in LDR panoramas and azimuthal centering.
//!
//! The sun is the solid-angle weighted centroid of the largest saturated
//! region. Regions are 4-connected and wrap across the azimuth seam.

use std::collections::VecDeque;
use std::f64::consts::{FRAC_PI_2, PI, TAU};

use thiserror::Error;

use crate::pano::geometry::{center_col, solid_angle};
use crate::pano::LdrPanorama;

pub const DEFAULT_SATURATION_THRESHOLD: u8 = 254;

#[derive(Debug, Error, PartialEq)]
pub enum SunError {
    #[error("no sun found: no pixel has all channels >= {threshold}")]
    NoSun { threshold: u8 },
    #[error("saturation threshold must be in [1, 255], got {0}")]
    BadThreshold(u8),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SunPosition {
    /// Radians in `[−π/2, π/2]`.
    pub elevation: f64,
    /// Radians in `(−π, π]`.
    pub azimuth: f64,
    /// Fractional pixel coordinates of the centroid.
    pub row: f64,
    pub col: f64,
    pub pixel_row: usize,
    pub pixel_col: usize,
}

impl SunPosition {
    /// Position at the given fractional pixel coordinates.
    pub fn from_pixel_coords(row: f64, col: f64, width: usize, height: usize) -> Self {
        let w = width as f64;
        let col = (col + 0.5).rem_euclid(w) - 0.5;
        let elevation = FRAC_PI_2 - PI * (row + 0.5) / height as f64;
        let azimuth = wrap_angle(TAU * (col + 0.5) / w - PI);
        let pixel_row = row.round().clamp(0.0, height as f64 - 1.0) as usize;
        let pixel_col = (col.round() as isize).rem_euclid(width as isize) as usize;
        Self { elevation, azimuth, row, col, pixel_row, pixel_col }
    }

    /// Position of a known direction, e.g. analytic ground truth.
    pub fn from_angles(elevation: f64, azimuth: f64, width: usize, height: usize) -> Self {
        let row = crate::pano::geometry::row_of_elevation(elevation, height);
        let col = crate::pano::geometry::col_of_azimuth(azimuth, width);
        let mut s = Self::from_pixel_coords(row, col, width, height);
        s.elevation = elevation;
        s.azimuth = wrap_angle(azimuth);
        s
    }

    /// Same sun after `rotate_azimuth(shift)`.
    pub fn shifted(&self, shift: isize, width: usize) -> Self {
        let w = width as isize;
        let mut s = *self;
        s.col = (self.col + shift as f64 + 0.5).rem_euclid(width as f64) - 0.5;
        s.pixel_col = (self.pixel_col as isize + shift).rem_euclid(w) as usize;
        s.azimuth = wrap_angle(self.azimuth + TAU * shift as f64 / width as f64);
        s
    }

    /// Same sun after `hflip`.
    pub fn flipped(&self, width: usize) -> Self {
        let mut s = *self;
        s.col = width as f64 - 1.0 - self.col;
        s.pixel_col = width - 1 - self.pixel_col;
        s.azimuth = wrap_angle(-self.azimuth);
        s
    }
}

/// Wraps into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(TAU) - PI;
    if r <= -PI {
        r + TAU
    } else {
        r
    }
}

struct Component {
    area: f64,
    /// `(row, col)` pixels.
    pixels: Vec<(usize, usize)>,
}

fn components(mask: &[bool], width: usize, height: usize) -> Vec<Component> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Component { area: 0.0, pixels: Vec::new() };
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / width, i % width);
            comp.area += solid_angle(r, width, height);
            comp.pixels.push((r, c));
            let mut visit = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            visit(r * width + (c + 1) % width);
            visit(r * width + (c + width - 1) % width);
            if r > 0 {
                visit((r - 1) * width + c);
            }
            if r + 1 < height {
                visit((r + 1) * width + c);
            }
        }
        out.push(comp);
    }
    out
}

/// Centroid in pixel coordinates, weighted by per-row solid angle.
///
/// Columns are measured as offsets from the first column of the region's
/// circular extent, so the result commutes exactly with integer azimuth
/// shifts. Regions spanning every column fall back to a circular mean.
fn centroid(comp: &Component, width: usize, height: usize) -> (f64, f64, usize) {
    let mut occupied = vec![false; width];
    for &(_, c) in &comp.pixels {
        occupied[c] = true;
    }
    let start = (0..width).find(|&c| occupied[c] && !occupied[(c + width - 1) % width]);
    let weight = |r: usize| solid_angle(r, width, height);
    match start {
        Some(start) => {
            let mut rel: Vec<(usize, usize)> =
                comp.pixels.iter().map(|&(r, c)| (r, (c + width - start) % width)).collect();
            rel.sort_unstable();
            let (mut sw, mut sr, mut so) = (0.0, 0.0, 0.0);
            for &(r, o) in &rel {
                let w = weight(r);
                sw += w;
                sr += w * r as f64;
                so += w * o as f64;
            }
            let off = so / sw;
            let pixel_col = (start + off.round() as usize) % width;
            (sr / sw, start as f64 + off, pixel_col)
        }
        None => {
            let (mut sw, mut sr, mut sx, mut sy) = (0.0, 0.0, 0.0, 0.0);
            let mut pixels = comp.pixels.clone();
            pixels.sort_unstable();
            for &(r, c) in &pixels {
                let w = weight(r);
                let a = TAU * c as f64 / width as f64;
                sw += w;
                sr += w * r as f64;
                sx += w * a.cos();
                sy += w * a.sin();
            }
            let col = sy.atan2(sx).rem_euclid(TAU) * width as f64 / TAU;
            let pixel_col = (col.round() as usize) % width;
            (sr / sw, col, pixel_col)
        }
    }
}

pub fn detect_sun(p: &LdrPanorama, saturation_threshold: u8) -> Result<SunPosition, SunError> {
    if saturation_threshold == 0 {
        return Err(SunError::BadThreshold(saturation_threshold));
    }
    let (w, h) = (p.width(), p.height());
    let mask: Vec<bool> =
        p.data().chunks_exact(3).map(|px| px.iter().all(|&v| v >= saturation_threshold)).collect();
    let comps = components(&mask, w, h);
    // strict comparison keeps the first of equal-area regions
    let best = comps
        .iter()
        .fold(None::<&Component>, |acc, c| match acc {
            Some(b) if b.area >= c.area => Some(b),
            _ => Some(c),
        })
        .ok_or(SunError::NoSun { threshold: saturation_threshold })?;
    let (row, col, pixel_col) = centroid(best, w, h);
    let mut sun = SunPosition::from_pixel_coords(row, col, w, h);
    sun.pixel_col = pixel_col;
    Ok(sun)
}

/// Column shift that moves `sun` onto the center column, in `(−w/2, w/2]`.
pub fn centering_shift(sun: &SunPosition, width: usize) -> isize {
    let w = width as isize;
    let mut s = (center_col(width) as isize - sun.pixel_col as isize).rem_euclid(w);
    if s > w / 2 {
        s -= w;
    }
    s
}

/// Rotates the panorama so the detected sun sits in the center column.
pub fn align_sun_center(p: &LdrPanorama) -> Result<(LdrPanorama, SunPosition), SunError> {
    let sun = detect_sun(p, DEFAULT_SATURATION_THRESHOLD)?;
    let shift = centering_shift(&sun, p.width());
    Ok((p.rotate_azimuth(shift), sun.shifted(shift, p.width())))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Dark panorama with saturated disks of the given pixel radius.
    pub(crate) fn with_disks(w: usize, disks: &[(f64, f64, f64)]) -> LdrPanorama {
        let h = w / 2;
        LdrPanorama::from_fn(w, h, |r, c| {
            for &(dr, dc, rad) in disks {
                let mut dx = (c as f64 - dc).abs();
                dx = dx.min(w as f64 - dx);
                let dy = r as f64 - dr;
                if dx * dx + dy * dy <= rad * rad {
                    return [255, 255, 255];
                }
            }
            [40, 60, 90]
        })
        .unwrap()
    }

    /// Oracle: flood fill without wraparound, then merge labels that touch
    /// across the seam. Returns `(area in sr, pixel count)` per region.
    fn brute_force_areas(p: &LdrPanorama, thr: u8) -> Vec<(f64, usize)> {
        let (w, h) = (p.width(), p.height());
        let sat = |r: usize, c: usize| p.get(r, c).iter().all(|&v| v >= thr);
        let mut label = vec![usize::MAX; w * h];
        let mut next = 0;
        for r in 0..h {
            for c in 0..w {
                if !sat(r, c) || label[r * w + c] != usize::MAX {
                    continue;
                }
                let mut stack = vec![(r, c)];
                label[r * w + c] = next;
                while let Some((y, x)) = stack.pop() {
                    let mut n = vec![];
                    if x > 0 { n.push((y, x - 1)); }
                    if x + 1 < w { n.push((y, x + 1)); }
                    if y > 0 { n.push((y - 1, x)); }
                    if y + 1 < h { n.push((y + 1, x)); }
                    for (yy, xx) in n {
                        if sat(yy, xx) && label[yy * w + xx] == usize::MAX {
                            label[yy * w + xx] = next;
                            stack.push((yy, xx));
                        }
                    }
                }
                next += 1;
            }
        }
        // union across the seam
        let mut parent: Vec<usize> = (0..next).collect();
        fn find(p: &mut Vec<usize>, x: usize) -> usize {
            if p[x] != x {
                let r = find(p, p[x]);
                p[x] = r;
            }
            p[x]
        }
        for r in 0..h {
            let (a, b) = (label[r * w], label[r * w + w - 1]);
            if a != usize::MAX && b != usize::MAX {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                parent[ra] = rb;
            }
        }
        let mut acc = std::collections::BTreeMap::new();
        for r in 0..h {
            for c in 0..w {
                let l = label[r * w + c];
                if l != usize::MAX {
                    let root = find(&mut parent, l);
                    let e = acc.entry(root).or_insert((0.0, 0usize));
                    e.0 += solid_angle(r, w, h);
                    e.1 += 1;
                }
            }
        }
        acc.into_values().collect()
    }

    #[test]
    fn single_disk_is_found() {
        let p = with_disks(128, &[(20.0, 64.0, 3.0)]);
        let s = detect_sun(&p, 254).unwrap();
        assert_eq!((s.pixel_row, s.pixel_col), (20, 64));
        assert!((s.col - 64.0).abs() < 1e-9);
    }

    #[test]
    fn larger_disk_wins() {
        // ~50 px vs ~13 px
        let p = with_disks(128, &[(40.0, 20.0, 4.0), (20.0, 90.0, 2.0)]);
        let areas = brute_force_areas(&p, 254);
        assert_eq!(areas.len(), 2);
        let s = detect_sun(&p, 254).unwrap();
        assert_eq!((s.pixel_row, s.pixel_col), (40, 20));
        let big = areas.iter().map(|a| a.1).max().unwrap();
        assert!(big >= 45);
    }

    #[test]
    fn area_is_measured_in_steradians() {
        // a near-zenith blob with more pixels but less solid angle loses
        let mut p = with_disks(128, &[(32.0, 40.0, 2.0)]);
        for c in 0..30 {
            p.set(0, c, [255, 255, 255]);
        }
        let areas = brute_force_areas(&p, 254);
        let by_px = areas.iter().max_by_key(|a| a.1).unwrap();
        let by_sr = areas.iter().max_by(|a, b| a.0.total_cmp(&b.0)).unwrap();
        assert_ne!(by_px.1, by_sr.1);
        let s = detect_sun(&p, 254).unwrap();
        assert_eq!((s.pixel_row, s.pixel_col), (32, 40));
    }

    #[test]
    fn wrap_seam_is_one_region() {
        let p = with_disks(128, &[(25.0, 127.5, 3.0)]);
        assert_eq!(brute_force_areas(&p, 254).len(), 1);
        let s = detect_sun(&p, 254).unwrap();
        // oracle: detect after half a turn, map back
        let q = p.rotate_azimuth(64);
        let t = detect_sun(&q, 254).unwrap();
        let back = (t.col - 64.0 + 128.0).rem_euclid(128.0);
        let diff = (s.col - back + 64.0).rem_euclid(128.0) - 64.0;
        assert!(diff.abs() <= 1.0, "{} vs {}", s.col, back);
        assert!(s.pixel_col == 127 || s.pixel_col == 0);
    }

    #[test]
    fn no_sun_is_an_error() {
        let p = with_disks(32, &[]);
        assert_eq!(detect_sun(&p, 254), Err(SunError::NoSun { threshold: 254 }));
        assert_eq!(detect_sun(&p, 0), Err(SunError::BadThreshold(0)));
    }

    #[test]
    fn ring_component_falls_back_to_circular_mean() {
        let mut p = with_disks(32, &[]);
        for c in 0..32 {
            p.set(5, c, [255; 3]);
        }
        let s = detect_sun(&p, 254).unwrap();
        assert_eq!(s.pixel_row, 5);
    }

    #[test]
    fn centering_examples() {
        let p = with_disks(128, &[(20.0, 64.0, 3.0)]);
        let (q, s) = align_sun_center(&p).unwrap();
        assert_eq!(q, p);
        assert_eq!(s.pixel_col, 64);

        // φ = π/2 lands on the boundary between columns 95 and 96
        let p = with_disks(128, &[(20.0, 96.0, 2.0)]);
        let sun = detect_sun(&p, 254).unwrap();
        assert_eq!(centering_shift(&sun, 128), -32);
    }

    #[test]
    fn rotation_equivariance_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let disk = (rng.random_range(4.0..60.0), rng.random_range(0.0..128.0), rng.random_range(1.0..4.0));
            let p = with_disks(128, &[disk]);
            let base = detect_sun(&p, 254).unwrap();
            for s in [-70isize, -1, 1, 13, 64, 127] {
                let r = detect_sun(&p.rotate_azimuth(s), 254).unwrap();
                assert_eq!(r.pixel_col, (base.pixel_col as isize + s).rem_euclid(128) as usize);
                assert_eq!(r.pixel_row, base.pixel_row);
            }
        }
    }

    #[test]
    fn monotone_remap_keeps_the_answer() {
        let p = with_disks(64, &[(10.0, 30.0, 2.5)]);
        let remapped = LdrPanorama::from_fn(64, 32, |r, c| {
            let px = p.get(r, c);
            px.map(|v| if v >= 254 { v } else { ((v as f64 / 253.0).powf(0.5) * 200.0) as u8 })
        })
        .unwrap();
        assert_eq!(detect_sun(&p, 254).unwrap(), detect_sun(&remapped, 254).unwrap());
    }

    #[test]
    fn random_placements_center_within_a_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let disk = (rng.random_range(3.0..30.0), rng.random_range(0.0..128.0), rng.random_range(1.0..3.5));
            let (q, s) = align_sun_center(&with_disks(128, &[disk])).unwrap();
            let again = detect_sun(&q, 254).unwrap();
            assert!(again.azimuth.abs() <= TAU / 128.0 + 1e-12, "{}", again.azimuth);
            assert_eq!(again.pixel_col, s.pixel_col);
        }
    }
}
