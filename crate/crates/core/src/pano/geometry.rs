//! Lat-long spherical geometry.
//!
//! World frame is y-up. Pixel centers sit at half-integer offsets:
//! elevation `θ = π/2 − π(row+0.5)/height`, azimuth
//! `φ = 2π(col+0.5)/width − π`, and the unit direction is
//! `(cosθ·sinφ, sinθ, cosθ·cosφ)`, so `φ = 0` looks down `+z`.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

/// Column whose center is the first one right of `φ = 0`; the sun is
/// parked here by the centering convention.
pub fn center_col(width: usize) -> usize {
    width / 2
}

#[inline]
pub fn elevation_of_row(row: usize, height: usize) -> f64 {
    FRAC_PI_2 - PI * (row as f64 + 0.5) / height as f64
}

#[inline]
pub fn azimuth_of_col(col: usize, width: usize) -> f64 {
    TAU * (col as f64 + 0.5) / width as f64 - PI
}

#[inline]
pub fn direction_from_angles(elevation: f64, azimuth: f64) -> [f64; 3] {
    let (se, ce) = elevation.sin_cos();
    let (sa, ca) = azimuth.sin_cos();
    [ce * sa, se, ce * ca]
}

/// Unit direction through the center of a pixel.
pub fn direction_of_pixel(row: usize, col: usize, width: usize, height: usize) -> [f64; 3] {
    debug_assert!(row < height && col < width);
    direction_from_angles(elevation_of_row(row, height), azimuth_of_col(col, width))
}

/// Steradian footprint of any pixel in `row`.
#[inline]
pub fn solid_angle(row: usize, width: usize, height: usize) -> f64 {
    (TAU / width as f64) * (PI / height as f64) * elevation_of_row(row, height).cos()
}

/// `(elevation, azimuth)` of a direction; azimuth in `(−π, π]`.
pub fn angles_of_direction(d: [f64; 3]) -> (f64, f64) {
    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    let el = (d[1] / n).clamp(-1.0, 1.0).asin();
    let az = d[0].atan2(d[2]);
    (el, az)
}

/// Fractional row coordinate (pixel centers at integers).
#[inline]
pub fn row_of_elevation(elevation: f64, height: usize) -> f64 {
    (FRAC_PI_2 - elevation) * height as f64 / PI - 0.5
}

/// Fractional column coordinate wrapped into `[−0.5, width − 0.5)`.
#[inline]
pub fn col_of_azimuth(azimuth: f64, width: usize) -> f64 {
    let w = width as f64;
    let c = (azimuth + PI) * w / TAU - 0.5;
    (c + 0.5).rem_euclid(w) - 0.5
}

/// Pixel containing a direction.
pub fn pixel_of_direction(d: [f64; 3], width: usize, height: usize) -> (usize, usize) {
    let (el, az) = angles_of_direction(d);
    pixel_of_angles(el, az, width, height)
}

pub fn pixel_of_angles(elevation: f64, azimuth: f64, width: usize, height: usize) -> (usize, usize) {
    let r = row_of_elevation(elevation, height).round().clamp(0.0, height as f64 - 1.0) as usize;
    let c = (col_of_azimuth(azimuth, width).round() as isize).rem_euclid(width as isize) as usize;
    (r, c)
}
