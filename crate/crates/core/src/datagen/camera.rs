//! Camera model: exposure, hue/saturation shift, response curve, 8 bits.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::DatagenError;
use crate::pano::{expose, quantize_value, HdrPanorama, LdrPanorama};
use crate::Real;

/// Standard deviations of the random hue (degrees) and saturation shifts.
pub const HUE_SHIFT_STD: f64 = 10.0;
pub const SAT_SHIFT_STD: f64 = 0.1;

/// Monotone camera response mapping `[0, 1]` onto `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CrfParams {
    /// `x^(1/g)`; `g = 1` is the identity.
    Gamma { g: f64 },
    /// Logistic shoulder and toe applied after `x^(1/g)`, renormalized so
    /// that 0 and 1 are fixed.
    Sigmoid { g: f64, strength: f64, midpoint: f64 },
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl CrfParams {
    pub const IDENTITY: Self = Self::Gamma { g: 1.0 };

    pub fn family(&self) -> &'static str {
        match self {
            Self::Gamma { .. } => "gamma",
            Self::Sigmoid { .. } => "sigmoid",
        }
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        let ok = match *self {
            Self::Gamma { g } => g > 0.0 && g.is_finite(),
            Self::Sigmoid { g, strength, midpoint } => {
                g > 0.0 && g.is_finite() && strength > 0.0 && strength.is_finite() && (0.0..=1.0).contains(&midpoint)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(DatagenError::Params(format!("invalid response curve {self:?}")))
        }
    }

    /// Gamma in `[1.8, 2.6]`, half of the curves with an S-shaped tone.
    pub fn sample(rng: &mut impl Rng) -> Self {
        let g = rng.random_range(1.8..2.6);
        if rng.random_bool(0.5) {
            Self::Gamma { g }
        } else {
            Self::Sigmoid { g, strength: rng.random_range(2.0..6.0), midpoint: rng.random_range(0.35..0.65) }
        }
    }

    fn sigmoid_ends(strength: f64, midpoint: f64) -> (f64, f64) {
        (logistic(-strength * midpoint), logistic(strength * (1.0 - midpoint)))
    }

    /// Response of a linear value; input is clamped to `[0, 1]`.
    pub fn apply(&self, x: f64) -> f64 {
        let x = x.clamp(0.0, 1.0);
        match *self {
            Self::Gamma { g } => x.powf(1.0 / g),
            Self::Sigmoid { g, strength, midpoint } => {
                let (a, b) = Self::sigmoid_ends(strength, midpoint);
                let y = (logistic(strength * (x.powf(1.0 / g) - midpoint)) - a) / (b - a);
                y.clamp(0.0, 1.0)
            }
        }
    }

    /// Closed-form inverse on `[0, 1]`.
    pub fn invert(&self, y: f64) -> f64 {
        let y = y.clamp(0.0, 1.0);
        match *self {
            Self::Gamma { g } => y.powf(g),
            Self::Sigmoid { g, strength, midpoint } => {
                let (a, b) = Self::sigmoid_ends(strength, midpoint);
                let u = (a + y * (b - a)).clamp(a, b);
                let z = (midpoint + (u / (1.0 - u)).ln() / strength).clamp(0.0, 1.0);
                z.powf(g)
            }
        }
    }
}

impl fmt::Display for CrfParams {
    /// `gamma:<g>` or `sigmoid:<g>:<strength>:<midpoint>`, round-trippable.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Gamma { g } => write!(f, "gamma:{g:?}"),
            Self::Sigmoid { g, strength, midpoint } => write!(f, "sigmoid:{g:?}:{strength:?}:{midpoint:?}"),
        }
    }
}

impl FromStr for CrfParams {
    type Err = DatagenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DatagenError::Params(format!("cannot parse response curve {s:?}"));
        let mut parts = s.split(':');
        let family = parts.next().ok_or_else(bad)?;
        let nums: Vec<f64> = parts.map(|p| p.parse().map_err(|_| bad())).collect::<Result<_, _>>()?;
        let crf = match (family, nums.as_slice()) {
            ("gamma", [g]) => Self::Gamma { g: *g },
            ("sigmoid", [g, strength, midpoint]) => Self::Sigmoid { g: *g, strength: *strength, midpoint: *midpoint },
            _ => return Err(bad()),
        };
        crf.validate()?;
        Ok(crf)
    }
}

/// Additive hue (degrees) and saturation shift.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WbShift {
    pub hue: f64,
    pub saturation: f64,
}

impl WbShift {
    pub fn sample(rng: &mut impl Rng) -> Self {
        let hue = Normal::new(0.0, HUE_SHIFT_STD).expect("finite std");
        let sat = Normal::new(0.0, SAT_SHIFT_STD).expect("finite std");
        Self { hue: hue.sample(rng), saturation: sat.sample(rng) }
    }

    pub fn is_zero(&self) -> bool {
        self.hue == 0.0 && self.saturation == 0.0
    }
}

/// RGB to (hue degrees in `[0, 360)`, saturation, value). Works for values above 1.
pub fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d <= 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max > 0.0 { d / max } else { 0.0 };
    [h, s, max]
}

pub fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h.rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

/// Shifts hue with wraparound and saturation with clamping to `[0, 1]`.
pub fn shift_hsv(rgb: [f64; 3], shift: WbShift) -> [f64; 3] {
    if shift.is_zero() {
        return rgb;
    }
    let [h, s, v] = rgb_to_hsv(rgb);
    hsv_to_rgb([(h + shift.hue).rem_euclid(360.0), (s + shift.saturation).clamp(0.0, 1.0), v])
}

/// Linear radiance to 8-bit codes: expose, shift hue and saturation,
/// clamp, apply the response, quantize.
pub fn derive_ldr<S: Real>(p: &HdrPanorama<S>, exposure: f64, crf: &CrfParams, shift: WbShift) -> Result<LdrPanorama, DatagenError> {
    crf.validate()?;
    let exposed = expose(p, exposure)?;
    let mut codes = Vec::with_capacity(exposed.data().len());
    for px in exposed.data().chunks_exact(3) {
        let rgb = shift_hsv([px[0].f64(), px[1].f64(), px[2].f64()], shift);
        codes.extend(rgb.iter().map(|v| quantize_value(crf.apply(v.clamp(0.0, 1.0)))));
    }
    Ok(LdrPanorama::from_data(p.width(), p.height(), codes)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinearizeMode {
    /// Codes over 255.
    Jpg,
    /// Codes over 255 raised to 2.2.
    Gamma22,
    /// Inverse of the calibrated response.
    Rf,
    /// Inverse response followed by per-channel white-balance gains.
    RfWb,
}

impl FromStr for LinearizeMode {
    type Err = DatagenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jpg" => Ok(Self::Jpg),
            "gamma22" => Ok(Self::Gamma22),
            "rf" => Ok(Self::Rf),
            "rf_wb" => Ok(Self::RfWb),
            _ => Err(DatagenError::Params(format!("unknown linearization mode {s:?} (expected jpg, gamma22, rf, rf_wb)"))),
        }
    }
}

impl fmt::Display for LinearizeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Jpg => "jpg",
            Self::Gamma22 => "gamma22",
            Self::Rf => "rf",
            Self::RfWb => "rf_wb",
        })
    }
}

/// Known camera of an image: its response and diagonal white balance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Calibration {
    pub crf: CrfParams,
    pub wb_gains: [f64; 3],
}

impl Calibration {
    pub fn new(crf: CrfParams) -> Self {
        Self { crf, wb_gains: [1.0; 3] }
    }
}

/// Float image in `[0, 1]` (up to white-balance gains) from 8-bit codes.
pub fn linearize_input(ldr: &LdrPanorama, mode: LinearizeMode, calib: Option<&Calibration>) -> Result<HdrPanorama<f64>, DatagenError> {
    let need = || DatagenError::Params(format!("mode {mode} needs a calibration"));
    let table: [[f64; 256]; 3] = match mode {
        LinearizeMode::Jpg => [std::array::from_fn(|c| c as f64 / 255.0); 3],
        LinearizeMode::Gamma22 => [std::array::from_fn(|c| (c as f64 / 255.0).powf(2.2)); 3],
        LinearizeMode::Rf | LinearizeMode::RfWb => {
            let cal = calib.ok_or_else(need)?;
            cal.crf.validate()?;
            let gains = if mode == LinearizeMode::RfWb { cal.wb_gains } else { [1.0; 3] };
            if !gains.iter().all(|g| *g > 0.0 && g.is_finite()) {
                return Err(DatagenError::Params(format!("white-balance gains {gains:?} must be positive")));
            }
            std::array::from_fn(|k| std::array::from_fn(|c| gains[k] * cal.crf.invert(c as f64 / 255.0)))
        }
    };
    let data = ldr.data().iter().enumerate().map(|(i, &c)| table[i % 3][c as usize]).collect();
    Ok(HdrPanorama::from_data(ldr.width(), ldr.height(), data)?)
}

/// Least-squares diagonal gains taking `observed` onto `reference` over
/// pixels where both are strictly inside `(0, 1)`.
pub fn fit_wb_gains(observed: &HdrPanorama<f64>, reference: &HdrPanorama<f64>) -> Result<[f64; 3], DatagenError> {
    if observed.width() != reference.width() || observed.height() != reference.height() {
        return Err(DatagenError::Params("white-balance fit needs equally sized images".into()));
    }
    let mut num = [0.0; 3];
    let mut den = [0.0; 3];
    let inside = |v: f64| v > 0.0 && v < 1.0;
    for (o, r) in observed.data().chunks_exact(3).zip(reference.data().chunks_exact(3)) {
        if o.iter().chain(r).all(|v| inside(*v)) {
            for k in 0..3 {
                num[k] += o[k] * r[k];
                den[k] += o[k] * o[k];
            }
        }
    }
    Ok(std::array::from_fn(|k| if den[k] > 0.0 { num[k] / den[k] } else { 1.0 }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn curves() -> Vec<CrfParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut v: Vec<_> = (0..40).map(|_| CrfParams::sample(&mut rng)).collect();
        v.push(CrfParams::IDENTITY);
        v.push(CrfParams::Sigmoid { g: 2.6, strength: 6.0, midpoint: 0.35 });
        v.push(CrfParams::Sigmoid { g: 1.8, strength: 6.0, midpoint: 0.65 });
        v
    }

    #[test]
    fn curves_fix_endpoints_and_increase() {
        for crf in curves() {
            assert!(crf.apply(0.0).abs() < 1e-12 && (crf.apply(1.0) - 1.0).abs() < 1e-12, "{crf}");
            let ys: Vec<f64> = (0..=1000).map(|i| crf.apply(i as f64 / 1000.0)).collect();
            assert!(ys.windows(2).all(|w| w[1] > w[0]), "{crf} not increasing");
            for i in 1..100 {
                let x = i as f64 / 100.0;
                assert!((crf.invert(crf.apply(x)) - x).abs() < 1e-9, "{crf} at {x}");
            }
        }
    }

    #[test]
    fn crf_text_round_trips() {
        for crf in curves() {
            assert_eq!(crf.to_string().parse::<CrfParams>().unwrap(), crf);
        }
        assert!("gamma:-1".parse::<CrfParams>().is_err());
        assert!("spline:1".parse::<CrfParams>().is_err());
    }

    #[test]
    fn identity_camera_is_pure_quantization() {
        let p = HdrPanorama::from_fn(16, 8, |r, c| [r as f64 / 7.0, c as f64 / 15.0, 0.5]).unwrap();
        let l = derive_ldr(&p, 1.0, &CrfParams::IDENTITY, WbShift::default()).unwrap();
        assert_eq!(l, crate::pano::quantize_ldr(&p));
    }

    #[test]
    fn full_turn_of_hue_is_no_shift() {
        let p = HdrPanorama::from_fn(16, 8, |r, c| [r as f64 / 9.0, c as f64 / 20.0, 0.3]).unwrap();
        let crf = CrfParams::Gamma { g: 2.2 };
        let a = derive_ldr(&p, 1.2, &crf, WbShift { hue: 360.0, saturation: 0.05 }).unwrap();
        let b = derive_ldr(&p, 1.2, &crf, WbShift { hue: 0.0, saturation: 0.05 }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hsv_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let rgb = [rng.random_range(0.0..3.0), rng.random_range(0.0..3.0), rng.random_range(0.0..3.0)];
            let back = hsv_to_rgb(rgb_to_hsv(rgb));
            for k in 0..3 {
                assert!((back[k] - rgb[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linearize_fixed_modes() {
        let l = LdrPanorama::from_data(2, 1, vec![128, 255, 0, 255, 255, 255]).unwrap();
        let j = linearize_input(&l, LinearizeMode::Jpg, None).unwrap();
        assert_eq!(j.data()[0], 128.0 / 255.0);
        let g = linearize_input(&l, LinearizeMode::Gamma22, None).unwrap();
        assert_eq!(g.data()[1], 1.0);
        assert!(linearize_input(&l, LinearizeMode::Rf, None).is_err());
    }

    #[test]
    fn inverse_response_recovers_unclipped_values() {
        // quantization error of the codes is 1/510, magnified by the inverse
        // slope; it stays within 1/255 wherever the response slope is at least
        // 0.5 throughout the neighbourhood
        for crf in curves() {
            let p = HdrPanorama::from_fn(512, 256, |r, c| {
                let x = (r * 512 + c) as f64 / (512.0 * 256.0);
                [x, x, x]
            })
            .unwrap();
            let l = derive_ldr(&p, 1.0, &crf, WbShift::default()).unwrap();
            let lin = linearize_input(&l, LinearizeMode::Rf, Some(&Calibration::new(crf))).unwrap();
            for (x, y) in p.data().iter().zip(lin.data()).step_by(3) {
                let slope = |x: f64| (crf.apply((x + 1e-6).min(1.0)) - crf.apply((x - 1e-6).max(0.0))) / 2e-6;
                let steep = [-1.0, 0.0, 1.0].iter().all(|d| slope(x + d / 255.0) >= 0.5);
                if *x < 1.0 && steep {
                    assert!((x - y).abs() <= 1.0 / 255.0, "{crf}: {x} -> {y}");
                }
            }
        }
    }

    #[test]
    fn white_balance_fit_recovers_planted_gains() {
        let gains = [1.2, 0.9, 0.7];
        let refp = HdrPanorama::from_fn(32, 16, |r, c| [0.1 + r as f64 / 40.0, 0.2 + c as f64 / 80.0, 0.3]).unwrap();
        let obs = HdrPanorama::from_fn(32, 16, |r, c| {
            let v = refp.get(r, c);
            [v[0] / gains[0], v[1] / gains[1], v[2] / gains[2]]
        })
        .unwrap();
        let g = fit_wb_gains(&obs, &refp).unwrap();
        for k in 0..3 {
            assert!((g[k] - gains[k]).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn response_preserves_gray_order(a in 0.0f64..1.0, b in 0.0f64..1.0, which in 0usize..43) {
            let crf = curves()[which];
            let p = HdrPanorama::from_data(2, 1, vec![a, a, a, b, b, b]).unwrap();
            let l = derive_ldr(&p, 1.0, &crf, WbShift::default()).unwrap();
            let (ca, cb) = (l.data()[0], l.data()[3]);
            if a < b { prop_assert!(ca <= cb) } else { prop_assert!(ca >= cb) }
        }
    }
}
