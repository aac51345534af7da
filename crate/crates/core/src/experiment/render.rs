//! Binary PGM/PPM renders.
//!
//! Dose renders map `[0, 1.25]` prescription units linearly to gray
//! `0..=255`, clipping outside that range. Difference renders map
//! `[−0.5, 0.5]` to a blue–white–red ramp: white at zero, pure red at +0.5
//! (overdose) and pure blue at −0.5.

use crate::phantom::D_MAX_SCALE;

/// Half-width of the difference colour ramp, in prescription units.
pub const DIFF_RANGE: f64 = 0.5;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dose_pgm(height: usize, width: usize, dose: &[f64]) -> Vec<u8> {
    assert_eq!(dose.len(), height * width);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(dose.iter().map(|&d| to_byte(d / D_MAX_SCALE)));
    out
}

pub fn diff_ppm(height: usize, width: usize, diff: &[f64]) -> Vec<u8> {
    assert_eq!(diff.len(), height * width);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for &d in diff {
        let v = (d / DIFF_RANGE).clamp(-1.0, 1.0);
        out.extend([to_byte(1.0 + v.min(0.0)), to_byte(1.0 - v.abs()), to_byte(1.0 - v.max(0.0))]);
    }
    out
}
