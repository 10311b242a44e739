//! Fixed colour ramp for disparity and error images.

use srstereo_core::ScalarField;

/// Ramp stops: dark blue, cyan, green, yellow, red.
const STOPS: [[f64; 3]; 5] =
    [[0.0, 0.0, 0.5], [0.0, 0.8, 1.0], [0.1, 0.8, 0.1], [1.0, 0.9, 0.0], [0.8, 0.0, 0.0]];

/// Colour of `v` on the ramp spanning `[lo, hi]` (clamped outside).
pub fn ramp(v: f64, lo: f64, hi: f64) -> [u8; 3] {
    let t = if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.0 };
    let pos = t * (STOPS.len() - 1) as f64;
    let k = (pos.floor() as usize).min(STOPS.len() - 2);
    let f = pos - k as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        let x = STOPS[k][c] * (1.0 - f) + STOPS[k + 1][c] * f;
        out[c] = (x * 255.0).round() as u8;
    }
    out
}

/// Interleaved RGB bytes of a field; invalid pixels are black.
pub fn colorize(field: &ScalarField, lo: f64, hi: f64) -> Vec<u8> {
    let mut rgb = Vec::with_capacity(3 * field.values.len());
    for (&v, &ok) in field.values.as_slice().iter().zip(field.valid.as_slice()) {
        rgb.extend_from_slice(&if ok { ramp(v, lo, hi) } else { [0, 0, 0] });
    }
    rgb
}
