//! Closed-form scalar and field operations: clipping, clip-balanced losses,
//! Prewitt gradients and bilinear resampling.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{ensure, Result};
use crate::field::{Grid, ScalarField};

/// Upper bound of the clip-balanced weight.
pub const BALANCED_WEIGHT_CAP: f64 = 1.5;

/// The per-unit clip range hyperparameter `m` (disparity px, quarter
/// resolution). Always strictly positive.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct ClipBound(f64);

impl ClipBound {
    pub fn new(m: f64) -> Result<Self> {
        ensure!(m.is_finite() && m > 0.0, Contract, "clip bound m must be > 0, got {m}");
        Ok(Self(m))
    }

    pub fn get(self) -> f64 {
        self.0
    }

    /// Largest quarter-resolution clip magnitude, `1.5 m`.
    pub fn quarter_limit(self) -> f64 {
        1.5 * self.0
    }

    /// Largest float strictly below [`Self::quarter_limit`]. Saturated
    /// `tanh` and sigmoid values round to exactly 1, so the unit output is
    /// clamped here to keep the bound strict.
    pub fn open_quarter_limit(self) -> f64 {
        let l = self.quarter_limit();
        f64::from_bits(l.to_bits() - 1)
    }

    /// Full-resolution segment limit, `4 * 1.5 m = 6 m`.
    pub fn full_limit(self) -> f64 {
        6.0 * self.0
    }
}

#[inline]
pub fn clip_scalar(x: f64, limit: f64) -> f64 {
    x.clamp(-limit, limit)
}

/// Elementwise clamp to `[-limit, limit]`.
pub fn clip_symmetric(x: &ScalarField, limit: f64) -> Result<ScalarField> {
    ensure!(limit > 0.0, Contract, "clip limit must be > 0, got {limit}");
    Ok(x.map(|v| clip_scalar(v, limit)))
}

/// `clip(|x|^-h, 0, 1.5)`. `h = 0` is the constant 1; `x = 0` with
/// `h > 0` takes the cap.
#[inline]
pub fn balanced_weight(x: f64, h: f64) -> f64 {
    if h == 0.0 {
        return 1.0;
    }
    let a = x.abs();
    if a == 0.0 {
        return BALANCED_WEIGHT_CAP;
    }
    libm::pow(a, -h).min(BALANCED_WEIGHT_CAP)
}

/// d/dx of [`balanced_weight`]; zero wherever the cap is active.
#[inline]
fn balanced_weight_grad(x: f64, h: f64) -> f64 {
    let a = x.abs();
    if h == 0.0 || a == 0.0 {
        return 0.0;
    }
    let p = libm::pow(a, -h);
    if p >= BALANCED_WEIGHT_CAP {
        0.0
    } else {
        -h * p / a * x.signum()
    }
}

#[inline]
pub fn cb_l1(x: f64, h: f64) -> f64 {
    balanced_weight(x, h) * x.abs()
}

#[inline]
pub fn cb_l1_grad(x: f64, h: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    balanced_weight_grad(x, h) * x.abs() + balanced_weight(x, h) * x.signum()
}

/// Clip-balanced Smooth-L1: the weight times `0.5 x^2` for `|x| < 1`,
/// times `|x| - 0.5` otherwise. `h = 0` is the standard Smooth-L1.
#[inline]
pub fn cb_smooth_l1(x: f64, h: f64) -> f64 {
    balanced_weight(x, h) * smooth_l1_base(x)
}

#[inline]
pub fn cb_smooth_l1_grad(x: f64, h: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let (base, dbase) = if x.abs() < 1.0 { (0.5 * x * x, x) } else { (x.abs() - 0.5, x.signum()) };
    balanced_weight_grad(x, h) * base + balanced_weight(x, h) * dbase
}

#[inline]
fn smooth_l1_base(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Prewitt responses `(gx, gy)` of a row-major plane with replicate borders.
/// `gx` uses `[[-1,0,1],[-1,0,1],[-1,0,1]]`, `gy` its transpose.
pub(crate) fn prewitt_components(v: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h {
        let ys = [y.saturating_sub(1), y, (y + 1).min(h - 1)];
        for x in 0..w {
            let xs = [x.saturating_sub(1), x, (x + 1).min(w - 1)];
            let mut sx = 0.0;
            let mut sy = 0.0;
            for k in 0..3 {
                sx += v[ys[k] * w + xs[2]] - v[ys[k] * w + xs[0]];
                sy += v[ys[2] * w + xs[k]] - v[ys[0] * w + xs[k]];
            }
            gx[y * w + x] = sx;
            gy[y * w + x] = sy;
        }
    }
    (gx, gy)
}

/// `sqrt(gx^2 + gy^2)` of the 3x3 Prewitt responses, replicate padding.
pub fn prewitt_magnitude(d: &ScalarField) -> Result<Grid<f64>> {
    let (h, w) = d.dims();
    ensure!(h >= 3 && w >= 3, Contract, "Prewitt needs at least 3x3, got {h}x{w}");
    let (gx, gy) = prewitt_components(d.values.as_slice(), h, w);
    let mag = gx.iter().zip(&gy).map(|(a, b)| libm::sqrt(a * a + b * b)).collect();
    Ok(Grid::from_vec(h, w, mag))
}

/// Linear-interpolation taps along one axis, half-pixel (align-corners
/// false) convention, clamped at the ends.
#[derive(Clone, Debug)]
pub(crate) struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    /// Weight of `hi`; `lo` gets `1 - frac`.
    pub frac: Vec<f64>,
}

impl AxisTaps {
    pub fn new(n_in: usize, n_out: usize) -> Self {
        let ratio = n_in as f64 / n_out as f64;
        let mut taps = AxisTaps { lo: vec![], hi: vec![], frac: vec![] };
        for i in 0..n_out {
            let src = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = libm::floor(src) as usize;
            let hi = (lo + 1).min(n_in - 1);
            taps.lo.push(lo);
            taps.hi.push(hi);
            taps.frac.push(src - lo as f64);
        }
        taps
    }
}

/// Bilinear resample of one plane.
pub(crate) fn resample_plane(src: &[f64], h: usize, w: usize, ty: &AxisTaps, tx: &AxisTaps) -> Vec<f64> {
    let (oh, ow) = (ty.lo.len(), tx.lo.len());
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        let (r0, r1, fy) = (ty.lo[oy] * w, ty.hi[oy] * w, ty.frac[oy]);
        for ox in 0..ow {
            let (c0, c1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
            let top = src[r0 + c0] * (1.0 - fx) + src[r0 + c1] * fx;
            let bot = src[r1 + c0] * (1.0 - fx) + src[r1 + c1] * fx;
            out[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
        }
    }
    debug_assert_eq!(src.len(), h * w);
    out
}

/// Transpose of [`resample_plane`], accumulated into `dst`.
pub(crate) fn resample_plane_adjoint(g: &[f64], dst: &mut [f64], w: usize, ty: &AxisTaps, tx: &AxisTaps) {
    let ow = tx.lo.len();
    for oy in 0..ty.lo.len() {
        let (r0, r1, fy) = (ty.lo[oy] * w, ty.hi[oy] * w, ty.frac[oy]);
        for ox in 0..ow {
            let (c0, c1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
            let gv = g[oy * ow + ox];
            dst[r0 + c0] += gv * (1.0 - fy) * (1.0 - fx);
            dst[r0 + c1] += gv * (1.0 - fy) * fx;
            dst[r1 + c0] += gv * fy * (1.0 - fx);
            dst[r1 + c1] += gv * fy * fx;
        }
    }
}

/// Bilinear resize to an explicit size. Values are interpolated (not
/// rescaled); the mask is resampled by nearest neighbour.
pub fn resize_to(d: &ScalarField, out_h: usize, out_w: usize) -> Result<ScalarField> {
    ensure!(out_h >= 1 && out_w >= 1, Contract, "degenerate resize target {out_h}x{out_w}");
    let (h, w) = d.dims();
    ensure!(h >= 1 && w >= 1, Contract, "empty field");
    if (h, w) == (out_h, out_w) {
        return Ok(d.clone());
    }
    let ty = AxisTaps::new(h, out_h);
    let tx = AxisTaps::new(w, out_w);
    let values = resample_plane(d.values.as_slice(), h, w, &ty, &tx);
    let nearest = |i: usize, n_in: usize, n_out: usize| {
        let src = (i as f64 + 0.5) * n_in as f64 / n_out as f64;
        (libm::floor(src) as usize).min(n_in - 1)
    };
    let valid = Grid::from_fn(out_h, out_w, |y, x| d.is_valid(nearest(y, h, out_h), nearest(x, w, out_w)));
    Ok(ScalarField { values: Grid::from_vec(out_h, out_w, values), valid })
}

/// Bilinear resize by a scale factor; output size is `round(n * scale)`.
pub fn resize_bilinear(d: &ScalarField, scale: f64) -> Result<ScalarField> {
    ensure!(scale.is_finite() && scale > 0.0, Contract, "resize scale must be > 0, got {scale}");
    let out_h = libm::round(d.height() as f64 * scale) as usize;
    let out_w = libm::round(d.width() as f64 * scale) as usize;
    resize_to(d, out_h, out_w)
}

/// Validity after downsampling where a pixel counts only if every
/// full-resolution pixel contributing to its bilinear sample is valid.
pub fn resize_validity_strict(valid: &Grid<bool>, out_h: usize, out_w: usize) -> Grid<bool> {
    let (h, w) = valid.dims();
    let ty = AxisTaps::new(h, out_h);
    let tx = AxisTaps::new(w, out_w);
    Grid::from_fn(out_h, out_w, |y, x| {
        let rows = [ty.lo[y], ty.hi[y]];
        let cols = [tx.lo[x], tx.hi[x]];
        rows.iter().all(|&r| cols.iter().all(|&c| *valid.get(r, c)))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn field(h: usize, w: usize, v: &[f64]) -> ScalarField {
        ScalarField::dense(Grid::from_vec(h, w, v.to_vec()))
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip_scalar(5.0, 3.0), 3.0);
        assert_eq!(clip_scalar(-7.0, 6.0), -6.0);
        assert_eq!(clip_scalar(0.5, 2.0), 0.5);
        let f = field(1, 1, &[1.0]);
        assert!(clip_symmetric(&f, 0.0).is_err());
        assert!(clip_symmetric(&f, -1.0).is_err());
        assert!(ClipBound::new(0.0).is_err());
        assert_eq!(ClipBound::new(2.0).unwrap().full_limit(), 12.0);
    }

    #[test]
    fn balanced_weight_examples() {
        assert_eq!(balanced_weight(4.0, 0.5), 0.5);
        assert_eq!(balanced_weight(1.0, 0.5), 1.0);
        assert_eq!(balanced_weight(0.25, 0.5), 1.5);
        assert_eq!(balanced_weight(0.0, 0.5), 1.5);
        assert_eq!(balanced_weight(0.0, 0.0), 1.0);
        assert_eq!(balanced_weight(123.0, 0.0), 1.0);
    }

    #[test]
    fn cb_l1_examples() {
        assert_eq!(cb_l1(4.0, 0.5), 2.0);
        assert_eq!(cb_l1(0.0, 0.5), 0.0);
        assert_eq!(cb_l1(0.0, 0.0), 0.0);
        assert_eq!(cb_l1(-0.25, 0.5), 0.375);
    }

    #[test]
    fn cb_smooth_l1_examples() {
        // standard Smooth-L1 linear branch |x| - 0.5, weighted by 4^-0.5
        assert_eq!(cb_smooth_l1(4.0, 0.5), 1.75);
        assert_eq!(cb_smooth_l1(0.5, 0.0), 0.125);
        // 0.5^-0.5 * 0.5 * 0.25, 25-digit oracle
        assert!((cb_smooth_l1(0.5, 0.5) - 0.176_776_695_296_636_88).abs() < 1e-15);
        assert_eq!(cb_smooth_l1(4.0, 0.0), 3.5);
        assert_eq!(cb_smooth_l1(-0.5, 0.0), 0.125);
    }

    #[test]
    fn cb_losses_are_continuous_at_branch_point() {
        for h in [0.0, 0.25, 0.5, 1.0] {
            let below = cb_smooth_l1(1.0 - 1e-12, h);
            let above = cb_smooth_l1(1.0, h);
            assert!((below - above).abs() < 1e-9, "h={h}");
        }
    }

    #[test]
    fn analytic_scalar_gradients_match_central_differences() {
        let step = 1e-6;
        for h in [0.0, 0.3, 0.5, 0.9] {
            for &x in &[-3.7, -1.2, -0.8, -0.05, 0.3, 0.95, 1.4, 2.5, 7.0] {
                let fd = (cb_l1(x + step, h) - cb_l1(x - step, h)) / (2.0 * step);
                assert!((fd - cb_l1_grad(x, h)).abs() < 1e-6, "cb_l1 x={x} h={h}");
                let fd = (cb_smooth_l1(x + step, h) - cb_smooth_l1(x - step, h)) / (2.0 * step);
                assert!((fd - cb_smooth_l1_grad(x, h)).abs() < 1e-6, "cb_sl1 x={x} h={h}");
            }
        }
        assert_eq!(cb_l1_grad(0.0, 0.5), 0.0);
        assert_eq!(cb_smooth_l1_grad(0.0, 0.5), 0.0);
    }

    #[test]
    fn prewitt_on_constant_is_zero() {
        let m = prewitt_magnitude(&ScalarField::constant(5, 6, 3.25)).unwrap();
        assert!(m.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prewitt_vertical_step_of_two() {
        // columns 0..3 hold 0, columns 3..8 hold 2
        let f = ScalarField::dense(Grid::from_fn(6, 8, |_, x| if x < 3 { 0.0 } else { 2.0 }));
        let m = prewitt_magnitude(&f).unwrap();
        for y in 0..6 {
            for x in 0..8 {
                let want = if x == 2 || x == 3 { 6.0 } else { 0.0 };
                assert_eq!(*m.get(y, x), want, "({y},{x})");
            }
        }
    }

    #[test]
    fn prewitt_horizontal_step_of_two() {
        let f = ScalarField::dense(Grid::from_fn(8, 6, |y, _| if y < 4 { 1.0 } else { 3.0 }));
        let m = prewitt_magnitude(&f).unwrap();
        for y in 0..8 {
            let want = if y == 3 || y == 4 { 6.0 } else { 0.0 };
            assert!((0..6).all(|x| *m.get(y, x) == want), "row {y}");
        }
    }

    #[test]
    fn prewitt_rejects_small_fields() {
        assert!(prewitt_magnitude(&ScalarField::constant(2, 5, 0.0)).is_err());
    }

    #[test]
    fn prewitt_is_translation_equivariant_in_interior() {
        let a = ScalarField::dense(Grid::from_fn(7, 12, |_, x| if x < 5 { 1.0 } else { 4.0 }));
        let b = ScalarField::dense(Grid::from_fn(7, 12, |_, x| if x < 6 { 1.0 } else { 4.0 }));
        let (ma, mb) = (prewitt_magnitude(&a).unwrap(), prewitt_magnitude(&b).unwrap());
        for y in 0..7 {
            for x in 1..10 {
                assert_eq!(ma.get(y, x), mb.get(y, x + 1));
            }
        }
    }

    #[test]
    fn resize_examples() {
        let c = ScalarField::constant(6, 10, 2.5);
        for s in [0.25, 0.5, 1.7, 3.0] {
            let r = resize_bilinear(&c, s).unwrap();
            assert!(r.values.as_slice().iter().all(|&v| (v - 2.5).abs() < 1e-15));
        }
        let f = field(2, 2, &[0.0, 4.0, 0.0, 4.0]);
        let r = resize_bilinear(&f, 0.5).unwrap();
        assert_eq!(r.dims(), (1, 1));
        assert_eq!(r.value(0, 0), 2.0);
        let same = resize_bilinear(&f, 1.0).unwrap();
        assert_eq!(same, f);
        assert!(resize_bilinear(&f, 0.1).is_err());
        assert!(resize_bilinear(&f, 0.0).is_err());
    }

    #[test]
    fn strict_validity_requires_all_contributors() {
        let mut valid = Grid::new(8, 8, true);
        valid.set(1, 1, false);
        let q = resize_validity_strict(&valid, 2, 2);
        // quarter pixel (0,0) samples full-res rows/cols 1 and 2
        assert!(!*q.get(0, 0));
        assert!(*q.get(0, 1) && *q.get(1, 0) && *q.get(1, 1));
    }

    proptest! {
        #[test]
        fn clip_is_idempotent_and_moves_by_excess(x in -100.0f64..100.0, m in 0.01f64..50.0) {
            let once = clip_scalar(x, m);
            prop_assert_eq!(clip_scalar(once, m), once);
            prop_assert!(((once - x).abs() - (x.abs() - m).max(0.0)).abs() < 1e-12);
        }

        #[test]
        fn balanced_weight_is_non_increasing(a in 0.0f64..20.0, b in 0.0f64..20.0, h in 0.01f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(balanced_weight(lo, h) >= balanced_weight(hi, h));
            let w = balanced_weight(hi, h);
            prop_assert!(w > 0.0 && w <= 1.5);
        }

        #[test]
        fn cb_l1_bounded_by_cap(x in -50.0f64..50.0, h in 0.0f64..1.0) {
            prop_assert!(cb_l1(x, h) <= 1.5 * x.abs() + 1e-12);
            prop_assert_eq!(cb_l1(x, 0.0), x.abs());
        }

        #[test]
        fn resize_stays_within_input_bounds(
            vals in proptest::collection::vec(-10.0f64..10.0, 30),
            oh in 1usize..12, ow in 1usize..12,
        ) {
            let f = field(5, 6, &vals);
            let (lo, hi) = f.min_max().unwrap();
            let r = resize_to(&f, oh, ow).unwrap();
            for &v in r.values.as_slice() {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}
