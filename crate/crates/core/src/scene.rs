//! Synthetic rectified stereo pairs: fronto-parallel textured layers with
//! constant disparity, exact dense ground truth and occlusion masks.
//!
//! Rendering is analytic. Every layer carries a texture defined in
//! left-image coordinates `(u, y)`; a right-image pixel centred at `u'`
//! shows the front-most layer `K` whose shape contains `u' + d_K`.

use alloc::vec::Vec;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure, Result};
use crate::field::{DisparityMap, Grid, Image, Mask, ScalarField};

/// Spacing of the value-noise lattice, in pixels.
const NOISE_CELL: f64 = 4.0;
/// Amplitude of the sinusoidal texture component.
const SINE_AMPLITUDE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// `[top, left, bottom, right]` in left-image pixels; the ellipse is
    /// inscribed in this box.
    pub bounds: [f64; 4],
}

impl ShapeSpec {
    fn contains(&self, y: f64, u: f64) -> bool {
        let [t, l, b, r] = self.bounds;
        match self.kind {
            ShapeKind::Rectangle => y >= t && y < b && u >= l && u < r,
            ShapeKind::Ellipse => {
                let (cy, cx) = (0.5 * (t + b), 0.5 * (l + r));
                let (ry, rx) = (0.5 * (b - t), 0.5 * (r - l));
                let (dy, dx) = ((y - cy) / ry, (u - cx) / rx);
                dy * dy + dx * dx < 1.0
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextureProfile {
    /// Weight of the band-limited value noise, in `[0, 1]`.
    pub noise_amplitude: f64,
    /// Frequency of the sinusoidal component, cycles per pixel.
    pub sine_frequency: f64,
}

impl Default for TextureProfile {
    fn default() -> Self {
        Self { noise_amplitude: 0.6, sine_frequency: 0.15 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub num_layers: usize,
    /// `[d_min, d_max]` in full-resolution pixels.
    pub disparity_range: [f64; 2],
    pub texture: TextureProfile,
    /// Foreground shapes, one per layer above the background. Empty means
    /// "draw them from the seed".
    pub shapes: Vec<ShapeSpec>,
    /// Explicit per-layer disparities, back to front. Empty means "draw
    /// them from `disparity_range`".
    pub disparities: Vec<f64>,
    /// Draw whole-pixel disparities.
    pub integer_disparity: bool,
    /// Standard deviation of the additive Gaussian pixel noise.
    pub pixel_noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 64,
            width: 96,
            num_layers: 3,
            disparity_range: [0.0, 24.0],
            texture: TextureProfile::default(),
            shapes: Vec::new(),
            disparities: Vec::new(),
            integer_disparity: true,
            pixel_noise: 0.02,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.disparity_range;
        ensure!(self.height >= 1 && self.width >= 1, Contract, "empty image {}x{}", self.height, self.width);
        ensure!(self.num_layers >= 1, Contract, "need at least one layer");
        ensure!(
            lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi,
            Contract,
            "bad disparity range [{lo}, {hi}]"
        );
        ensure!(
            2.0 * hi < self.width as f64,
            Contract,
            "d_max {hi} must be below half the width {}",
            self.width
        );
        if self.integer_disparity && self.disparities.is_empty() {
            ensure!(libm::ceil(lo) <= libm::floor(hi), Contract, "no integer in [{lo}, {hi}]");
        }
        let t = &self.texture;
        ensure!(
            (0.0..=1.0).contains(&t.noise_amplitude) && t.sine_frequency.is_finite() && t.sine_frequency >= 0.0,
            Contract,
            "bad texture profile {t:?}"
        );
        ensure!(self.pixel_noise >= 0.0 && self.pixel_noise.is_finite(), Contract, "bad pixel noise");
        if !self.shapes.is_empty() {
            ensure!(
                self.shapes.len() == self.num_layers - 1,
                Contract,
                "{} shapes for {} layers",
                self.shapes.len(),
                self.num_layers
            );
        }
        for s in &self.shapes {
            let [t, l, b, r] = s.bounds;
            ensure!(
                0.0 <= t && t < b && b <= self.height as f64 && 0.0 <= l && l < r && r <= self.width as f64,
                Contract,
                "shape bounds {:?} outside the {}x{} image",
                s.bounds,
                self.height,
                self.width
            );
        }
        if !self.disparities.is_empty() {
            ensure!(
                self.disparities.len() == self.num_layers,
                Contract,
                "{} disparities for {} layers",
                self.disparities.len(),
                self.num_layers
            );
            ensure!(
                self.disparities.iter().all(|d| (lo..=hi).contains(d)),
                Contract,
                "explicit disparities {:?} outside [{lo}, {hi}]",
                self.disparities
            );
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StereoSample {
    pub left: Image,
    pub right: Image,
    /// Dense: occluded and out-of-frame pixels keep the visible surface's
    /// disparity.
    pub disparity_gt: DisparityMap,
    /// Left pixels not visible in the right view (occluded or `x - d < 0`).
    pub occlusion_mask: Mask,
}

#[derive(Clone, Debug)]
struct Texture {
    base: [f64; 3],
    phase: [f64; 3],
    direction: (f64, f64),
    lattice: Vec<f64>,
    lattice_w: usize,
    lattice_h: usize,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng, lattice_h: usize, lattice_w: usize) -> Self {
        let base = [rng.random_range(0.25..0.75), rng.random_range(0.25..0.75), rng.random_range(0.25..0.75)];
        let tau = core::f64::consts::TAU;
        let phase = [rng.random_range(0.0..tau), rng.random_range(0.0..tau), rng.random_range(0.0..tau)];
        let angle: f64 = rng.random_range(0.0..tau);
        let lattice = (0..3 * lattice_h * lattice_w).map(|_| rng.random::<f64>()).collect();
        Self { base, phase, direction: (libm::cos(angle), libm::sin(angle)), lattice, lattice_w, lattice_h }
    }

    fn noise(&self, c: usize, y: f64, u: f64) -> f64 {
        let (gy, gx) = (y / NOISE_CELL, u / NOISE_CELL);
        let (iy, ix) = (libm::floor(gy), libm::floor(gx));
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (fy, fx) = (smooth(gy - iy), smooth(gx - ix));
        let cy = |k: f64| (k.max(0.0) as usize).min(self.lattice_h - 1);
        let cx = |k: f64| (k.max(0.0) as usize).min(self.lattice_w - 1);
        let at = |y: usize, x: usize| self.lattice[(c * self.lattice_h + y) * self.lattice_w + x];
        let (y0, y1, x0, x1) = (cy(iy), cy(iy + 1.0), cx(ix), cx(ix + 1.0));
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
        let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    fn sample(&self, profile: &TextureProfile, c: usize, y: f64, u: f64) -> f64 {
        let n = self.noise(c, y, u) - 0.5;
        let s = libm::sin(
            core::f64::consts::TAU * profile.sine_frequency * (u * self.direction.0 + y * self.direction.1)
                + self.phase[c],
        );
        (self.base[c] + profile.noise_amplitude * n + SINE_AMPLITUDE * s).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug)]
struct Layer {
    disparity: f64,
    /// `None` for the full-frame background.
    shape: Option<ShapeSpec>,
    texture: Texture,
}

impl Layer {
    fn contains(&self, y: f64, u: f64) -> bool {
        self.shape.as_ref().is_none_or(|s| s.contains(y, u))
    }
}

fn random_shape(rng: &mut ChaCha8Rng, h: f64, w: f64) -> ShapeSpec {
    let kind = if rng.random_bool(0.5) { ShapeKind::Rectangle } else { ShapeKind::Ellipse };
    let sh = rng.random_range(0.25..0.6) * h;
    let sw = rng.random_range(0.15..0.45) * w;
    let top = rng.random_range(0.0..h - sh);
    let left = rng.random_range(0.0..w - sw);
    ShapeSpec { kind, bounds: [top, left, top + sh, left + sw] }
}

/// Layers sorted back to front (non-decreasing disparity).
fn build_layers(spec: &SceneSpec) -> Vec<Layer> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = (spec.height as f64, spec.width as f64);
    let [lo, hi] = spec.disparity_range;
    let mut disparities: Vec<f64> = if spec.disparities.is_empty() {
        (0..spec.num_layers)
            .map(|_| {
                if spec.integer_disparity {
                    rng.random_range(libm::ceil(lo) as i64..=libm::floor(hi) as i64) as f64
                } else if lo == hi {
                    lo
                } else {
                    rng.random_range(lo..=hi)
                }
            })
            .collect()
    } else {
        spec.disparities.clone()
    };
    disparities.sort_by(f64::total_cmp);
    let shapes: Vec<ShapeSpec> = if spec.shapes.is_empty() {
        (1..spec.num_layers).map(|_| random_shape(&mut rng, h, w)).collect()
    } else {
        spec.shapes.clone()
    };
    // the right view samples textures up to u = W + d_max
    let lattice_h = libm::ceil(h / NOISE_CELL) as usize + 2;
    let lattice_w = libm::ceil((w + hi) / NOISE_CELL) as usize + 2;
    disparities
        .into_iter()
        .enumerate()
        .map(|(i, disparity)| Layer {
            disparity,
            shape: i.checked_sub(1).map(|k| shapes[k].clone()),
            texture: Texture::random(&mut rng, lattice_h, lattice_w),
        })
        .collect()
}

/// Index of the front-most layer visible at right-frame position `u_right`.
fn front_right(layers: &[Layer], y: f64, u_right: f64) -> usize {
    (0..layers.len()).rev().find(|&k| layers[k].contains(y, u_right + layers[k].disparity)).unwrap_or(0)
}

/// Index of the front-most layer visible at left-frame position `u`.
fn front_left(layers: &[Layer], y: f64, u: f64) -> usize {
    (0..layers.len()).rev().find(|&k| layers[k].contains(y, u)).unwrap_or(0)
}

/// Noise-free rendering of `spec`.
pub fn render_scene(spec: &SceneSpec) -> Result<StereoSample> {
    spec.validate()?;
    let layers = build_layers(spec);
    let (h, w) = (spec.height, spec.width);
    let mut left = Image::new(3, h, w);
    let mut right = Image::new(3, h, w);
    let mut disp = Grid::new(h, w, 0.0);
    let mut occluded = Grid::new(h, w, false);
    for y in 0..h {
        let yc = y as f64 + 0.5;
        for x in 0..w {
            let u = x as f64 + 0.5;
            let l = front_left(&layers, yc, u);
            let d = layers[l].disparity;
            disp.set(y, x, d);
            let u_right = u - d;
            occluded.set(y, x, u_right < 0.0 || front_right(&layers, yc, u_right) != l);
            let r = front_right(&layers, yc, u);
            for c in 0..3 {
                left.set(c, y, x, layers[l].texture.sample(&spec.texture, c, yc, u));
                let ur = u + layers[r].disparity;
                right.set(c, y, x, layers[r].texture.sample(&spec.texture, c, yc, ur));
            }
        }
    }
    Ok(StereoSample { left, right, disparity_gt: ScalarField::dense(disp), occlusion_mask: occluded })
}

/// Renders `spec` and adds clamped Gaussian pixel noise to both views.
pub fn generate_scene(spec: &SceneSpec) -> Result<StereoSample> {
    let mut sample = render_scene(spec)?;
    if spec.pixel_noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(1);
        for img in [&mut sample.left, &mut sample.right] {
            for v in img.as_mut_slice() {
                let n: f64 = rng.sample(StandardNormal);
                *v = (*v + spec.pixel_noise * n).clamp(0.0, 1.0);
            }
        }
    }
    Ok(sample)
}

fn derived_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng.next_u64()
}

/// One spec per disparity range, each with a seed derived from `base.seed`.
pub fn make_domain_suite(base: &SceneSpec, ranges: &[[f64; 2]]) -> Vec<SceneSpec> {
    ranges
        .iter()
        .enumerate()
        .map(|(i, &r)| SceneSpec { seed: derived_seed(base.seed, i), disparity_range: r, ..base.clone() })
        .collect()
}

/// `count` specs that differ from `base` only in their derived seeds.
pub fn scene_set(base: &SceneSpec, count: usize) -> Vec<SceneSpec> {
    (0..count).map(|i| SceneSpec { seed: derived_seed(base.seed ^ 0x5eed, i), ..base.clone() }).collect()
}

/// Which edge map removed the edge-region labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeSource {
    GroundTruth,
    Predicted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseDisparity {
    pub map: DisparityMap,
    pub edge_source: EdgeSource,
}

/// Invalidates every edge pixel and drops each remaining valid pixel
/// independently with probability `drop_prob`.
pub fn sparsify_gt(
    d_gt: &DisparityMap,
    edge: &Mask,
    drop_prob: f64,
    seed: u64,
    edge_source: EdgeSource,
) -> Result<SparseDisparity> {
    ensure!(
        d_gt.dims() == edge.dims(),
        Shape,
        "disparity {:?} vs edge map {:?}",
        d_gt.dims(),
        edge.dims()
    );
    ensure!((0.0..=1.0).contains(&drop_prob), Contract, "drop_prob {drop_prob} outside [0, 1]");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = d_gt.dims();
    let valid = Grid::from_fn(h, w, |y, x| {
        // one draw per pixel keeps the pattern independent of the edge map
        let dropped = rng.random_bool(drop_prob);
        d_gt.is_valid(y, x) && !*edge.get(y, x) && !dropped
    });
    Ok(SparseDisparity { map: ScalarField::new(d_gt.values.clone(), valid)?, edge_source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn two_layer_spec() -> SceneSpec {
        SceneSpec {
            seed: 3,
            num_layers: 2,
            disparity_range: [4.0, 12.0],
            disparities: alloc::vec![4.0, 12.0],
            shapes: alloc::vec![ShapeSpec { kind: ShapeKind::Rectangle, bounds: [10.0, 30.0, 50.0, 60.0] }],
            ..SceneSpec::default()
        }
    }

    #[test]
    fn constant_single_layer() {
        let spec = SceneSpec { num_layers: 1, disparity_range: [5.0, 5.0], ..SceneSpec::default() };
        let s = generate_scene(&spec).unwrap();
        assert!(s.disparity_gt.values.as_slice().iter().all(|&d| d == 5.0));
        assert!(s.disparity_gt.is_dense());
    }

    #[test]
    fn deterministic() {
        let spec = SceneSpec { seed: 11, ..SceneSpec::default() };
        assert_eq!(generate_scene(&spec).unwrap(), generate_scene(&spec).unwrap());
        let other = SceneSpec { seed: 12, ..SceneSpec::default() };
        assert_ne!(generate_scene(&spec).unwrap().left, generate_scene(&other).unwrap().left);
    }

    #[test]
    fn occlusion_matches_forward_warp_oracle() {
        let s = render_scene(&two_layer_spec()).unwrap();
        let (h, w) = s.disparity_gt.dims();
        let d = |y: usize, x: usize| s.disparity_gt.value(y, x) as i64;
        let dmax = 12;
        for y in 0..h {
            for x in 0..w {
                let target = x as i64 - d(y, x);
                let hidden = target < 0
                    || (x + 1..(x + 1 + dmax).min(w)).any(|x2| d(y, x2) > d(y, x) && x2 as i64 - d(y, x2) == target);
                assert_eq!(*s.occlusion_mask.get(y, x), hidden, "pixel ({y}, {x})");
            }
        }
        // the front rectangle hides some of the background
        let covered = (0..h).flat_map(|y| (12..w).map(move |x| (y, x))).filter(|&(y, x)| *s.occlusion_mask.get(y, x));
        assert!(covered.count() > 0);
    }

    #[test]
    fn photometric_consistency() {
        for seed in 0..4 {
            let spec = SceneSpec { seed, num_layers: 4, ..SceneSpec::default() };
            let s = render_scene(&spec).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut checked = 0;
            while checked < 1000 {
                let (y, x) = (rng.random_range(0..spec.height), rng.random_range(0..spec.width));
                if *s.occlusion_mask.get(y, x) {
                    continue;
                }
                let xr = x - s.disparity_gt.value(y, x) as usize;
                for c in 0..3 {
                    assert!((s.left.get(c, y, x) - s.right.get(c, y, xr)).abs() <= 1e-6);
                }
                checked += 1;
            }
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let wide = SceneSpec { disparity_range: [0.0, 48.0], ..SceneSpec::default() };
        assert!(generate_scene(&wide).is_err());
        let inverted = SceneSpec { disparity_range: [10.0, 4.0], ..SceneSpec::default() };
        assert!(generate_scene(&inverted).is_err());
        let outside = SceneSpec {
            num_layers: 2,
            shapes: alloc::vec![ShapeSpec { kind: ShapeKind::Ellipse, bounds: [0.0, 0.0, 65.0, 10.0] }],
            ..SceneSpec::default()
        };
        assert!(generate_scene(&outside).is_err());
    }

    #[test]
    fn domain_suite() {
        let base = SceneSpec { width: 128, ..SceneSpec::default() };
        assert!(make_domain_suite(&base, &[]).is_empty());
        let one = make_domain_suite(&base, &[[0.0, 24.0]]);
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].disparity_range, [0.0, 24.0]);
        let two = make_domain_suite(&base, &[[0.0, 24.0], [0.0, 48.0]]);
        assert_ne!(two[0].seed, two[1].seed);
        let same = SceneSpec { seed: two[0].seed, disparity_range: two[0].disparity_range, ..two[1].clone() };
        assert_eq!(same, two[0]);
    }

    #[test]
    fn sparsify_examples() {
        let d = ScalarField::constant(100, 100, 3.0);
        let no_edge = Grid::new(100, 100, false);
        let all = sparsify_gt(&d, &no_edge, 1.0, 1, EdgeSource::GroundTruth).unwrap();
        assert_eq!(all.map.valid_count(), 0);
        let none = sparsify_gt(&d, &no_edge, 0.0, 1, EdgeSource::GroundTruth).unwrap();
        assert_eq!(none.map, d);
        let half = sparsify_gt(&d, &no_edge, 0.5, 1, EdgeSource::Predicted).unwrap();
        assert!((4700..=5300).contains(&half.map.valid_count()));
        assert_eq!(half.edge_source, EdgeSource::Predicted);
        assert!(sparsify_gt(&d, &Grid::new(99, 100, false), 0.5, 1, EdgeSource::GroundTruth).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn gt_support_within_range(seed in 0u64..1000, lo in 0u32..10, span in 0u32..14) {
            let spec = SceneSpec {
                seed,
                height: 24,
                width: 64,
                disparity_range: [lo as f64, (lo + span) as f64],
                ..SceneSpec::default()
            };
            let s = generate_scene(&spec).unwrap();
            let (a, b) = s.disparity_gt.min_max().unwrap();
            prop_assert!(a >= lo as f64 && b <= (lo + span) as f64);
            prop_assert!(s.left.as_slice().iter().chain(s.right.as_slice()).all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn sparsify_never_keeps_edges(seed in 0u64..1000, p in 0.0f64..=1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let edge = Grid::from_fn(12, 12, |_, _| rng.random_bool(0.3));
            let d = ScalarField::constant(12, 12, 1.0);
            let s = sparsify_gt(&d, &edge, p, seed, EdgeSource::GroundTruth).unwrap();
            for y in 0..12 {
                for x in 0..12 {
                    prop_assert!(!(*edge.get(y, x) && s.map.is_valid(y, x)));
                }
            }
        }
    }
}
