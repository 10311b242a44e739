//! Quarter-resolution stereo trunk: shared feature encoder, context heads,
//! normalized-correlation cost volume with one pooled level, cost-volume
//! lookup, soft-argmax initial disparity and x4 upsampling.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ops, Binder, Graph, Var};
use crate::error::{ensure, Result};
use crate::nn::Conv;
use crate::params::{Init, ParamStore};

/// Channels of one lookup: 9 offsets at each of the two pyramid levels.
pub const LOOKUP_CHANNELS: usize = 2 * (2 * ops::LOOKUP_RADIUS + 1);

/// Epsilon inside the per-pixel feature norm.
const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMode {
    Bilinear,
    /// Bilinear x4 followed by a learned per-pixel convex combination of
    /// the 3x3 neighbourhood; weights come from the left features and image.
    Convex,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub feature_channels: usize,
    pub context_channels: usize,
    pub hidden_channels: usize,
    pub temperature: f64,
    pub upsample: UpsampleMode,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            feature_channels: 16,
            context_channels: 16,
            hidden_channels: 24,
            temperature: 0.1,
            upsample: UpsampleMode::Bilinear,
        }
    }
}

/// Number of quarter-resolution disparity levels needed to cover
/// `max_disparity` full-resolution pixels.
pub fn disparity_levels(max_disparity: f64) -> usize {
    libm::ceil(max_disparity / 4.0) as usize + 1
}

#[derive(Clone, Debug)]
struct MaskHead {
    hidden: Conv,
    out: Conv,
    image: Conv,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    enc1: Conv,
    enc2: Conv,
    enc3: Conv,
    hidden_head: Conv,
    context_head: Conv,
    mask: Option<MaskHead>,
}

/// Cost volume and its pooled level, as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct CostVolume {
    /// `[levels, H/4, W/4]`
    pub cost: Var,
    /// `[levels / 2, H/4, W/4]`
    pub pooled: Var,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: BackboneConfig) -> Self {
        let c = cfg.feature_channels;
        let enc1 = Conv::new(store, rng, "encoder.conv1", 3, c, 3, 2, Init::FanInUniform);
        let enc2 = Conv::new(store, rng, "encoder.conv2", c, c, 3, 2, Init::FanInUniform);
        let enc3 = Conv::new(store, rng, "encoder.conv3", c, c, 3, 1, Init::FanInUniform);
        let hidden_head =
            Conv::new(store, rng, "context.hidden", c, cfg.hidden_channels, 3, 1, Init::FanInUniform);
        let context_head =
            Conv::new(store, rng, "context.features", c, cfg.context_channels, 3, 1, Init::FanInUniform);
        let mask = (cfg.upsample == UpsampleMode::Convex).then(|| MaskHead {
            hidden: Conv::new(store, rng, "upsample.hidden", c, 32, 3, 1, Init::FanInUniform),
            out: Conv::new(store, rng, "upsample.mask", 32, 9 * 16, 1, 1, Init::Zeros),
            image: Conv::new(store, rng, "upsample.image", 3, 9, 3, 1, Init::Zeros),
        });
        Self { cfg, enc1, enc2, enc3, hidden_head, context_head, mask }
    }

    /// `[3, H, W]` image (H, W multiples of 4) to `[C, H/4, W/4]` features.
    /// Receptive field: 15x15, output `(Y, X)` sees input rows
    /// `4Y-7 ..= 4Y+7` and the same span of columns.
    pub fn encode_features(&self, g: &mut Graph, p: &mut Binder<'_>, img: Var) -> Var {
        let x = self.enc1.forward(g, p, img);
        let x = ops::relu(g, x);
        let x = self.enc2.forward(g, p, x);
        let x = ops::relu(g, x);
        self.enc3.forward(g, p, x)
    }

    /// Initial hidden state (`tanh`) and context features (`relu`) from the
    /// left features.
    pub fn context(&self, g: &mut Graph, p: &mut Binder<'_>, feat_left: Var) -> (Var, Var) {
        let h = self.hidden_head.forward(g, p, feat_left);
        let h = ops::tanh(g, h);
        let c = self.context_head.forward(g, p, feat_left);
        let c = ops::relu(g, c);
        (h, c)
    }

    /// Quarter-resolution disparity `[1, h, w]` to full resolution
    /// `[1, 4h, 4w]`, values multiplied by 4.
    pub fn upsample(
        &self,
        g: &mut Graph,
        p: &mut Binder<'_>,
        d_quarter: Var,
        feat_left: Var,
        img_left: Var,
    ) -> Var {
        let (_, h, w) = g.value(d_quarter).chw();
        let scaled = ops::scale(g, d_quarter, 4.0);
        let up = ops::resize_bilinear(g, scaled, 4 * h, 4 * w);
        let Some(mask) = &self.mask else { return up };
        let a = mask.hidden.forward(g, p, feat_left);
        let a = ops::relu(g, a);
        let logits = mask.out.forward(g, p, a);
        let logits = ops::pixel_shuffle(g, logits, 4);
        let from_image = mask.image.forward(g, p, img_left);
        let logits = ops::add(g, logits, from_image);
        let weights = ops::softmax_channels(g, logits);
        ops::neighbourhood_combine(g, up, weights)
    }
}

/// Cosine-similarity cost volume over `levels` candidate disparities
/// (quarter-resolution units) and its disparity-axis average pooling.
pub fn build_cost_volume(g: &mut Graph, feat_left: Var, feat_right: Var, levels: usize) -> Result<CostVolume> {
    let (_, _, w) = g.value(feat_left).chw();
    ensure!(
        g.value(feat_left).shape() == g.value(feat_right).shape(),
        Shape,
        "left features {:?} vs right {:?}",
        g.value(feat_left).shape(),
        g.value(feat_right).shape()
    );
    ensure!(levels >= 2, Contract, "need at least 2 disparity levels, got {levels}");
    ensure!(levels <= w, Contract, "{levels} disparity levels exceed feature width {w}");
    let l = ops::normalize_channels(g, feat_left, NORM_EPS);
    let r = ops::normalize_channels(g, feat_right, NORM_EPS);
    let cost = ops::correlation(g, l, r, levels);
    let pooled = ops::pool_disparity(g, cost);
    Ok(CostVolume { cost, pooled })
}

/// Soft-argmax of the cost over the disparity axis; `[1, H/4, W/4]` in
/// quarter-resolution units.
pub fn initial_disparity(g: &mut Graph, cost: Var, temperature: f64) -> Result<Var> {
    ensure!(temperature > 0.0, Contract, "temperature must be > 0, got {temperature}");
    Ok(ops::soft_argmax(g, cost, temperature))
}

/// Lookup features around the current disparity (see [`ops::lookup`]).
pub fn lookup(g: &mut Graph, volume: &CostVolume, d_quarter: Var) -> Var {
    ops::lookup(g, volume.cost, volume.pooled, d_quarter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn eval<F: FnOnce(&mut Graph) -> Var>(f: F) -> Tensor {
        let mut g = Graph::new();
        let v = f(&mut g);
        g.value(v).clone()
    }

    #[test]
    fn levels_cover_max_disparity() {
        assert_eq!(disparity_levels(24.0), 7);
        assert_eq!(disparity_levels(48.0), 13);
        assert_eq!(disparity_levels(25.0), 8);
    }

    #[test]
    fn out_of_frame_candidates_cost_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = crate::params::init_tensor(&[4, 3, 8], Init::FanInUniform, &mut rng);
        let t = eval(|g| {
            let a = g.constant(f.clone());
            let b = g.constant(f.clone());
            build_cost_volume(g, a, b, 5).unwrap().cost
        });
        for d in 0..5 {
            for y in 0..3 {
                for x in 0..d {
                    assert_eq!(t.at(d, y, x), 0.0);
                }
            }
        }
        // self-correlation is the maximum of each column
        for y in 0..3 {
            for x in 0..8 {
                let diag = t.at(0, y, x);
                assert!((diag - 1.0).abs() < 1e-3);
                assert!((1..5).all(|d| t.at(d, y, x) <= diag));
            }
        }
    }

    #[test]
    fn too_many_levels_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 2, 4]));
        let b = g.constant(Tensor::zeros(&[2, 2, 4]));
        assert!(build_cost_volume(&mut g, a, b, 5).is_err());
        assert!(build_cost_volume(&mut g, a, b, 1).is_err());
        assert!(build_cost_volume(&mut g, a, b, 4).is_ok());
    }

    #[test]
    fn soft_argmax_examples() {
        let column = |vals: &[f64]| Tensor::from_vec(&[vals.len(), 1, 1], vals.to_vec());
        let d = eval(|g| {
            let c = g.constant(column(&[0., 0., 0., 1., 0., 0.]));
            initial_disparity(g, c, 1e-3).unwrap()
        });
        assert!((d.data()[0] - 3.0).abs() < 1e-12);
        let d = eval(|g| {
            let c = g.constant(column(&[0.2; 7]));
            initial_disparity(g, c, 0.7).unwrap()
        });
        assert!((d.data()[0] - 3.0).abs() < 1e-12);
        let d = eval(|g| {
            let c = g.constant(column(&[0., 0., 10., 10., 0.]));
            initial_disparity(g, c, 1.0).unwrap()
        });
        // 25-digit oracle: 2.499943253952196770783402
        assert!((d.data()[0] - 2.499_943_253_952_196_8).abs() < 1e-12);
        let mut g = Graph::new();
        let c = g.constant(column(&[0., 1.]));
        assert!(initial_disparity(&mut g, c, 0.0).is_err());
    }

    #[test]
    fn zero_image_gives_finite_features() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bb = Backbone::new(&mut store, &mut rng, BackboneConfig::default());
        let mut p = Binder::frozen(&store);
        let mut g = Graph::new();
        let img = g.constant(Tensor::zeros(&[3, 16, 20]));
        let f = bb.encode_features(&mut g, &mut p, img);
        assert_eq!(g.value(f).shape(), &[16, 4, 5]);
        assert!(g.value(f).is_finite());
    }
}
