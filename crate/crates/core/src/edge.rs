//! Edge maps: the lightweight disparity+RGB edge estimator, Prewitt edge
//! ground truth, soft edges of a disparity map, background pseudo-labels
//! and the fine-tuning loop that uses them.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ops, Binder, Graph, Var};
use crate::error::{ensure, Result};
use crate::field::{DisparityMap, Grid, Image, Mask, ScalarField};
use crate::math::{self, cb_smooth_l1, cb_smooth_l1_grad};
use crate::model::StereoModel;
use crate::nn::{Conv, ResBlock};
use crate::params::{Init, ParamStore};
use crate::regression;
use crate::tensor::Tensor;
use crate::train::{self, fit, stereo_objective, Objective, StepLog, TrainConfig, TrainSample};

/// Prewitt magnitude above which a ground-truth pixel is an edge.
pub const EDGE_THRESHOLD: f64 = 5.0;
/// Slope of the sigmoid relaxation of the edge threshold.
pub const SOFT_EDGE_SHARPNESS: f64 = 10.0;
/// Channels of the disparity edge features.
pub const EDGE_FEATURES: usize = 29;
/// Channels of the RGB-refined features.
pub const REFINE_FEATURES: usize = 16;
/// Disparities enter the estimator in units of ten pixels.
pub const DISPARITY_INPUT_SCALE: f64 = 0.1;
/// Border added before the four 3x3 convolutions: their joint reach.
const EDGE_PAD: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeKind {
    Predicted,
    BinaryGt,
    SoftFromDisparity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMap {
    pub values: Grid<f64>,
    pub kind: EdgeKind,
}

impl EdgeMap {
    pub fn dims(&self) -> (usize, usize) {
        self.values.dims()
    }

    /// `true` where the value exceeds `threshold`.
    pub fn binarize(&self, threshold: f64) -> Mask {
        self.values.map(|&v| v > threshold)
    }
}

/// 1 where the Prewitt magnitude of `d_gt` exceeds 5, else 0.
pub fn edge_gt_extract(d_gt: &DisparityMap) -> Result<EdgeMap> {
    ensure!(d_gt.is_dense(), Contract, "edge ground truth needs a dense disparity map");
    let mag = math::prewitt_magnitude(d_gt)?;
    Ok(EdgeMap { values: mag.map(|&m| if m > EDGE_THRESHOLD { 1.0 } else { 0.0 }), kind: EdgeKind::BinaryGt })
}

/// `sigmoid(10 * (Prewitt(d) - 5))`.
pub fn soft_edge_of_disparity(d_pred: &DisparityMap) -> Result<EdgeMap> {
    ensure!(d_pred.is_dense(), Contract, "soft edges need a dense disparity map");
    let mag = math::prewitt_magnitude(d_pred)?;
    Ok(EdgeMap {
        values: mag.map(|&m| math::sigmoid(SOFT_EDGE_SHARPNESS * (m - EDGE_THRESHOLD))),
        kind: EdgeKind::SoftFromDisparity,
    })
}

/// Differentiable soft edge map of a `[1, H, W]` disparity node.
pub fn soft_edge_graph(g: &mut Graph, d: Var) -> Var {
    let m = ops::prewitt_magnitude(g, d);
    let z = ops::affine(g, m, SOFT_EDGE_SHARPNESS, -SOFT_EDGE_SHARPNESS * EDGE_THRESHOLD);
    ops::sigmoid(g, z)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeConfig {
    /// Feed zeros instead of the disparity (RGB-only ablation).
    pub zero_disparity_input: bool,
    /// Initialization of the final 1x1 convolution.
    pub head_init: Init,
    pub seed: u64,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        Self { zero_disparity_input: false, head_init: Init::FanInUniform, seed: 1 }
    }
}

/// `sigmoid(conv1x1(ResBlock(concat(ResBlock(d), rgb))))`.
#[derive(Clone, Debug)]
pub struct EdgeEstimator {
    pub cfg: EdgeConfig,
    pub store: ParamStore,
    edge_block: ResBlock,
    refine_block: ResBlock,
    head: Conv,
}

impl EdgeEstimator {
    pub fn new(cfg: EdgeConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let edge_block = ResBlock::new(&mut store, &mut rng, "edge.block", 1, EDGE_FEATURES);
        let refine_block =
            ResBlock::new(&mut store, &mut rng, "edge.refine", EDGE_FEATURES + 3, REFINE_FEATURES);
        let head = Conv::new(&mut store, &mut rng, "edge.head", REFINE_FEATURES, 1, 1, 1, cfg.head_init);
        Self { cfg, store, edge_block, refine_block, head }
    }

    /// `d`: `[1, H, W]`, `rgb`: `[3, H, W]`; returns `[1, H, W]` in `(0, 1)`.
    pub fn forward(&self, g: &mut Graph, p: &mut Binder<'_>, d: Var, rgb: Var) -> Var {
        let d = if self.cfg.zero_disparity_input {
            g.constant(Tensor::zeros(g.value(d).shape()))
        } else {
            d
        };
        let (_, h, w) = g.value(d).chw();
        // replicated borders keep the zero padding of the convolutions from
        // reading as disparity steps along the frame
        let d = ops::scale(g, d, DISPARITY_INPUT_SCALE);
        let d = ops::pad_replicate(g, d, EDGE_PAD);
        let rgb = ops::pad_replicate(g, rgb, EDGE_PAD);
        let f_edge = self.edge_block.forward(g, p, d);
        let x = ops::concat(g, &[f_edge, rgb]);
        let f_refine = self.refine_block.forward(g, p, x);
        let logits = self.head.forward(g, p, f_refine);
        let logits = ops::crop_at(g, logits, EDGE_PAD, EDGE_PAD, h, w);
        ops::sigmoid(g, logits)
    }

    pub fn estimate(&self, d_input: &DisparityMap, rgb: &Image) -> Result<EdgeMap> {
        ensure!(
            d_input.dims() == (rgb.height(), rgb.width()) && rgb.channels() == 3,
            Shape,
            "disparity {:?} vs RGB {}x{}x{}",
            d_input.dims(),
            rgb.channels(),
            rgb.height(),
            rgb.width()
        );
        let mut g = Graph::new();
        let mut p = Binder::frozen(&self.store);
        let d = g.constant(d_input.to_tensor());
        let img = g.constant(rgb.to_tensor());
        let e = self.forward(&mut g, &mut p, d, img);
        let (_, h, w) = g.value(e).chw();
        Ok(EdgeMap { values: Grid::from_vec(h, w, g.value(e).data().to_vec()), kind: EdgeKind::Predicted })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    pub values: Grid<f64>,
    pub valid: Mask,
    pub threshold: f64,
}

impl PseudoLabel {
    /// The labels as a field (valid exactly on the pseudo-labelled pixels).
    pub fn as_field(&self) -> ScalarField {
        ScalarField { values: self.values.clone(), valid: self.valid.clone() }
    }
}

/// Background pseudo-labels: pixels with `edge_pred < t`.
pub fn pseudo_label_select(edge_pred: &EdgeMap, t: f64) -> Result<PseudoLabel> {
    ensure!(t > 0.0 && t <= 1.0, Contract, "threshold {t} outside (0, 1]");
    Ok(PseudoLabel { values: edge_pred.values.clone(), valid: edge_pred.values.map(|&v| v < t), threshold: t })
}

/// Edge loss node; `empty` flags a label without valid pixels (value 0).
#[derive(Clone, Copy, Debug)]
pub struct EdgeLoss {
    pub value: Var,
    pub empty: bool,
}

/// Smooth-L1 between a `[1, H, W]` edge node and the labels, averaged
/// over the valid label pixels.
pub fn edge_loss(g: &mut Graph, edge: Var, label: &PseudoLabel) -> Result<EdgeLoss> {
    let (_, h, w) = g.value(edge).chw();
    ensure!(
        (h, w) == label.values.dims(),
        Shape,
        "edge map {h}x{w} vs labels {:?}",
        label.values.dims()
    );
    if label.valid.count() == 0 {
        return Ok(EdgeLoss { value: g.constant(Tensor::scalar(0.0)), empty: true });
    }
    let value = regression::masked_elementwise_loss(
        g,
        edge,
        &label.as_field(),
        |x| cb_smooth_l1(x, 0.0),
        |x| cb_smooth_l1_grad(x, 0.0),
    );
    Ok(EdgeLoss { value, empty: false })
}

/// Plain-valued edge loss of two maps.
pub fn edge_loss_value(edge: &EdgeMap, label: &PseudoLabel) -> Result<(f64, bool)> {
    let mut g = Graph::new();
    let (h, w) = edge.dims();
    let e = g.constant(Tensor::from_vec(&[1, h, w], edge.values.as_slice().to_vec()));
    let l = edge_loss(&mut g, e, label)?;
    Ok((g.value(l.value).data()[0], l.empty))
}

/// Labels covering every pixel (supervision against edge ground truth).
pub fn dense_label(edge_gt: &EdgeMap) -> PseudoLabel {
    let (h, w) = edge_gt.dims();
    PseudoLabel { values: edge_gt.values.clone(), valid: Grid::new(h, w, true), threshold: 1.0 }
}

/// Training input of the edge estimator: a disparity estimate, the left
/// image and the edge ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeSample {
    pub disparity: DisparityMap,
    pub rgb: Image,
    pub edge_gt: EdgeMap,
}

/// Edge-estimator training inputs from the stereo model's predictions on
/// dense-gt samples.
pub fn edge_samples(model: &StereoModel, samples: &[TrainSample], max_disparity: f64) -> Result<Vec<EdgeSample>> {
    let levels = crate::backbone::disparity_levels(max_disparity);
    samples
        .iter()
        .map(|s| {
            Ok(EdgeSample {
                disparity: model.predict(&s.left, &s.right, levels)?,
                rgb: s.left.clone(),
                edge_gt: edge_gt_extract(&s.gt)?,
            })
        })
        .collect()
}

/// Trains the estimator against edge ground truth.
pub fn train_edge_estimator(
    est: &mut EdgeEstimator,
    samples: &[EdgeSample],
    cfg: &TrainConfig,
    log: impl FnMut(&StepLog),
) -> Result<()> {
    let mut store = core::mem::take(&mut est.store);
    let net: &EdgeEstimator = est;
    let labels: Vec<PseudoLabel> = samples.iter().map(|s| dense_label(&s.edge_gt)).collect();
    let result = fit(
        &mut store,
        samples.len(),
        cfg,
        |g, p, i| {
            let d = g.constant(samples[i].disparity.to_tensor());
            let rgb = g.constant(samples[i].rgb.to_tensor());
            let e = net.forward(g, p, d, rgb);
            let l = edge_loss(g, e, &labels[i])?;
            let extra = g.value(l.value).data()[0];
            Ok(Objective { total: l.value, log: StepLog { extra_loss: extra, ..StepLog::default() } })
        },
        log,
    );
    est.store = store;
    result
}

/// Target-domain fine-tuning pair with sparse disparity labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSample {
    pub left: Image,
    pub right: Image,
    pub sparse_gt: DisparityMap,
}

/// Pseudo-labels of every target sample, from the pre-trained stereo model
/// and the frozen estimator.
pub fn generate_pseudo_labels(
    model: &StereoModel,
    est: &EdgeEstimator,
    samples: &[TargetSample],
    max_disparity: f64,
    t: f64,
) -> Result<Vec<PseudoLabel>> {
    let levels = crate::backbone::disparity_levels(max_disparity);
    samples
        .iter()
        .map(|s| {
            let d = model.predict(&s.left, &s.right, levels)?;
            pseudo_label_select(&est.estimate(&d, &s.left)?, t)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DapeConfig {
    pub train: TrainConfig,
    /// Weight of the edge term; 0 gives plain fine-tuning.
    pub edge_weight: f64,
}

impl Default for DapeConfig {
    fn default() -> Self {
        Self { train: TrainConfig::default(), edge_weight: 1.0 }
    }
}

/// Fine-tunes `model` on sparse target labels plus, when `labels` is
/// given, the edge loss between the soft edges of the final prediction and
/// the cached pseudo-labels.
pub fn dape_finetune(
    model: &mut StereoModel,
    samples: &[TargetSample],
    labels: Option<&[PseudoLabel]>,
    cfg: &DapeConfig,
    log: impl FnMut(&StepLog),
) -> Result<()> {
    if let Some(l) = labels {
        ensure!(l.len() == samples.len(), Contract, "{} pseudo-labels for {} samples", l.len(), samples.len());
    }
    let levels = cfg.train.levels();
    let train_samples: Vec<TrainSample> = samples
        .iter()
        .map(|s| TrainSample { left: s.left.clone(), right: s.right.clone(), gt: s.sparse_gt.clone() })
        .collect();
    let mut store = core::mem::take(&mut model.store);
    let net: &StereoModel = model;
    let result = fit(
        &mut store,
        samples.len(),
        &cfg.train,
        |g, p, i| {
            let (pred, mut obj) = stereo_objective(g, p, net, &train_samples[i], levels, &cfg.train.loss)?;
            if let Some(labels) = labels {
                let soft = soft_edge_graph(g, pred.last_full());
                let l = edge_loss(g, soft, &labels[i])?;
                obj.log.extra_loss = g.value(l.value).data()[0];
                let weighted = ops::scale(g, l.value, cfg.edge_weight);
                obj.total = ops::add(g, obj.total, weighted);
            }
            Ok(obj)
        },
        log,
    );
    model.store = store;
    result
}

/// Re-export for callers that only need the EPE helper.
pub use train::epe_of;

#[cfg(test)]
mod tests {
    use super::*;

    fn step_map(height: f64) -> DisparityMap {
        ScalarField::dense(Grid::from_fn(5, 6, |_, x| if x >= 3 { height } else { 0.0 }))
    }

    #[test]
    fn edge_gt_examples() {
        let flat = edge_gt_extract(&ScalarField::constant(5, 5, 7.0)).unwrap();
        assert!(flat.values.as_slice().iter().all(|&v| v == 0.0));
        let two = edge_gt_extract(&step_map(2.0)).unwrap();
        for y in 0..5 {
            for x in 0..6 {
                assert_eq!(*two.values.get(y, x), if x == 2 || x == 3 { 1.0 } else { 0.0 });
            }
        }
        let one = edge_gt_extract(&step_map(1.0)).unwrap();
        assert!(one.values.as_slice().iter().all(|&v| v == 0.0));
        let mut sparse = step_map(2.0);
        sparse.valid.set(0, 0, false);
        assert!(edge_gt_extract(&sparse).is_err());
    }

    #[test]
    fn soft_edge_examples() {
        // a step of height 5/3 has Prewitt magnitude exactly 5 on its flanks
        let s = soft_edge_of_disparity(&step_map(5.0 / 3.0)).unwrap();
        assert!((s.values.get(0, 2) - 0.5).abs() < 1e-12);
        let s = soft_edge_of_disparity(&step_map(2.0)).unwrap();
        // 25-digit oracle values of sigmoid(10) and sigmoid(-50)
        assert!((s.values.get(0, 2) - 0.999_954_602_131_297_6).abs() < 1e-15);
        assert!((s.values.get(0, 0) - 1.928_749_847_963_917_8e-22).abs() < 1e-35);
    }

    #[test]
    fn soft_and_hard_edges_agree_off_threshold() {
        let d = ScalarField::dense(Grid::from_fn(9, 9, |y, x| ((x * 7 + y * 3) % 5) as f64 * 1.3));
        let hard = edge_gt_extract(&d).unwrap();
        let soft = soft_edge_of_disparity(&d).unwrap();
        let mag = math::prewitt_magnitude(&d).unwrap();
        for i in 0..81 {
            if mag.as_slice()[i] != EDGE_THRESHOLD {
                assert_eq!(soft.values.as_slice()[i] > 0.5, hard.values.as_slice()[i] == 1.0);
            }
        }
    }

    #[test]
    fn pseudo_label_examples() {
        let map = EdgeMap { values: Grid::from_vec(1, 3, alloc::vec![0.1, 0.3, 0.8]), kind: EdgeKind::Predicted };
        let l = pseudo_label_select(&map, 0.25).unwrap();
        assert_eq!(l.valid.as_slice(), &[true, false, false]);
        assert_eq!(pseudo_label_select(&map, 1.0).unwrap().valid.count(), 3);
        assert!(pseudo_label_select(&map, 0.0).is_err());
        assert!(pseudo_label_select(&map, 1.5).is_err());
    }

    #[test]
    fn edge_loss_examples() {
        let edge = |v: f64| EdgeMap { values: Grid::new(2, 2, v), kind: EdgeKind::Predicted };
        let all = |v: f64| dense_label(&edge(v));
        assert_eq!(edge_loss_value(&edge(0.3), &all(0.3)).unwrap(), (0.0, false));
        assert_eq!(edge_loss_value(&edge(4.0), &all(0.0)).unwrap().0, 3.5);
        assert_eq!(edge_loss_value(&edge(0.5), &all(0.0)).unwrap().0, 0.125);
        let none = PseudoLabel { valid: Grid::new(2, 2, false), ..all(0.0) };
        assert_eq!(edge_loss_value(&edge(0.9), &none).unwrap(), (0.0, true));
    }

    #[test]
    fn estimator_output_range() {
        let zero_head = EdgeEstimator::new(EdgeConfig { head_init: Init::Zeros, ..EdgeConfig::default() });
        let d = ScalarField::dense(Grid::from_fn(6, 7, |y, x| (x * y) as f64));
        let rgb = Image::from_planar(3, 6, 7, (0..126).map(|i| (i % 11) as f64 / 10.0).collect());
        let e = zero_head.estimate(&d, &rgb).unwrap();
        assert!(e.values.as_slice().iter().all(|&v| v == 0.5));
        let est = EdgeEstimator::new(EdgeConfig::default());
        let big = d.map(|v| 2.0 * v);
        let e = est.estimate(&big, &rgb).unwrap();
        assert!(e.values.as_slice().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(est.estimate(&ScalarField::constant(5, 7, 0.0), &rgb).is_err());
    }
}
