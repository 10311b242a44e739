//! The full stereo network: trunk, update units and the per-pair forward.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ops, Binder, Graph, Var};
use crate::backbone::{self, Backbone, BackboneConfig};
use crate::error::{ensure, Result};
use crate::field::{DisparityMap, Image, ScalarField};
use crate::math::ClipBound;
use crate::params::ParamStore;
use crate::regression::{
    self, BackboneOutputs, LossBreakdown, LossConfig, StepOutput, StepPrediction, UnitKind,
    UpdateUnit, UpdateUnitConfig, Units,
};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub num_gru: usize,
    pub num_sru: usize,
    /// Clip range of the stepwise units (quarter-resolution px).
    pub m: f64,
    /// Seed of the parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { backbone: BackboneConfig::default(), num_gru: 0, num_sru: 15, m: 2.0, seed: 0 }
    }
}

impl ModelConfig {
    pub fn updates(&self) -> usize {
        self.num_gru + self.num_sru
    }
}

#[derive(Clone, Debug)]
pub struct StereoModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub units: Units,
}

/// Recorded forward pass. Full-resolution nodes are cropped to the input size.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub outs: BackboneOutputs,
    pub d_init_full: Var,
    pub steps: Vec<StepOutput>,
}

impl Prediction {
    /// Final full-resolution disparity node.
    pub fn last_full(&self) -> Var {
        self.steps.last().map_or(self.d_init_full, |s| s.d_full)
    }
}

impl StereoModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        regression::validate_schedule(&regression::schedule(cfg.num_gru, cfg.num_sru))?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &mut rng, cfg.backbone.clone());
        let hidden_channels = cfg.backbone.hidden_channels;
        let ctx = cfg.backbone.context_channels;
        let gru = if cfg.num_gru > 0 {
            let ucfg = UpdateUnitConfig { kind: UnitKind::GruResidual, m: None, hidden_channels };
            Some(UpdateUnit::new(&mut store, &mut rng, "gru_unit", ucfg, ctx)?)
        } else {
            None
        };
        let stepwise = if cfg.num_sru > 0 {
            let m = Some(ClipBound::new(cfg.m)?);
            let ucfg = UpdateUnitConfig { kind: UnitKind::Stepwise, m, hidden_channels };
            Some(UpdateUnit::new(&mut store, &mut rng, "stepwise_unit", ucfg, ctx)?)
        } else {
            None
        };
        Ok(Self { cfg, store, backbone, units: Units { gru, stepwise } })
    }

    pub fn schedule(&self) -> Vec<UnitKind> {
        regression::schedule(self.cfg.num_gru, self.cfg.num_sru)
    }

    pub fn clip_bound(&self) -> Option<ClipBound> {
        (self.cfg.num_sru > 0).then(|| ClipBound::new(self.cfg.m).expect("validated at construction"))
    }

    /// Records the forward pass for one rectified pair. `levels` is the
    /// number of quarter-resolution disparity candidates.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &mut Binder<'_>,
        left: &Image,
        right: &Image,
        levels: usize,
    ) -> Result<Prediction> {
        ensure!(
            (left.height(), left.width()) == (right.height(), right.width()),
            Shape,
            "left {}x{} vs right {}x{}",
            left.height(),
            left.width(),
            right.height(),
            right.width()
        );
        ensure!(left.channels() == 3 && right.channels() == 3, Contract, "expected RGB images");
        let (h, w) = (left.height(), left.width());
        let img_left = g.constant(left.pad_to_multiple(4).to_tensor());
        let img_right = g.constant(right.pad_to_multiple(4).to_tensor());
        let feat_left = self.backbone.encode_features(g, p, img_left);
        let feat_right = self.backbone.encode_features(g, p, img_right);
        let volume = backbone::build_cost_volume(g, feat_left, feat_right, levels)?;
        let d_init = backbone::initial_disparity(g, volume.cost, self.backbone.cfg.temperature)?;
        let (hidden, context) = self.backbone.context(g, p, feat_left);
        let outs = BackboneOutputs { volume, feat_left, context, hidden, d_init, img_left };
        let up = self.backbone.upsample(g, p, d_init, feat_left, img_left);
        let d_init_full = ops::crop(g, up, h, w);
        let mut steps =
            regression::run_refinement(g, p, &self.backbone, &self.units, &outs, &self.schedule())?;
        for s in &mut steps {
            s.d_full = ops::crop(g, s.d_full, h, w);
        }
        Ok(Prediction { outs, d_init_full, steps })
    }

    /// Full-resolution disparity after the last update.
    pub fn predict(&self, left: &Image, right: &Image, levels: usize) -> Result<DisparityMap> {
        let mut g = Graph::new();
        let mut p = Binder::frozen(&self.store);
        let pred = self.forward(&mut g, &mut p, left, right, levels)?;
        Ok(ScalarField::from_tensor(g.value(pred.last_full())))
    }

    /// Total training loss of a recorded prediction.
    pub fn loss(
        &self,
        g: &mut Graph,
        pred: &Prediction,
        d_gt: &DisparityMap,
        cfg: &LossConfig,
    ) -> Result<(Var, LossBreakdown)> {
        let targets = regression::compute_targets(
            g,
            d_gt,
            pred.outs.d_init,
            pred.d_init_full,
            &pred.steps,
            self.clip_bound(),
        )?;
        let steps: Vec<StepPrediction> =
            pred.steps.iter().map(|s| StepPrediction { delta: s.delta, d_full: s.d_full }).collect();
        regression::assemble_loss(g, pred.d_init_full, d_gt, &steps, &targets, cfg)
    }
}
