//! Optimization loops over in-memory samples.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Binder, Graph, Var};
use crate::backbone::disparity_levels;
use crate::error::{ensure, Result};
use crate::field::{DisparityMap, Image, ScalarField};
use crate::model::{Prediction, StereoModel};
use crate::optim::{one_cycle_lr, AdamW, OptimConfig};
use crate::params::ParamStore;
use crate::regression::{self, LossBreakdown, LossConfig};
use crate::scene::StereoSample;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub left: Image,
    pub right: Image,
    pub gt: DisparityMap,
}

impl From<&StereoSample> for TrainSample {
    fn from(s: &StereoSample) -> Self {
        Self { left: s.left.clone(), right: s.right.clone(), gt: s.disparity_gt.clone() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub optim: OptimConfig,
    pub loss: LossConfig,
    /// Largest full-resolution disparity the cost volume must cover.
    pub max_disparity: f64,
    /// Seed of the sample order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            optim: OptimConfig::default(),
            loss: LossConfig::default(),
            max_disparity: 24.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn levels(&self) -> usize {
        disparity_levels(self.max_disparity)
    }
}

/// One row of the training log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub learning_rate: f64,
    pub loss: LossBreakdown,
    /// Extra objective term (edge loss during DAPE), 0 otherwise.
    pub extra_loss: f64,
    /// Training-sample EPE of the final prediction.
    pub epe: f64,
    /// Fraction of stepwise outputs within 1% of the clip limit.
    pub clip_saturation: f64,
    pub grad_norm: f64,
}

/// Value of one objective evaluation.
#[derive(Clone, Debug)]
pub struct Objective {
    pub total: Var,
    pub log: StepLog,
}

/// Mean absolute error of `pred` over the valid pixels of `gt`.
pub fn epe_of(pred: &ScalarField, gt: &DisparityMap) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, (&p, &t)) in pred.values.as_slice().iter().zip(gt.values.as_slice()).enumerate() {
        if gt.valid.as_slice()[i] {
            sum += (p - t).abs();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Standard supervised objective: the stereo loss against `sample.gt`.
pub fn stereo_objective(
    g: &mut Graph,
    p: &mut Binder<'_>,
    model: &StereoModel,
    sample: &TrainSample,
    levels: usize,
    loss: &LossConfig,
) -> Result<(Prediction, Objective)> {
    let pred = model.forward(g, p, &sample.left, &sample.right, levels)?;
    let (total, breakdown) = model.loss(g, &pred, &sample.gt, loss)?;
    let final_pred = regression::field_of(g, pred.last_full());
    let clip_saturation = model.clip_bound().map_or(0.0, |m| regression::clip_saturation(g, &pred.steps, m));
    let log = StepLog { loss: breakdown, epe: epe_of(&final_pred, &sample.gt), clip_saturation, ..StepLog::default() };
    Ok((pred, Objective { total, log }))
}

/// Runs `cfg.steps` AdamW updates of `store`, visiting sample indices
/// `0..num_samples` in reshuffled epochs. `objective` builds the scalar
/// loss for one sample.
pub fn fit<F, L>(
    store: &mut ParamStore,
    num_samples: usize,
    cfg: &TrainConfig,
    mut objective: F,
    mut log: L,
) -> Result<()>
where
    F: FnMut(&mut Graph, &mut Binder<'_>, usize) -> Result<Objective>,
    L: FnMut(&StepLog),
{
    ensure!(num_samples > 0, Contract, "no training samples");
    cfg.loss.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..num_samples).collect();
    let mut cursor = num_samples;
    let mut opt = AdamW::new(store, cfg.optim.clone());
    for step in 0..cfg.steps {
        if cursor == num_samples {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = order[cursor];
        cursor += 1;
        let (mut grads, mut row) = {
            let mut g = Graph::new();
            let mut p = Binder::new(store, true);
            let obj = objective(&mut g, &mut p, idx)?;
            ensure!(
                g.value(obj.total).data()[0].is_finite(),
                Contract,
                "non-finite loss at step {step}"
            );
            let mut back = g.backward(obj.total);
            (p.gradients(&mut back), obj.log)
        };
        row.grad_norm = opt.clip(&mut grads);
        row.step = step;
        row.learning_rate = one_cycle_lr(step, cfg.steps, &cfg.optim);
        opt.step(store, &grads, row.learning_rate);
        log(&row);
    }
    Ok(())
}

/// Supervised training of every parameter of `model` on `samples`.
pub fn train_stereo(
    model: &mut StereoModel,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    log: impl FnMut(&StepLog),
) -> Result<()> {
    let levels = cfg.levels();
    // forward passes read parameters through the binder only
    let mut store = core::mem::take(&mut model.store);
    let frozen: &StereoModel = model;
    let result = fit(
        &mut store,
        samples.len(),
        cfg,
        |g, p, i| Ok(stereo_objective(g, p, frozen, &samples[i], levels, &cfg.loss)?.1),
        log,
    );
    model.store = store;
    result
}

/// Mean EPE of the model over `samples`.
pub fn evaluate_epe(model: &StereoModel, samples: &[TrainSample], max_disparity: f64) -> Result<f64> {
    let levels = disparity_levels(max_disparity);
    let mut total = 0.0;
    for s in samples {
        total += epe_of(&model.predict(&s.left, &s.right, levels)?, &s.gt);
    }
    Ok(total / samples.len().max(1) as f64)
}
