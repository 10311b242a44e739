//! Update units, per-step regression targets and the training objective.
//!
//! A stepwise unit emits a bounded disparity clip
//! `tanh(ori / m) * m * (1 + 0.5 w)`, so `|clip| < 1.5 m` for any parameters.
//! Its targets are moving segments of the remaining error: at full
//! resolution `prev + clip(gt - prev, 6m)`, at quarter resolution
//! `clip(resize(gt) / 4 - prev, 1.5m)`.

use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ops, Binder, Graph, Var};
use crate::backbone::{self, Backbone, CostVolume, LOOKUP_CHANNELS};
use crate::error::{ensure, Error, Result};
use crate::field::{DisparityMap, Grid, ScalarField};
use crate::math::{self, ClipBound};
use crate::nn::{Conv, ResBlock};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

/// Lower clamp applied to the quarter-resolution disparity after each update.
pub const MIN_DISPARITY: f64 = 0.0;

/// Width of the hidden layer of the clip-weight head.
const WEIGHT_HEAD_CHANNELS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnitKind {
    /// Gated recurrent unit with an unconstrained residual output.
    GruResidual,
    /// Stepwise regression unit with a range-controlled clip output.
    Stepwise,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateUnitConfig {
    pub kind: UnitKind,
    /// Required for [`UnitKind::Stepwise`].
    pub m: Option<ClipBound>,
    pub hidden_channels: usize,
}

impl UpdateUnitConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.kind != UnitKind::Stepwise || self.m.is_some(),
            Contract,
            "stepwise unit needs a clip bound m"
        );
        ensure!(self.hidden_channels > 0, Contract, "hidden_channels must be positive");
        Ok(())
    }
}

/// Checks that a schedule is non-empty and places every GRU unit before
/// every stepwise unit.
pub fn validate_schedule(schedule: &[UnitKind]) -> Result<()> {
    if schedule.is_empty() {
        return Err(Error::Schedule("empty unit schedule".into()));
    }
    if let Some(first_sru) = schedule.iter().position(|k| *k == UnitKind::Stepwise) {
        if let Some(late) = schedule[first_sru..].iter().position(|k| *k == UnitKind::GruResidual) {
            return Err(Error::Schedule(format!(
                "GRU unit at position {} follows a stepwise unit; GRU units must come first",
                first_sru + late
            )));
        }
    }
    Ok(())
}

/// `num_gru` GRU units followed by `num_sru` stepwise units.
pub fn schedule(num_gru: usize, num_sru: usize) -> Vec<UnitKind> {
    let mut s = Vec::with_capacity(num_gru + num_sru);
    s.extend(core::iter::repeat_n(UnitKind::GruResidual, num_gru));
    s.extend(core::iter::repeat_n(UnitKind::Stepwise, num_sru));
    s
}

/// Recurrent state carried between updates.
#[derive(Clone, Debug)]
pub struct UpdateState {
    /// `[hidden, h, w]`, kept on the graph.
    pub hidden: Var,
    /// Current quarter-resolution disparity `[1, h, w]`; enters each update
    /// as a constant (no gradient through the incoming disparity).
    pub d_quarter: Tensor,
    pub step_index: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct UnitOutput {
    pub hidden: Var,
    pub delta: Var,
    /// Clip weight map `w` in `(0, 1)`; stepwise units only.
    pub weight: Option<Var>,
    /// Updated, clamped disparity `d_{k-1} + delta`.
    pub d_quarter: Var,
}

#[derive(Clone, Debug)]
struct WeightHead {
    res: ResBlock,
    proj: Conv,
}

/// One update unit; its parameters are shared by every step of its kind.
#[derive(Clone, Debug)]
pub struct UpdateUnit {
    pub cfg: UpdateUnitConfig,
    conv_z: Conv,
    conv_r: Conv,
    conv_q: Conv,
    head1: Conv,
    head2: Conv,
    weight_head: Option<WeightHead>,
}

impl UpdateUnit {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: UpdateUnitConfig,
        context_channels: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let hc = cfg.hidden_channels;
        let xin = LOOKUP_CHANNELS + 1 + context_channels;
        let gate = |store: &mut ParamStore, rng: &mut ChaCha8Rng, n: &str| {
            Conv::new(store, rng, &format!("{name}.{n}"), hc + xin, hc, 3, 1, Init::Orthogonal)
        };
        let conv_z = gate(store, rng, "gru.z");
        let conv_r = gate(store, rng, "gru.r");
        let conv_q = gate(store, rng, "gru.q");
        let head1 = Conv::new(store, rng, &format!("{name}.head.conv1"), hc, hc, 3, 1, Init::FanInUniform);
        let head2 = Conv::new(store, rng, &format!("{name}.head.conv2"), hc, 1, 3, 1, Init::Zeros);
        let weight_head = (cfg.kind == UnitKind::Stepwise).then(|| WeightHead {
            res: ResBlock::new(store, rng, &format!("{name}.weight.res"), LOOKUP_CHANNELS, WEIGHT_HEAD_CHANNELS),
            proj: Conv::new(store, rng, &format!("{name}.weight.proj"), WEIGHT_HEAD_CHANNELS, 1, 1, 1, Init::FanInUniform),
        });
        Ok(Self { cfg, conv_z, conv_r, conv_q, head1, head2, weight_head })
    }

    /// Unconstrained residual `conv(relu(conv(h)))`.
    fn residual(&self, g: &mut Graph, p: &mut Binder<'_>, hidden: Var) -> Var {
        let a = self.head1.forward(g, p, hidden);
        let a = ops::relu(g, a);
        self.head2.forward(g, p, a)
    }

    fn gru(&self, g: &mut Graph, p: &mut Binder<'_>, h: Var, x: Var) -> Var {
        let hx = ops::concat(g, &[h, x]);
        let z = self.conv_z.forward(g, p, hx);
        let z = ops::sigmoid(g, z);
        let r = self.conv_r.forward(g, p, hx);
        let r = ops::sigmoid(g, r);
        let rh = ops::mul(g, r, h);
        let rhx = ops::concat(g, &[rh, x]);
        let q = self.conv_q.forward(g, p, rhx);
        let q = ops::tanh(g, q);
        let q_minus_h = ops::sub(g, q, h);
        let step = ops::mul(g, z, q_minus_h);
        ops::add(g, h, step)
    }

    /// Bounded clip `tanh(ori / m) * m * (1 + 0.5 w)` and the weight map.
    pub fn clip(&self, g: &mut Graph, p: &mut Binder<'_>, residual: Var, lookup: Var) -> (Var, Var) {
        let m = self.cfg.m.expect("stepwise unit without m").get();
        let head = self.weight_head.as_ref().expect("stepwise unit without weight head");
        let w = head.res.forward(g, p, lookup);
        let w = head.proj.forward(g, p, w);
        let w = ops::sigmoid(g, w);
        let t = ops::scale(g, residual, 1.0 / m);
        let t = ops::tanh(g, t);
        let t = ops::scale(g, t, m);
        let gain = ops::affine(g, w, 0.5, 1.0);
        let clip = ops::mul(g, t, gain);
        let bound = self.cfg.m.expect("checked above").open_quarter_limit();
        (ops::clamp_abs(g, clip, bound), w)
    }

    /// One refinement step from `state` given the lookup features and the
    /// context map.
    pub fn step(
        &self,
        g: &mut Graph,
        p: &mut Binder<'_>,
        state: &UpdateState,
        lookup: Var,
        context: Var,
    ) -> UnitOutput {
        let d_prev = g.constant(state.d_quarter.clone());
        let x = ops::concat(g, &[lookup, d_prev, context]);
        let hidden = self.gru(g, p, state.hidden, x);
        let residual = self.residual(g, p, hidden);
        let (delta, weight) = match self.cfg.kind {
            UnitKind::GruResidual => (residual, None),
            UnitKind::Stepwise => {
                let (d, w) = self.clip(g, p, residual, lookup);
                (d, Some(w))
            }
        };
        let moved = ops::add(g, d_prev, delta);
        let d_quarter = ops::clamp_min(g, moved, MIN_DISPARITY);
        UnitOutput { hidden, delta, weight, d_quarter }
    }
}

/// Graph nodes produced by the trunk for one stereo pair.
#[derive(Clone, Copy, Debug)]
pub struct BackboneOutputs {
    pub volume: CostVolume,
    pub feat_left: Var,
    pub context: Var,
    pub hidden: Var,
    /// Quarter-resolution initial disparity.
    pub d_init: Var,
    /// Padded left image `[3, H, W]`.
    pub img_left: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    pub kind: UnitKind,
    pub delta: Var,
    pub weight: Option<Var>,
    pub d_quarter: Var,
    /// Full-resolution disparity of the padded frame.
    pub d_full: Var,
}

/// Runs the update schedule: lookup, unit, upsample per step.
pub fn run_refinement(
    g: &mut Graph,
    p: &mut Binder<'_>,
    backbone: &Backbone,
    units: &Units,
    outs: &BackboneOutputs,
    schedule: &[UnitKind],
) -> Result<Vec<StepOutput>> {
    validate_schedule(schedule)?;
    let mut state = UpdateState { hidden: outs.hidden, d_quarter: g.value(outs.d_init).clone(), step_index: 0 };
    let mut steps = Vec::with_capacity(schedule.len());
    for &kind in schedule {
        let unit = units.get(kind)?;
        let d_det = g.constant(state.d_quarter.clone());
        let f_g = backbone::lookup(g, &outs.volume, d_det);
        let out = unit.step(g, p, &state, f_g, outs.context);
        let d_full = backbone.upsample(g, p, out.d_quarter, outs.feat_left, outs.img_left);
        steps.push(StepOutput { kind, delta: out.delta, weight: out.weight, d_quarter: out.d_quarter, d_full });
        state = UpdateState {
            hidden: out.hidden,
            d_quarter: g.value(out.d_quarter).clone(),
            step_index: state.step_index + 1,
        };
    }
    Ok(steps)
}

/// The GRU-residual and stepwise units of a model (either may be absent).
#[derive(Clone, Debug, Default)]
pub struct Units {
    pub gru: Option<UpdateUnit>,
    pub stepwise: Option<UpdateUnit>,
}

impl Units {
    pub fn get(&self, kind: UnitKind) -> Result<&UpdateUnit> {
        let unit = match kind {
            UnitKind::GruResidual => self.gru.as_ref(),
            UnitKind::Stepwise => self.stepwise.as_ref(),
        };
        unit.ok_or_else(|| Error::Schedule(format!("model has no {kind:?} unit")))
    }
}

// ---------------------------------------------------------------------------
// targets

fn ensure_same_dims(a: &ScalarField, b: &ScalarField, what: &str) -> Result<()> {
    ensure!(a.dims() == b.dims(), Shape, "{what}: {:?} vs {:?}", a.dims(), b.dims());
    Ok(())
}

/// Full-resolution moving target `prev + clip(gt - prev, 6m)`; validity
/// follows the ground truth.
pub fn segment_target_full(d_gt: &DisparityMap, d_prev_full: &ScalarField, m: ClipBound) -> Result<DisparityMap> {
    ensure_same_dims(d_gt, d_prev_full, "segment_target_full")?;
    let limit = m.full_limit();
    let values = d_gt
        .values
        .zip_map(&d_prev_full.values, |&gt, &prev| prev + math::clip_scalar(gt - prev, limit));
    Ok(ScalarField { values, valid: d_gt.valid.clone() })
}

/// `resize(d_gt) / 4` at quarter resolution; a pixel is valid only when all
/// four contributing full-resolution pixels are valid.
pub fn quarter_ground_truth(d_gt: &DisparityMap, out_h: usize, out_w: usize) -> Result<ScalarField> {
    let resized = math::resize_to(d_gt, out_h, out_w)?;
    let valid = math::resize_validity_strict(&d_gt.valid, out_h, out_w);
    Ok(ScalarField { values: resized.values.map(|v| v / 4.0), valid })
}

/// Quarter-resolution clip target from an already resized ground truth.
pub fn segment_target_from_quarter(
    gt_quarter: &ScalarField,
    d_prev_quarter: &ScalarField,
    m: ClipBound,
) -> Result<ScalarField> {
    ensure_same_dims(gt_quarter, d_prev_quarter, "segment_target_quarter")?;
    let limit = m.quarter_limit();
    let values = gt_quarter
        .values
        .zip_map(&d_prev_quarter.values, |&gt, &prev| math::clip_scalar(gt - prev, limit));
    Ok(ScalarField { values, valid: gt_quarter.valid.clone() })
}

/// `clip(resize(d_gt) / 4 - d_prev, 1.5m)` at the shape of `d_prev_quarter`.
pub fn segment_target_quarter(
    d_gt: &DisparityMap,
    d_prev_quarter: &ScalarField,
    m: ClipBound,
) -> Result<ScalarField> {
    let (h, w) = d_prev_quarter.dims();
    let gtq = quarter_ground_truth(d_gt, h, w)?;
    segment_target_from_quarter(&gtq, d_prev_quarter, m)
}

/// Targets for one update.
#[derive(Clone, Debug)]
pub struct StepTargets {
    /// Quarter-resolution clip target; `None` for GRU units, which have no
    /// bounded clip to supervise.
    pub delta: Option<ScalarField>,
    pub full: DisparityMap,
}

/// Builds every step's targets from the recorded predictions. GRU steps
/// are supervised by the raw ground truth; stepwise steps by the segments.
pub fn compute_targets(
    g: &Graph,
    d_gt: &DisparityMap,
    d_init: Var,
    d_init_full: Var,
    steps: &[StepOutput],
    m: Option<ClipBound>,
) -> Result<Vec<StepTargets>> {
    let (_, qh, qw) = g.value(d_init).chw();
    let gtq = quarter_ground_truth(d_gt, qh, qw)?;
    let mut prev_q = ScalarField::from_tensor(g.value(d_init));
    let mut prev_full = ScalarField::from_tensor(g.value(d_init_full));
    let mut out = Vec::with_capacity(steps.len());
    for s in steps {
        let t = match s.kind {
            UnitKind::GruResidual => StepTargets { delta: None, full: d_gt.clone() },
            UnitKind::Stepwise => {
                let m = m.ok_or_else(|| Error::Contract("stepwise targets need m".into()))?;
                StepTargets {
                    delta: Some(segment_target_from_quarter(&gtq, &prev_q, m)?),
                    full: segment_target_full(d_gt, &prev_full, m)?,
                }
            }
        };
        out.push(t);
        prev_q = ScalarField::from_tensor(g.value(s.d_quarter));
        prev_full = ScalarField::from_tensor(g.value(s.d_full));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// loss

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub gamma: f64,
    /// Clip-balance exponent; 0 disables the balancing weight.
    pub h: f64,
    pub supervise_clips: bool,
    /// Total number of updates `N`.
    pub updates: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { gamma: 0.9, h: 0.5, supervise_clips: true, updates: 15 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.gamma > 0.0 && self.gamma < 1.0, Contract, "gamma must be in (0, 1), got {}", self.gamma);
        ensure!(self.h >= 0.0, Contract, "h must be >= 0, got {}", self.h);
        ensure!(self.updates >= 1, Contract, "need at least one update");
        Ok(())
    }

    /// `gamma^(N-k)` for `k = 1..=N`.
    pub fn step_weights(&self) -> Vec<f64> {
        (1..=self.updates).map(|k| libm::pow(self.gamma, (self.updates - k) as f64)).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub init: f64,
    pub delta: f64,
    pub full: f64,
    pub total: f64,
}

/// Per-update predictions entering the loss.
#[derive(Clone, Copy, Debug)]
pub struct StepPrediction {
    pub delta: Var,
    pub d_full: Var,
}

/// Mean over valid pixels of `loss(pred - target)`.
pub fn masked_elementwise_loss(
    g: &mut Graph,
    pred: Var,
    target: &ScalarField,
    loss: impl Fn(f64) -> f64,
    grad: impl Fn(f64) -> f64 + 'static,
) -> Var {
    let t = g.constant(target.to_tensor());
    let r = ops::sub(g, pred, t);
    let l = ops::unary(g, r, loss, grad);
    ops::masked_mean(g, l, target.valid.as_slice())
}

/// `Loss_init + Loss_delta + Loss_full`, each reduced by the mean over the
/// valid target pixels and weighted by `gamma^(N-k)` per step.
pub fn assemble_loss(
    g: &mut Graph,
    d_init_full: Var,
    d_gt: &DisparityMap,
    steps: &[StepPrediction],
    targets: &[StepTargets],
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    ensure!(!steps.is_empty(), Contract, "empty prediction sequence");
    ensure!(
        steps.len() == targets.len(),
        Contract,
        "{} predictions but {} targets",
        steps.len(),
        targets.len()
    );
    ensure!(
        steps.len() == cfg.updates,
        Contract,
        "{} predictions but N = {}",
        steps.len(),
        cfg.updates
    );
    let h = cfg.h;
    let weights = cfg.step_weights();
    let init = masked_elementwise_loss(
        g,
        d_init_full,
        d_gt,
        |x| math::cb_smooth_l1(x, 0.0),
        |x| math::cb_smooth_l1_grad(x, 0.0),
    );
    let mut delta_terms = Vec::new();
    let mut full_terms = Vec::new();
    for ((s, t), &wk) in steps.iter().zip(targets).zip(&weights) {
        if cfg.supervise_clips {
            if let Some(dt) = &t.delta {
                let l = masked_elementwise_loss(
                    g,
                    s.delta,
                    dt,
                    move |x| math::cb_smooth_l1(x, h),
                    move |x| math::cb_smooth_l1_grad(x, h),
                );
                delta_terms.push(ops::scale(g, l, wk));
            }
        }
        let l = masked_elementwise_loss(g, s.d_full, &t.full, move |x| math::cb_l1(x, h), move |x| {
            math::cb_l1_grad(x, h)
        });
        full_terms.push(ops::scale(g, l, wk));
    }
    let zero = g.constant(Tensor::scalar(0.0));
    let delta = if delta_terms.is_empty() { zero } else { ops::add_scalars(g, &delta_terms) };
    let full = ops::add_scalars(g, &full_terms);
    let total = ops::add_scalars(g, &[init, delta, full]);
    let breakdown = LossBreakdown {
        init: g.value(init).data()[0],
        delta: g.value(delta).data()[0],
        full: g.value(full).data()[0],
        total: g.value(total).data()[0],
    };
    Ok((total, breakdown))
}

/// Fraction of pixels over all clips with `|delta| > 0.99 * 1.5m`.
pub fn clip_saturation(g: &Graph, steps: &[StepOutput], m: ClipBound) -> f64 {
    let limit = 0.99 * m.quarter_limit();
    let (mut hit, mut total) = (0usize, 0usize);
    for s in steps.iter().filter(|s| s.kind == UnitKind::Stepwise) {
        let d = g.value(s.delta).data();
        hit += d.iter().filter(|v| v.abs() > limit).count();
        total += d.len();
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// Dense quarter-resolution field from a `[1, h, w]` value.
pub fn field_of(g: &Graph, v: Var) -> ScalarField {
    ScalarField::from_tensor(g.value(v))
}

/// Convenience: a dense `h x w` field of `value`.
pub fn constant_field(h: usize, w: usize, value: f64) -> ScalarField {
    ScalarField::dense(Grid::new(h, w, value))
}
