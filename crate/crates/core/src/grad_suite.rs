//! Finite-difference checks of every differentiable stage of the model on
//! small random instances.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ops, Graph, Var};
use crate::backbone::{self, Backbone, BackboneConfig, UpsampleMode, LOOKUP_CHANNELS};
use crate::edge::{self, EdgeConfig, EdgeEstimator};
use crate::gradcheck::{check_gradients, CheckOptions, CheckOutcome};
use crate::math::{cb_l1, cb_l1_grad, cb_smooth_l1, cb_smooth_l1_grad, ClipBound};
use crate::params::ParamStore;
use crate::regression::{self, UnitKind, UpdateState, UpdateUnit, UpdateUnitConfig};
use crate::tensor::Tensor;

/// Names of the checked stages, in suite order.
pub const STAGES: [&str; 11] = [
    "encode_features",
    "build_cost_volume",
    "lookup",
    "initial_disparity",
    "stepwise_update",
    "upsample_disparity_bilinear",
    "upsample_disparity_convex",
    "edge_estimate",
    "soft_edge_of_disparity",
    "cb_l1_loss",
    "cb_smooth_l1_loss",
];

#[derive(Clone, Debug)]
pub struct StageResult {
    pub stage: String,
    pub instances: usize,
    pub instances_passed: usize,
    pub outcome: CheckOutcome,
}

impl StageResult {
    pub fn passed(&self) -> bool {
        self.instances > 0 && self.instances_passed == self.instances
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Replaces every parameter with a random value of moderate size so that
/// zero-initialized layers are exercised too.
fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, amplitude: f64) {
    for i in 0..store.len() {
        store.tensor_mut(i).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-amplitude..amplitude));
    }
}

fn projection(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn small_backbone(rng: &mut ChaCha8Rng, upsample: UpsampleMode) -> (ParamStore, Backbone) {
    let mut store = ParamStore::new();
    let cfg = BackboneConfig { feature_channels: 4, context_channels: 3, hidden_channels: 4, temperature: 0.5, upsample };
    let bb = Backbone::new(&mut store, rng, cfg);
    randomize(&mut store, rng, 0.4);
    (store, bb)
}

/// Projected scalar `sum(w * v)` of a node.
fn project(g: &mut Graph, v: Var, w: &[f64]) -> Var {
    ops::weighted_sum(g, v, w.to_vec())
}

fn check_instance(stage: &str, rng: &mut ChaCha8Rng, opts: &CheckOptions) -> CheckOutcome {
    match stage {
        "encode_features" => {
            let (store, bb) = small_backbone(rng, UpsampleMode::Bilinear);
            let img = uniform(rng, &[3, 8, 12], 0.0, 1.0);
            let w = projection(rng, 4 * 2 * 3);
            check_gradients(&store, &[img], |g, p, v| {
                let f = bb.encode_features(g, p, v[0]);
                project(g, f, &w)
            }, opts, rng)
        }
        "build_cost_volume" => {
            let l = uniform(rng, &[4, 3, 8], -1.0, 1.0);
            let r = uniform(rng, &[4, 3, 8], -1.0, 1.0);
            let (wc, wp) = (projection(rng, 6 * 24), projection(rng, 3 * 24));
            check_gradients(&ParamStore::new(), &[l, r], |g, _, v| {
                let vol = backbone::build_cost_volume(g, v[0], v[1], 6).expect("valid levels");
                let a = project(g, vol.cost, &wc);
                let b = project(g, vol.pooled, &wp);
                ops::add(g, a, b)
            }, opts, rng)
        }
        "lookup" => {
            let cost = uniform(rng, &[6, 3, 5], -1.0, 1.0);
            let pooled = uniform(rng, &[3, 3, 5], -1.0, 1.0);
            let d = uniform(rng, &[1, 3, 5], 0.1, 5.0);
            let w = projection(rng, LOOKUP_CHANNELS * 15);
            check_gradients(&ParamStore::new(), &[cost, pooled, d], |g, _, v| {
                let vol = backbone::CostVolume { cost: v[0], pooled: v[1] };
                let f = backbone::lookup(g, &vol, v[2]);
                project(g, f, &w)
            }, opts, rng)
        }
        "initial_disparity" => {
            let cost = uniform(rng, &[6, 2, 3], -1.0, 1.0);
            let temperature = rng.random_range(0.2..2.0);
            let w = projection(rng, 6);
            check_gradients(&ParamStore::new(), &[cost], |g, _, v| {
                let d = backbone::initial_disparity(g, v[0], temperature).expect("positive temperature");
                project(g, d, &w)
            }, opts, rng)
        }
        "stepwise_update" => {
            let mut store = ParamStore::new();
            let m = ClipBound::new(rng.random_range(0.5..3.0)).expect("positive");
            let cfg = UpdateUnitConfig { kind: UnitKind::Stepwise, m: Some(m), hidden_channels: 3 };
            let unit = UpdateUnit::new(&mut store, rng, "unit", cfg, 2).expect("valid unit");
            randomize(&mut store, rng, 0.3);
            let hidden = uniform(rng, &[3, 3, 4], -1.0, 1.0);
            let lookup = uniform(rng, &[LOOKUP_CHANNELS, 3, 4], -1.0, 1.0);
            let context = uniform(rng, &[2, 3, 4], 0.0, 1.0);
            // keep d + delta away from the clamp at zero
            let d = uniform(rng, &[1, 3, 4], 6.0, 9.0);
            let (wd, wh, wq) = (projection(rng, 12), projection(rng, 36), projection(rng, 12));
            check_gradients(&store, &[hidden, lookup, context], |g, p, v| {
                let state = UpdateState { hidden: v[0], d_quarter: d.clone(), step_index: 0 };
                let out = unit.step(g, p, &state, v[1], v[2]);
                let a = project(g, out.delta, &wd);
                let b = project(g, out.hidden, &wh);
                let c = project(g, out.d_quarter, &wq);
                ops::add_scalars(g, &[a, b, c])
            }, opts, rng)
        }
        "upsample_disparity_bilinear" | "upsample_disparity_convex" => {
            let mode = if stage.ends_with("convex") { UpsampleMode::Convex } else { UpsampleMode::Bilinear };
            let (store, bb) = small_backbone(rng, mode);
            let d = uniform(rng, &[1, 2, 3], 0.0, 4.0);
            let feat = uniform(rng, &[4, 2, 3], -1.0, 1.0);
            let img = uniform(rng, &[3, 8, 12], 0.0, 1.0);
            let w = projection(rng, 96);
            check_gradients(&store, &[d, feat, img], |g, p, v| {
                let up = bb.upsample(g, p, v[0], v[1], v[2]);
                project(g, up, &w)
            }, opts, rng)
        }
        "edge_estimate" => {
            let mut est = EdgeEstimator::new(EdgeConfig { seed: rng.random(), ..EdgeConfig::default() });
            randomize(&mut est.store, rng, 0.3);
            let d = uniform(rng, &[1, 5, 6], 0.0, 8.0);
            let rgb = uniform(rng, &[3, 5, 6], 0.0, 1.0);
            let w = projection(rng, 30);
            let net = est.clone();
            check_gradients(&est.store, &[d, rgb], |g, p, v| {
                let e = net.forward(g, p, v[0], v[1]);
                project(g, e, &w)
            }, opts, rng)
        }
        "soft_edge_of_disparity" => {
            let d = uniform(rng, &[1, 5, 6], 0.0, 3.5);
            let w = projection(rng, 30);
            check_gradients(&ParamStore::new(), &[d], |g, _, v| {
                let e = edge::soft_edge_graph(g, v[0]);
                project(g, e, &w)
            }, opts, rng)
        }
        "cb_l1_loss" | "cb_smooth_l1_loss" => {
            let smooth = stage == "cb_smooth_l1_loss";
            let h = rng.random_range(0.0..1.0);
            let pred = uniform(rng, &[1, 4, 5], -3.0, 3.0);
            let values = uniform(rng, &[1, 4, 5], -3.0, 3.0);
            let valid: Vec<bool> = (0..20).map(|_| rng.random_bool(0.8)).collect();
            let target = crate::field::ScalarField {
                values: crate::field::Grid::from_vec(4, 5, values.into_vec()),
                valid: crate::field::Grid::from_vec(4, 5, valid),
            };
            check_gradients(&ParamStore::new(), &[pred], |g, _, v| {
                if smooth {
                    regression::masked_elementwise_loss(g, v[0], &target, move |x| cb_smooth_l1(x, h), move |x| cb_smooth_l1_grad(x, h))
                } else {
                    regression::masked_elementwise_loss(g, v[0], &target, move |x| cb_l1(x, h), move |x| cb_l1_grad(x, h))
                }
            }, opts, rng)
        }
        other => panic!("unknown stage {other}"),
    }
}

/// Runs `instances` random checks of every stage in [`STAGES`].
pub fn run_suite(instances: usize, seed: u64, opts: &CheckOptions) -> Vec<StageResult> {
    STAGES
        .iter()
        .enumerate()
        .map(|(k, &stage)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let mut result =
                StageResult { stage: stage.into(), instances, instances_passed: 0, outcome: CheckOutcome::default() };
            for _ in 0..instances {
                let out = check_instance(stage, &mut rng, opts);
                if out.passed(opts.tolerance) {
                    result.instances_passed += 1;
                }
                result.outcome.merge(out);
            }
            result
        })
        .collect()
}
