//! Central finite-difference checks of analytic gradients.
//!
//! A coordinate counts as non-smooth (and is skipped) when the central
//! differences at step `h` and `h / 2` disagree by more than a quarter of
//! the tolerance, or when a probe moves some relu or clamp input across its
//! kink (the graph's branch signature changes). Everywhere else the step-`h` difference is compared with
//! the analytic gradient by relative error.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Binder, Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates sampled per tensor (all of them when the tensor is smaller).
    pub coords_per_tensor: usize,
    /// Differences below this are treated as exact regardless of scale.
    pub abs_floor: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { step: 1e-3, tolerance: 1e-4, coords_per_tensor: 12, abs_floor: 1e-9 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct CheckOutcome {
    pub checked: usize,
    pub skipped_nonsmooth: usize,
    pub max_rel_error: f64,
    /// Tensor name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

impl CheckOutcome {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tolerance && self.skipped_nonsmooth <= self.checked
    }

    pub fn merge(&mut self, other: CheckOutcome) {
        self.checked += other.checked;
        self.skipped_nonsmooth += other.skipped_nonsmooth;
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

/// Compares analytic and numeric gradients of the scalar produced by `f`
/// with respect to every tensor of `store` and every entry of `inputs`.
pub fn check_gradients<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    f: F,
    opts: &CheckOptions,
    rng: &mut ChaCha8Rng,
) -> CheckOutcome
where
    F: Fn(&mut Graph, &mut Binder<'_>, &[Var]) -> Var,
{
    let (param_grads, input_grads) = {
        let mut g = Graph::new();
        let mut binder = Binder::new(store, true);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let root = f(&mut g, &mut binder, &vars);
        assert_eq!(g.value(root).len(), 1, "gradient check needs a scalar output");
        let mut grads = g.backward(root);
        let pg = binder.gradients(&mut grads);
        let ig: Vec<Tensor> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        (pg, ig)
    };

    let eval = |s: &ParamStore, inp: &[Tensor]| -> (f64, u64) {
        let mut g = Graph::new();
        let mut binder = Binder::frozen(s);
        let vars: Vec<Var> = inp.iter().map(|t| g.constant(t.clone())).collect();
        let root = f(&mut g, &mut binder, &vars);
        (g.value(root).data()[0], g.branch_signature())
    };
    let base_branches = eval(store, inputs).1;

    let mut outcome = CheckOutcome::default();
    let mut work_store = store.clone();
    let mut work_inputs: Vec<Tensor> = inputs.to_vec();
    let n_params = store.len();
    for t in 0..n_params + inputs.len() {
        let (name, len) = if t < n_params {
            (store.name(t).to_string(), store.tensor(t).len())
        } else {
            (alloc::format!("input{}", t - n_params), inputs[t - n_params].len())
        };
        let coords: Vec<usize> = if len <= opts.coords_per_tensor {
            (0..len).collect()
        } else {
            sample(rng, len, opts.coords_per_tensor).into_vec()
        };
        for i in coords {
            let analytic = if t < n_params {
                param_grads[t].data()[i]
            } else {
                input_grads[t - n_params].data()[i]
            };
            let mut kinked = false;
            let mut central = |step: f64| {
                let mut probe = |delta: f64| {
                    let slot = if t < n_params {
                        &mut work_store.tensor_mut(t).data_mut()[i]
                    } else {
                        &mut work_inputs[t - n_params].data_mut()[i]
                    };
                    let orig = *slot;
                    *slot = orig + delta;
                    let (v, branches) = eval(&work_store, &work_inputs);
                    kinked |= branches != base_branches;
                    let slot = if t < n_params {
                        &mut work_store.tensor_mut(t).data_mut()[i]
                    } else {
                        &mut work_inputs[t - n_params].data_mut()[i]
                    };
                    *slot = orig;
                    v
                };
                (probe(step) - probe(-step)) / (2.0 * step)
            };
            let numeric = central(opts.step);
            let numeric_half = central(opts.step / 2.0);
            let scale = numeric.abs().max(analytic.abs());
            if kinked || (numeric - numeric_half).abs() > 0.25 * opts.tolerance * scale.max(opts.abs_floor) {
                outcome.skipped_nonsmooth += 1;
                continue;
            }
            let diff = (numeric - analytic).abs();
            let rel = if diff < opts.abs_floor { 0.0 } else { diff / scale };
            outcome.checked += 1;
            if outcome.worst.is_none() || rel > outcome.max_rel_error {
                outcome.max_rel_error = rel;
                outcome.worst = Some((name.clone(), i));
            }
        }
    }
    outcome
}
