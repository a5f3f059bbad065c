//! Central finite-difference gradient checking.
//!
//! Used by the unit tests of every differentiable layer and by the end-to-end
//! acceptance check. Everything here runs in `f64`.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::autograd::{Graph, Var};
use crate::params::{ParamGrads, ParamStore};

/// Entries whose analytic and numeric magnitudes are both below this are
/// compared absolutely; central differences at `h = 1e-5` carry roughly
/// `1e-11`..`1e-10` of rounding noise on an O(1) loss, so a relative error
/// below this magnitude measures the noise and not the gradient.
pub const ABS_FLOOR: f64 = 1e-6;

/// Summary of one comparison.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input, row, col)` of the worst relative error.
    pub worst: Option<(usize, usize, usize)>,
}

impl GradCheck {
    fn record(&mut self, analytic: f64, numeric: f64, at: (usize, usize, usize)) {
        let abs = (analytic - numeric).abs();
        let rel = relative_error(analytic, numeric);
        self.checked += 1;
        self.max_abs_error = self.max_abs_error.max(abs);
        if rel > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst = Some(at);
        }
    }

    pub fn merge(&mut self, other: &GradCheck) {
        self.checked += other.checked;
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

/// `|a - n| / max(|a|, |n|, ABS_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Checks `d build(inputs) / d inputs` for differentiable leaf inputs.
///
/// `build` must return a `1×1` node and must be deterministic.
pub fn check_leaf_gradients<F>(inputs: &[Array2<f64>], step: f64, build: &F) -> GradCheck
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Var,
{
    let eval = |xs: &[Array2<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.variable(x.clone())).collect();
        let out = build(&mut g, &vars);
        g.scalar(out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.variable(x.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out);

    let mut report = GradCheck::default();
    let mut work: Vec<Array2<f64>> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).cloned().unwrap_or_else(|| Array2::zeros(inputs[k].dim()));
        for ((r, c), &a) in analytic.indexed_iter() {
            let orig = work[k][[r, c]];
            work[k][[r, c]] = orig + step;
            let plus = eval(&work);
            work[k][[r, c]] = orig - step;
            let minus = eval(&work);
            work[k][[r, c]] = orig;
            report.record(a, (plus - minus) / (2.0 * step), (k, r, c));
        }
    }
    report
}

/// Checks parameter gradients of a scalar loss, one report per parameter
/// group (name prefix before the first `.`).
///
/// `loss` evaluates the loss and its analytic gradients at the given
/// parameters.
pub fn check_param_gradients<F>(
    store: &ParamStore<f64>,
    step: f64,
    loss: F,
) -> BTreeMap<String, GradCheck>
where
    F: Fn(&ParamStore<f64>) -> (f64, ParamGrads<f64>),
{
    let (_, grads) = loss(store);
    let mut work = store.clone();
    let mut out: BTreeMap<String, GradCheck> = BTreeMap::new();
    for id in store.ids() {
        let shape = store.get(id).dim();
        let analytic = grads.dense(id, shape);
        let entry = out.entry(store.group(id).to_string()).or_default();
        for ((r, c), &a) in analytic.indexed_iter() {
            let orig = work.get(id)[[r, c]];
            work.get_mut(id)[[r, c]] = orig + step;
            let plus = loss(&work).0;
            work.get_mut(id)[[r, c]] = orig - step;
            let minus = loss(&work).0;
            work.get_mut(id)[[r, c]] = orig;
            entry.record(a, (plus - minus) / (2.0 * step), (id.0, r, c));
        }
    }
    out
}
