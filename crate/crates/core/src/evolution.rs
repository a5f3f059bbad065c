//! Interest evolution over the pooled cluster sequence, the prediction head
//! and the training objective.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::extraction::{RegWeights, RegularizerTerms};
use crate::fusion::LEAKY_SLOPE;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// Probabilities are clipped to `[CLIP, 1 − CLIP]` before the log.
pub const CLIP: f64 = 1e-7;

/// Hidden sizes of the prediction MLP.
pub const HEAD_HIDDEN: [usize; 2] = [100, 64];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvolutionKind {
    Gru,
    Augru,
}

impl std::str::FromStr for EvolutionKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "gru" => Ok(Self::Gru),
            "augru" => Ok(Self::Augru),
            other => Err(format!("unknown evolution layer '{other}' (expected gru or augru)")),
        }
    }
}

/// Gate weights: update `u`, reset `r`, candidate `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub w_u: ParamId,
    pub u_u: ParamId,
    pub b_u: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub b_h: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruParams {
    pub fn register<T: Scalar, R: Rng>(store: &mut ParamStore<T>, input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut gate = |name: &str| {
            (
                store.xavier(format!("evolution.w_{name}"), input, hidden, rng),
                store.xavier(format!("evolution.u_{name}"), hidden, hidden, rng),
                store.bias(format!("evolution.b_{name}"), hidden),
            )
        };
        let (w_u, u_u, b_u) = gate("u");
        let (w_r, u_r, b_r) = gate("r");
        let (w_h, u_h, b_h) = gate("h");
        Self { w_u, u_u, b_u, w_r, u_r, b_r, w_h, u_h, b_h, input, hidden }
    }
}

/// Runs the recurrence over the rows of `seq` (`steps×input`) from a zero
/// state and returns the final state (`1×hidden`).
///
/// With `attention = Some(a)` (`steps×1`) the update gate at step `t` is
/// scaled by `a_t` clamped to `[0, 1]` (AUGRU); with `None` it is a plain GRU.
///
/// ```text
/// u_t = σ(x_t W_u + h_{t−1} U_u + b_u)
/// r_t = σ(x_t W_r + h_{t−1} U_r + b_r)
/// ĥ_t = tanh(x_t W_h + r_t ⊙ (h_{t−1} U_h) + b_h)
/// h_t = (1 − a_t u_t) ⊙ h_{t−1} + a_t u_t ⊙ ĥ_t
/// ```
pub fn augru_forward<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    store: &'a ParamStore<T>,
    params: &GruParams,
    seq: Var,
    attention: Option<Var>,
) -> Var {
    let steps = g.shape(seq).0;
    let mut p = |id: ParamId| g.param(id, store.view(id));
    let (w_u, u_u, b_u) = (p(params.w_u), p(params.u_u), p(params.b_u));
    let (w_r, u_r, b_r) = (p(params.w_r), p(params.u_r), p(params.b_r));
    let (w_h, u_h, b_h) = (p(params.w_h), p(params.u_h), p(params.b_h));

    let xu = g.matmul(seq, w_u);
    let xu = g.add(xu, b_u);
    let xr = g.matmul(seq, w_r);
    let xr = g.add(xr, b_r);
    let xh = g.matmul(seq, w_h);
    let xh = g.add(xh, b_h);
    let gate_scale = attention.map(|a| g.clamp(a, T::zero(), T::one()));

    let mut h = g.constant(Array2::zeros((1, params.hidden)));
    for t in 0..steps {
        let hu = g.matmul(h, u_u);
        let xu_t = g.slice_rows(xu, t, 1);
        let u = g.add(xu_t, hu);
        let mut u = g.sigmoid(u);

        let hr = g.matmul(h, u_r);
        let xr_t = g.slice_rows(xr, t, 1);
        let r = g.add(xr_t, hr);
        let r = g.sigmoid(r);

        let hh = g.matmul(h, u_h);
        let rh = g.mul(r, hh);
        let xh_t = g.slice_rows(xh, t, 1);
        let cand = g.add(xh_t, rh);
        let cand = g.tanh(cand);

        if let Some(a) = gate_scale {
            let a_t = g.slice_rows(a, t, 1);
            u = g.mul(u, a_t);
        }
        let delta = g.sub(cand, h);
        let step = g.mul(u, delta);
        h = g.add(h, step);
    }
    h
}

/// Feed-forward head `input → 100 → 64 → 1`, LeakyReLU between layers.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionHead {
    pub layers: Vec<(ParamId, ParamId)>,
    pub input: usize,
}

impl PredictionHead {
    pub fn register<T: Scalar, R: Rng>(store: &mut ParamStore<T>, input: usize, rng: &mut R) -> Self {
        let mut dims = vec![input];
        dims.extend(HEAD_HIDDEN);
        dims.push(1);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| (store.xavier(format!("head.w{k}"), w[0], w[1], rng), store.bias(format!("head.b{k}"), w[1])))
            .collect();
        Self { layers, input }
    }

    /// Input dimension for given readout / evolution sizes.
    pub fn input_dim(readout_dim: Option<usize>, target_dim: usize, hidden: usize) -> usize {
        match readout_dim {
            Some(d) => hidden + 3 * d,
            None => hidden + target_dim,
        }
    }

    /// `1×input → 1×1` logit.
    pub fn forward<'a, T: Scalar>(&self, g: &mut Graph<'a, T>, store: &'a ParamStore<T>, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            let wv = g.param(w, store.view(w));
            let bv = g.param(b, store.view(b));
            let z = g.matmul(h, wv);
            h = g.add(z, bv);
            if k != last {
                h = g.leaky_relu(h, T::lit(LEAKY_SLOPE));
            }
        }
        h
    }
}

/// `h_t` repeated until it matches `width` columns.
fn tile<T: Scalar>(g: &mut Graph<'_, T>, target: Var, width: usize) -> Var {
    let d = g.shape(target).1;
    assert!(width % d == 0, "readout width {width} not a multiple of target width {d}");
    let copies = width / d;
    if copies == 1 {
        target
    } else {
        g.concat_cols(&vec![target; copies])
    }
}

/// Prediction logit from `h_s ‖ h_g ‖ h_t ‖ h_g ⊙ h_t`, or `h_s ‖ h_t` without
/// a readout. When `h_g` is wider than `h_t` (multi-head fusion), `h_t` is
/// tiled across the heads.
pub fn predict_logit<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    store: &'a ParamStore<T>,
    head: &PredictionHead,
    h_s: Var,
    h_g: Option<Var>,
    target: Var,
) -> Var {
    let x = match h_g {
        Some(hg) => {
            let tiled = tile(g, target, g.shape(hg).1);
            let cross = g.mul(hg, tiled);
            g.concat_cols(&[h_s, hg, tiled, cross])
        }
        None => g.concat_cols(&[h_s, target]),
    };
    head.forward(g, store, x)
}

/// Clipped binary negative log-likelihood of one logit.
pub fn nll<T: Scalar>(g: &mut Graph<'_, T>, logit: Var, label: bool) -> Var {
    let p = g.sigmoid(logit);
    let p = g.clamp(p, T::lit(CLIP), T::one() - T::lit(CLIP));
    let q = if label {
        p
    } else {
        let one = g.constant(Array2::ones((1, 1)));
        g.sub(one, p)
    };
    let l = g.ln(q);
    g.scale(l, -T::one())
}

/// Objective over a scored batch:
/// `−mean(y ln ŷ + (1−y) ln(1−ŷ)) + λ‖Θ‖² + λ_M L_M + λ_A L_A + λ_P L_P`.
pub fn loss_value(probs: &[f64], labels: &[bool], l2: f64, theta_sq: f64, regs: &RegularizerTerms, weights: &RegWeights) -> f64 {
    assert_eq!(probs.len(), labels.len());
    let nll: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(CLIP, 1.0 - CLIP);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / probs.len().max(1) as f64;
    nll + l2 * theta_sq + regs.weighted(weights)
}
