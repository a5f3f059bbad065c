//! Interest extraction by differentiable graph pooling.
//!
//! A soft assignment `S` (`n×m`, rows on the simplex) maps the fused nodes to
//! `m` clusters by one round of sum message passing over `A + I` followed by a
//! row softmax. Cluster embeddings, scores and adjacency are `Sᵀh'`, `Sᵀγ` and
//! `SᵀAS`. Three auxiliary losses shape `S`:
//!
//! * same mapping `L_M = ‖A − SSᵀ‖_F`: linked nodes share clusters;
//! * single affiliation `L_A = (1/n) Σ_i H(S_i:)`: rows close to one-hot;
//! * relative position `L_P = ‖P_n S − P_m‖₂` with `P_k = (1, …, k)`: early
//!   nodes go to early clusters, so the cluster order stays temporal.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// `W_p`, mapping aggregated fused embeddings to `m` cluster logits.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentParams {
    pub w_p: ParamId,
    pub clusters: usize,
}

impl AssignmentParams {
    pub fn register<T: Scalar, R: Rng>(store: &mut ParamStore<T>, input: usize, clusters: usize, rng: &mut R) -> Self {
        assert!(clusters >= 1, "pooled length must be at least 1");
        Self { w_p: store.xavier("extraction.w_p", input, clusters, rng), clusters }
    }
}

/// `A + I` as a constant.
fn self_looped<T: Scalar>(adjacency: ArrayView2<'_, T>) -> Array2<T> {
    let mut a = adjacency.to_owned();
    a.diag_mut().mapv_inplace(|_| T::one());
    a
}

/// `S_i: = softmax(W_p Σ_{j ∈ N_i} A_ij h'_j)` with self-loops, `n×m`.
pub fn assignment<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    store: &'a ParamStore<T>,
    fused: Var,
    adjacency: ArrayView2<'_, T>,
    params: &AssignmentParams,
) -> Var {
    let a = g.constant(self_looped(adjacency));
    let agg = g.matmul(a, fused);
    let w = g.param(params.w_p, store.view(params.w_p));
    let logits = g.matmul(agg, w);
    g.softmax_rows(logits)
}

#[derive(Clone, Copy, Debug)]
pub struct PooledVars {
    /// `m×D`.
    pub embeddings: Var,
    /// `m×1`.
    pub scores: Var,
}

/// `h* = Sᵀh'`, `γ* = Sᵀγ`.
pub fn pool<T: Scalar>(g: &mut Graph<'_, T>, s: Var, fused: Var, gamma: Var) -> PooledVars {
    let st = g.t(s);
    let embeddings = g.matmul(st, fused);
    let scores = g.matmul(st, gamma);
    PooledVars { embeddings, scores }
}

/// `A* = SᵀAS`, `m×m`.
pub fn pooled_adjacency<T: Scalar>(g: &mut Graph<'_, T>, s: Var, adjacency: ArrayView2<'_, T>) -> Var {
    let a = g.constant(adjacency.to_owned());
    let st = g.t(s);
    let sta = g.matmul(st, a);
    g.matmul(sta, s)
}

/// `L_M = ‖A − SSᵀ‖_F`.
pub fn reg_same_mapping<T: Scalar>(g: &mut Graph<'_, T>, adjacency: ArrayView2<'_, T>, s: Var) -> Var {
    let a = g.constant(adjacency.to_owned());
    let st = g.t(s);
    let sst = g.matmul(s, st);
    let diff = g.sub(a, sst);
    g.norm(diff)
}

/// `L_A = (1/n) Σ_i H(S_i:)`, natural log, `0 ln 0 = 0`.
pub fn reg_single_affiliation<T: Scalar>(g: &mut Graph<'_, T>, s: Var) -> Var {
    let n = g.shape(s).0;
    let plogp = g.xlogx(s);
    let total = g.sum(plogp);
    g.scale(total, -T::one() / T::from_usize(n).unwrap())
}

/// `L_P = ‖P_n S − P_m‖₂`.
pub fn reg_relative_position<T: Scalar>(g: &mut Graph<'_, T>, s: Var) -> Var {
    let (n, m) = g.shape(s);
    let pn = g.constant(Array2::from_shape_fn((1, n), |(_, i)| T::from_usize(i + 1).unwrap()));
    let pm = g.constant(Array2::from_shape_fn((1, m), |(_, j)| T::from_usize(j + 1).unwrap()));
    let placed = g.matmul(pn, s);
    let diff = g.sub(placed, pm);
    g.norm(diff)
}

/// `h_g = Σ_i γ_i h'_i`, `1×D`.
pub fn readout<T: Scalar>(g: &mut Graph<'_, T>, gamma: Var, fused: Var) -> Var {
    let gt = g.t(gamma);
    g.matmul(gt, fused)
}

/// Values of a pooled graph for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledGraph<T> {
    pub assignment: Array2<T>,
    pub embeddings: Array2<T>,
    pub scores: Array1<T>,
    pub adjacency: Array2<T>,
}

impl<T: Scalar> PooledGraph<T> {
    /// Pools concrete values through the same tape operations.
    pub fn compute(s: ArrayView2<'_, T>, fused: ArrayView2<'_, T>, gamma: &[T], adjacency: ArrayView2<'_, T>) -> Self {
        let mut g: Graph<'_, T> = Graph::new();
        let sv = g.constant(s.to_owned());
        let hv = g.constant(fused.to_owned());
        let gv = g.constant(Array2::from_shape_vec((gamma.len(), 1), gamma.to_vec()).expect("gamma column"));
        let pooled = pool(&mut g, sv, hv, gv);
        let a = pooled_adjacency(&mut g, sv, adjacency);
        Self {
            assignment: s.to_owned(),
            embeddings: g.value(pooled.embeddings).to_owned(),
            scores: g.value(pooled.scores).column(0).to_owned(),
            adjacency: g.value(a).to_owned(),
        }
    }

    /// Text dump of `S`, one row per node.
    pub fn assignment_text(&self) -> String {
        let mut out = String::new();
        for row in self.assignment.rows() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Regulariser weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegWeights {
    pub same_mapping: f64,
    pub single_affiliation: f64,
    pub relative_position: f64,
}

impl Default for RegWeights {
    fn default() -> Self {
        Self { same_mapping: 1e-5, single_affiliation: 1e-5, relative_position: 1e-5 }
    }
}

/// Values of the three auxiliary losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegularizerTerms {
    pub same_mapping: f64,
    pub single_affiliation: f64,
    pub relative_position: f64,
}

impl RegularizerTerms {
    pub fn weighted(&self, w: &RegWeights) -> f64 {
        w.same_mapping * self.same_mapping
            + w.single_affiliation * self.single_affiliation
            + w.relative_position * self.relative_position
    }

    pub fn add(&mut self, other: &RegularizerTerms) {
        self.same_mapping += other.same_mapping;
        self.single_affiliation += other.single_affiliation;
        self.relative_position += other.relative_position;
    }

    pub fn scale(&mut self, c: f64) {
        self.same_mapping *= c;
        self.single_affiliation *= c;
        self.relative_position *= c;
    }

    /// Evaluates all three terms for concrete `A` and `S`.
    pub fn compute<T: Scalar>(adjacency: ArrayView2<'_, T>, s: ArrayView2<'_, T>) -> Self {
        let mut g: Graph<'_, T> = Graph::new();
        let sv = g.constant(s.to_owned());
        let lm = reg_same_mapping(&mut g, adjacency, sv);
        let la = reg_single_affiliation(&mut g, sv);
        let lp = reg_relative_position(&mut g, sv);
        Self {
            same_mapping: g.scalar(lm).as_f64(),
            single_affiliation: g.scalar(la).as_f64(),
            relative_position: g.scalar(lp).as_f64(),
        }
    }
}
