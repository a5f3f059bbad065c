//! Cluster- and query-aware graph attentive convolution.
//!
//! For node `i` with neighbourhood `N_i = {j : A_ij = 1} ∪ {i}`:
//!
//! * cluster score `α_i` rates whether `i` sits at the centre of its k-hop
//!   cluster, from `W_c h_i`, the cluster mean `h_{i_c}` and their product;
//! * query score `β_j` rates how relevant source `j` is to the target item;
//! * coefficients `E_ij = softmax_{j ∈ N_i}(α_i + β_j)`;
//! * per head `δ`, `z_i = σ(W_a^δ Σ_j E_ij h_j + h_i)`, and the heads are
//!   concatenated into `h'_i`.
//!
//! Node scores `γ = softmax(β)` over the valid nodes weight the later readout
//! and pooling.
//!
//! `α_i` shifts every logit of row `i` by the same amount, so it cancels inside
//! the row softmax; coefficients depend on `β` alone.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// Slope used by every LeakyReLU in the fusion layer.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    Identity,
}

impl Activation {
    pub fn apply<T: Scalar>(self, g: &mut Graph<'_, T>, x: Var) -> Var {
        match self {
            Activation::LeakyRelu => g.leaky_relu(x, T::lit(LEAKY_SLOPE)),
            Activation::Identity => x,
        }
    }
}

/// Two-layer feed-forward scorer `x → LeakyReLU(x W1 + b1) W2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreNet {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ScoreNet {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w1: store.xavier(format!("{prefix}.w1"), input, hidden, rng),
            b1: store.bias(format!("{prefix}.b1"), hidden),
            w2: store.xavier(format!("{prefix}.w2"), hidden, 1, rng),
            b2: store.bias(format!("{prefix}.b2"), 1),
        }
    }

    /// `n×input → n×1`.
    pub fn forward<'a, T: Scalar>(&self, g: &mut Graph<'a, T>, store: &'a ParamStore<T>, x: Var) -> Var {
        let w1 = g.param(self.w1, store.view(self.w1));
        let b1 = g.param(self.b1, store.view(self.b1));
        let w2 = g.param(self.w2, store.view(self.w2));
        let b2 = g.param(self.b2, store.view(self.b2));
        let hidden = g.matmul(x, w1);
        let hidden = g.add(hidden, b1);
        let hidden = g.leaky_relu(hidden, T::lit(LEAKY_SLOPE));
        let out = g.matmul(hidden, w2);
        g.add(out, b2)
    }
}

/// Parameters of one set of cluster/query scorers.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreParams {
    /// `W_c` and `Attention_c`; absent when cluster-aware attention is off.
    pub cluster: Option<(ParamId, ScoreNet)>,
    /// `W_q` and `Attention_q`; absent when query-aware attention is off.
    pub query: Option<(ParamId, ScoreNet)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionOptions {
    pub heads: usize,
    pub hops: usize,
    pub attention_hidden: usize,
    pub cluster_aware: bool,
    pub query_aware: bool,
    /// One scorer pair per head instead of one shared pair.
    pub per_head_scores: bool,
    pub activation: Activation,
    /// Without propagation only the query scorer (for `γ`) is registered.
    pub propagate: bool,
}

impl Default for FusionOptions {
    fn default() -> Self {
        Self {
            heads: 2,
            hops: 1,
            attention_hidden: 40,
            cluster_aware: true,
            query_aware: true,
            per_head_scores: false,
            activation: Activation::LeakyRelu,
            propagate: true,
        }
    }
}

/// Registered fusion-layer parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    /// `W_a^δ`, one `d×d` map per head.
    pub w_a: Vec<ParamId>,
    /// Length 1 when scorers are shared, `heads` otherwise.
    pub scores: Vec<ScoreParams>,
    pub options: FusionOptions,
}

impl FusionParams {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        dim: usize,
        options: FusionOptions,
        rng: &mut R,
    ) -> Self {
        let w_a = if options.propagate {
            (0..options.heads).map(|k| store.xavier(format!("fusion.w_a.{k}"), dim, dim, rng)).collect()
        } else {
            Vec::new()
        };
        let sets = if options.per_head_scores { options.heads } else { 1 };
        let scores = (0..sets)
            .map(|k| {
                let cluster = (options.propagate && options.cluster_aware).then(|| {
                    let w = store.xavier(format!("fusion.w_c.{k}"), dim, dim, rng);
                    let net = ScoreNet::register(store, &format!("fusion.att_c.{k}"), 3 * dim, options.attention_hidden, rng);
                    (w, net)
                });
                let query = options.query_aware.then(|| {
                    let w = store.xavier(format!("fusion.w_q.{k}"), dim, dim, rng);
                    let net = ScoreNet::register(store, &format!("fusion.att_q.{k}"), 3 * dim, options.attention_hidden, rng);
                    (w, net)
                });
                ScoreParams { cluster, query }
            })
            .collect();
        Self { w_a, scores, options }
    }
}

/// Row-normalised k-hop reachability (self included): `C_ij = 1/|R_i|` for
/// `j` within `hops` steps of `i`.
pub fn cluster_operator<T: Scalar>(adjacency: ArrayView2<'_, T>, hops: usize) -> Array2<T> {
    let n = adjacency.nrows();
    let mut reach = Array2::from_shape_fn((n, n), |(i, j)| i == j || adjacency[[i, j]] != T::zero());
    for _ in 1..hops {
        let prev = reach.clone();
        for i in 0..n {
            for j in 0..n {
                if !prev[[i, j]] && (0..n).any(|k| prev[[i, k]] && adjacency[[k, j]] != T::zero()) {
                    reach[[i, j]] = true;
                }
            }
        }
    }
    let mut op = Array2::zeros((n, n));
    for (i, row) in reach.rows().into_iter().enumerate() {
        let count = row.iter().filter(|&&r| r).count();
        let w = T::one() / T::from_usize(count).unwrap();
        for (j, &r) in row.iter().enumerate() {
            if r {
                op[[i, j]] = w;
            }
        }
    }
    op
}

/// Mean embedding over each node's k-hop neighbourhood, `n×d`.
pub fn cluster_embedding<T: Scalar>(g: &mut Graph<'_, T>, h: Var, adjacency: ArrayView2<'_, T>, hops: usize) -> Var {
    let op = g.constant(cluster_operator(adjacency, hops));
    g.matmul(op, h)
}

/// `[x ‖ y ‖ x ⊙ y]` for equally shaped `x`, `y`.
fn interaction<T: Scalar>(g: &mut Graph<'_, T>, x: Var, y: Var) -> Var {
    let prod = g.mul(x, y);
    g.concat_cols(&[x, y, prod])
}

/// `α_i = Attention_c(W_c h_i ‖ h_{i_c} ‖ W_c h_i ⊙ h_{i_c})`, `n×1`.
pub fn cluster_score<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    store: &'a ParamStore<T>,
    h: Var,
    h_c: Var,
    w_c: ParamId,
    net: &ScoreNet,
) -> Var {
    let w = g.param(w_c, store.view(w_c));
    let hw = g.matmul(h, w);
    let x = interaction(g, hw, h_c);
    net.forward(g, store, x)
}

/// `β_j = Attention_q(W_q h_j ‖ h_t ‖ W_q h_j ⊙ h_t)`, `n×1`. `target` is `1×d`.
pub fn query_score<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    store: &'a ParamStore<T>,
    h: Var,
    target: Var,
    w_q: ParamId,
    net: &ScoreNet,
) -> Var {
    let n = g.shape(h).0;
    let w = g.param(w_q, store.view(w_q));
    let hw = g.matmul(h, w);
    let ones = g.constant(Array2::ones((n, 1)));
    let tiled = g.matmul(ones, target);
    let x = interaction(g, hw, tiled);
    net.forward(g, store, x)
}

/// `N_i`: adjacency plus self.
pub fn neighbourhood<T: Scalar>(adjacency: ArrayView2<'_, T>) -> Array2<bool> {
    Array2::from_shape_fn(adjacency.dim(), |(i, j)| i == j || adjacency[[i, j]] != T::zero())
}

/// `E_ij = exp(α_i + β_j) / Σ_{k ∈ N_i} exp(α_i + β_k)` on `N_i`, zero elsewhere.
/// `alpha` and `beta` are `n×1`.
pub fn attention_coefficients<T: Scalar>(g: &mut Graph<'_, T>, alpha: Var, beta: Var, mask: &Array2<bool>) -> Var {
    let beta_row = g.t(beta);
    let logits = g.add(alpha, beta_row);
    g.softmax_rows_masked(logits, mask)
}

/// `h'_i = ‖_δ σ(W_a^δ Σ_j E^δ_ij h_j + h_i)`; `coeffs` holds one matrix per
/// head or a single shared one.
pub fn fuse<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    store: &'a ParamStore<T>,
    h: Var,
    coeffs: &[Var],
    w_a: &[ParamId],
    activation: Activation,
) -> Var {
    assert!(coeffs.len() == 1 || coeffs.len() == w_a.len(), "one coefficient matrix per head or one shared");
    let shared = (coeffs.len() == 1).then(|| g.matmul(coeffs[0], h));
    let mut parts = Vec::with_capacity(w_a.len());
    for (k, &w) in w_a.iter().enumerate() {
        let agg = match shared {
            Some(a) => a,
            None => g.matmul(coeffs[k], h),
        };
        let wv = g.param(w, store.view(w));
        let z = g.matmul(agg, wv);
        let z = g.add(z, h);
        parts.push(activation.apply(g, z));
    }
    if parts.len() == 1 {
        parts[0]
    } else {
        g.concat_cols(&parts)
    }
}

/// `γ = softmax(β)` over the nodes, `n×1`.
pub fn node_scores<T: Scalar>(g: &mut Graph<'_, T>, beta: Var) -> Var {
    let row = g.t(beta);
    let soft = g.softmax_rows(row);
    g.t(soft)
}

/// Handles produced by [`FusionParams::forward`].
#[derive(Clone, Debug)]
pub struct NodeStateVars {
    /// `n×(φ·d)` fused embeddings (`n×d` when propagation is disabled).
    pub fused: Var,
    /// `n×1` node scores.
    pub gamma: Var,
    /// `n×1` query scores (mean over heads with per-head scorers).
    pub beta: Var,
    /// Cluster scores, when cluster-aware attention is enabled.
    pub alpha: Option<Var>,
    pub coeffs: Vec<Var>,
}

impl FusionParams {
    /// Runs scoring and, when `propagate` is set, the attentive convolution.
    /// With `propagate = false` the node states are the raw embeddings.
    pub fn forward<'a, T: Scalar>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        h: Var,
        target: Var,
        adjacency: ArrayView2<'_, T>,
        propagate: bool,
    ) -> NodeStateVars {
        let n = g.shape(h).0;
        let propagate = propagate && self.options.propagate;
        let h_c = (propagate && self.options.cluster_aware).then(|| cluster_embedding(g, h, adjacency, self.options.hops));
        let mut alphas = Vec::new();
        let mut betas = Vec::new();
        for set in &self.scores {
            let alpha = match (&set.cluster, h_c) {
                (Some((w, net)), Some(hc)) => cluster_score(g, store, h, hc, *w, net),
                _ => g.constant(Array2::zeros((n, 1))),
            };
            let beta = match &set.query {
                Some((w, net)) => query_score(g, store, h, target, *w, net),
                None => g.constant(Array2::zeros((n, 1))),
            };
            alphas.push(alpha);
            betas.push(beta);
        }
        let beta_mean = if betas.len() == 1 {
            betas[0]
        } else {
            let mut acc = betas[0];
            for &b in &betas[1..] {
                acc = g.add(acc, b);
            }
            g.scale(acc, T::one() / T::from_usize(betas.len()).unwrap())
        };
        let gamma = node_scores(g, beta_mean);
        let alpha = self.options.cluster_aware.then(|| alphas[0]);

        if !propagate {
            return NodeStateVars { fused: h, gamma, beta: beta_mean, alpha, coeffs: Vec::new() };
        }
        let mask = neighbourhood(adjacency);
        let coeffs: Vec<Var> = alphas
            .iter()
            .zip(&betas)
            .map(|(&a, &b)| attention_coefficients(g, a, b, &mask))
            .collect();
        let fused = fuse(g, store, h, &coeffs, &self.w_a, self.options.activation);
        NodeStateVars { fused, gamma, beta: beta_mean, alpha, coeffs }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_param_gradients;
    use ndarray::{array, Axis};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn leaky(x: f64) -> f64 {
        if x > 0.0 {
            x
        } else {
            LEAKY_SLOPE * x
        }
    }

    /// Scalar re-implementation of a score network on one input row.
    fn score_ref(store: &ParamStore<f64>, net: &ScoreNet, x: &[f64]) -> f64 {
        let (w1, b1, w2, b2) = (store.get(net.w1), store.get(net.b1), store.get(net.w2), store.get(net.b2));
        let mut out = b2[[0, 0]];
        for k in 0..w1.ncols() {
            let mut z = b1[[0, k]];
            for (i, xi) in x.iter().enumerate() {
                z += xi * w1[[i, k]];
            }
            out += leaky(z) * w2[[k, 0]];
        }
        out
    }

    fn matvec(w: &Array2<f64>, h: &[f64]) -> Vec<f64> {
        (0..w.ncols()).map(|c| (0..h.len()).map(|r| h[r] * w[[r, c]]).sum()).collect()
    }

    fn setup(options: FusionOptions, d: usize, seed: u64) -> (ParamStore<f64>, FusionParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = FusionParams::register(&mut store, d, options, &mut rng);
        (store, params)
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    use rand::Rng;

    #[test]
    fn cluster_embedding_cases() {
        let h = array![[1.0, 0.0], [3.0, 3.0], [3.0, 3.0], [5.0, -1.0]];
        // star: 0 is the centre of 1 and 2; 3 isolated
        let a = array![[0.0, 1.0, 1.0, 0.0], [1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]];
        let mut g: Graph<f64> = Graph::new();
        let hv = g.constant(h.clone());
        let c = cluster_embedding(&mut g, hv, a.view(), 1);
        let c = g.value(c).to_owned();
        assert_eq!(c.row(3), h.row(3));
        let centre = (&h.row(0) + &(&h.row(1) * 2.0)) / 3.0;
        assert!((&c.row(0) - &centre).iter().all(|v| v.abs() < 1e-12));

        let complete = Array2::from_shape_fn((4, 4), |(i, j)| if i == j { 0.0 } else { 1.0 });
        let mut g: Graph<f64> = Graph::new();
        let hv = g.constant(h.clone());
        let c = cluster_embedding(&mut g, hv, complete.view(), 1);
        let mean = h.mean_axis(Axis(0)).unwrap();
        for row in g.value(c).rows() {
            assert!((&row - &mean).iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn two_hop_reaches_path_end() {
        let path = array![[0.0f64, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]];
        let one = cluster_operator(path.view(), 1);
        let two = cluster_operator(path.view(), 2);
        assert_eq!(one[[0, 2]], 0.0);
        assert!((two[[0, 2]] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn scores_match_scalar_reference() {
        let d = 3;
        let (store, params) = setup(FusionOptions { attention_hidden: 5, ..Default::default() }, d, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = random(&mut rng, 4, d);
        let h_c = random(&mut rng, 4, d);
        let target = random(&mut rng, 1, d);
        let (w_c, net_c) = params.scores[0].cluster.clone().unwrap();
        let (w_q, net_q) = params.scores[0].query.clone().unwrap();

        let mut g = Graph::new();
        let hv = g.constant(h.clone());
        let hcv = g.constant(h_c.clone());
        let tv = g.constant(target.clone());
        let alpha = cluster_score(&mut g, &store, hv, hcv, w_c, &net_c);
        let beta = query_score(&mut g, &store, hv, tv, w_q, &net_q);
        for i in 0..4 {
            let hi: Vec<f64> = h.row(i).to_vec();
            let wh = matvec(store.get(w_c), &hi);
            let hc: Vec<f64> = h_c.row(i).to_vec();
            let mut x = wh.clone();
            x.extend(&hc);
            x.extend(wh.iter().zip(&hc).map(|(a, b)| a * b));
            assert!((g.value(alpha)[[i, 0]] - score_ref(&store, &net_c, &x)).abs() < 1e-6);

            let wq = matvec(store.get(w_q), &hi);
            let t: Vec<f64> = target.row(0).to_vec();
            let mut x = wq.clone();
            x.extend(&t);
            x.extend(wq.iter().zip(&t).map(|(a, b)| a * b));
            assert!((g.value(beta)[[i, 0]] - score_ref(&store, &net_q, &x)).abs() < 1e-6);
        }
    }

    #[test]
    fn zeroed_score_network_gives_bias_constant() {
        let (mut store, params) = setup(FusionOptions::default(), 3, 3);
        let (_, net) = params.scores[0].query.clone().unwrap();
        store.get_mut(net.w1).fill(0.0);
        store.get_mut(net.w2).fill(0.0);
        store.get_mut(net.b2).fill(0.7);
        let (w_q, _) = params.scores[0].query.clone().unwrap();
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let hv = g.constant(random(&mut rng, 5, 3));
        let tv = g.constant(random(&mut rng, 1, 3));
        let beta = query_score(&mut g, &store, hv, tv, w_q, &net);
        assert!(g.value(beta).iter().all(|&b| (b - 0.7).abs() < 1e-15));
    }

    #[test]
    fn identical_nodes_get_identical_scores() {
        let (store, params) = setup(FusionOptions::default(), 3, 5);
        let (w_q, net) = params.scores[0].query.clone().unwrap();
        let h = array![[0.3, -0.2, 0.9], [0.3, -0.2, 0.9], [0.3, -0.2, 0.9]];
        let mut g = Graph::new();
        let hv = g.constant(h);
        let tv = g.constant(array![[1.0, 0.5, -0.5]]);
        let beta = query_score(&mut g, &store, hv, tv, w_q, &net);
        let b = g.value(beta);
        assert_eq!(b[[0, 0]], b[[1, 0]]);
        assert_eq!(b[[1, 0]], b[[2, 0]]);
    }

    fn coefficients(alpha: Array2<f64>, beta: Array2<f64>, adjacency: &Array2<f64>) -> Array2<f64> {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(alpha);
        let b = g.constant(beta);
        let e = attention_coefficients(&mut g, a, b, &neighbourhood(adjacency.view()));
        g.value(e).to_owned()
    }

    #[test]
    fn coefficient_cases() {
        // isolated node
        let e = coefficients(array![[0.4]], array![[-2.0]], &array![[0.0]]);
        assert_eq!(e[[0, 0]], 1.0);

        // pair with equal β
        let a = array![[0.0, 1.0], [1.0, 0.0]];
        let e = coefficients(array![[5.0], [-1.0]], array![[0.3], [0.3]], &a);
        assert!((e[[0, 0]] - 0.5).abs() < 1e-15 && (e[[0, 1]] - 0.5).abs() < 1e-15);

        // 3-node path 0-1-2
        let path = array![[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]];
        let alpha = array![[0.1], [-0.4], [0.9]];
        let beta = array![[0.5], [1.5], [-1.0]];
        let e = coefficients(alpha.clone(), beta.clone(), &path);
        let manual = |i: usize, nbrs: &[usize], j: usize| {
            let z: f64 = nbrs.iter().map(|&k| (alpha[[i, 0]] + beta[[k, 0]]).exp()).sum();
            (alpha[[i, 0]] + beta[[j, 0]]).exp() / z
        };
        assert!((e[[0, 0]] - manual(0, &[0, 1], 0)).abs() < 1e-8);
        assert!((e[[0, 1]] - manual(0, &[0, 1], 1)).abs() < 1e-8);
        assert_eq!(e[[0, 2]], 0.0);
        for j in 0..3 {
            assert!((e[[1, j]] - manual(1, &[0, 1, 2], j)).abs() < 1e-8);
        }
        assert!((e[[2, 2]] - manual(2, &[1, 2], 2)).abs() < 1e-8);
    }

    #[test]
    fn coefficients_row_stochastic_local_and_alpha_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let n = rng.gen_range(1..8);
            let m = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
            let m = (&m + &m.t()) / 2.0;
            let a = crate::graph_builder::sparsify(m.view(), rng.gen_range(0.05..1.0));
            let alpha = random(&mut rng, n, 1);
            let beta = random(&mut rng, n, 1);
            let e = coefficients(alpha.clone(), beta.clone(), &a);
            for i in 0..n {
                assert!((e.row(i).sum() - 1.0).abs() < 1e-6);
                for j in 0..n {
                    if i != j && a[[i, j]] == 0.0 {
                        assert_eq!(e[[i, j]], 0.0);
                    }
                }
            }
            let mut shifted = alpha.clone();
            shifted[[0, 0]] += 3.7;
            let e2 = coefficients(shifted, beta, &a);
            assert!(e.iter().zip(e2.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }

    #[test]
    fn isolated_nodes_identity_activation_doubles_input() {
        let d = 2;
        let options = FusionOptions { heads: 2, activation: Activation::Identity, ..Default::default() };
        let (mut store, params) = setup(options, d, 7);
        for &w in &params.w_a {
            store.get_mut(w).assign(&Array2::eye(d));
        }
        let h = array![[1.0, 2.0], [-3.0, 0.5]];
        let mut g = Graph::new();
        let hv = g.constant(h.clone());
        let e = g.constant(Array2::eye(2));
        let out = fuse(&mut g, &store, hv, &[e], &params.w_a, Activation::Identity);
        let want = ndarray::concatenate(Axis(1), &[(&h * 2.0).view(), (&h * 2.0).view()]).unwrap();
        assert_eq!(g.value(out), want);
    }

    #[test]
    fn single_head_pair_matches_hand_linear_algebra() {
        let options = FusionOptions { heads: 1, activation: Activation::Identity, ..Default::default() };
        let (mut store, params) = setup(options, 2, 8);
        store.get_mut(params.w_a[0]).assign(&array![[1.0, 2.0], [0.0, 1.0]]);
        let h = array![[1.0, 0.0], [0.0, 1.0]];
        let e = array![[0.25, 0.75], [0.6, 0.4]];
        let mut g = Graph::new();
        let hv = g.constant(h);
        let ev = g.constant(e);
        let out = fuse(&mut g, &store, hv, &[ev], &params.w_a, Activation::Identity);
        // agg_0 = (0.25, 0.75) → W: (0.25, 1.25) → +h_0: (1.25, 1.25)
        // agg_1 = (0.6, 0.4) → W: (0.6, 1.6) → +h_1: (0.6, 2.6)
        let want = array![[1.25, 1.25], [0.6, 2.6]];
        assert!(g.value(out).iter().zip(want.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn node_score_cases() {
        let mut g: Graph<f64> = Graph::new();
        let b = g.constant(array![[0.0], [3f64.ln()]]);
        let gamma = node_scores(&mut g, b);
        assert!((g.value(gamma)[[0, 0]] - 0.25).abs() < 1e-15);
        assert!((g.value(gamma)[[1, 0]] - 0.75).abs() < 1e-15);

        let b = g.constant(Array2::from_elem((4, 1), 1.3));
        let gamma = node_scores(&mut g, b);
        assert!(g.value(gamma).iter().all(|&x| (x - 0.25).abs() < 1e-15));

        let b = g.constant(array![[50.0], [0.0], [0.0]]);
        let gamma = node_scores(&mut g, b);
        assert!(g.value(gamma)[[0, 0]] > 1.0 - 1e-12);
    }

    fn run_layer(store: &ParamStore<f64>, params: &FusionParams, h: &Array2<f64>, t: &Array2<f64>, a: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let mut g = Graph::new();
        let hv = g.constant(h.clone());
        let tv = g.constant(t.clone());
        let out = params.forward(&mut g, store, hv, tv, a.view(), true);
        (g.value(out.fused).to_owned(), g.value(out.gamma).to_owned())
    }

    #[test]
    fn permutation_equivariance() {
        let d = 3;
        let (store, params) = setup(FusionOptions { attention_hidden: 4, ..Default::default() }, d, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 5;
        let h = random(&mut rng, n, d);
        let t = random(&mut rng, 1, d);
        let m = crate::graph_builder::similarity_values(h.view(), Array2::ones((2, d)).view());
        let a = crate::graph_builder::sparsify(m.view(), 0.3);
        let perm = [3, 0, 4, 1, 2];
        let hp = h.select(Axis(0), &perm);
        let ap = Array2::from_shape_fn((n, n), |(i, j)| a[[perm[i], perm[j]]]);
        let (out, gamma) = run_layer(&store, &params, &h, &t, &a);
        let (outp, gammap) = run_layer(&store, &params, &hp, &t, &ap);
        for (i, &p) in perm.iter().enumerate() {
            assert!((&outp.row(i) - &out.row(p)).iter().all(|v| v.abs() < 1e-12));
            assert!((gammap[[i, 0]] - gamma[[p, 0]]).abs() < 1e-12);
        }
        assert!((gamma.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn per_head_scorers_register_more_parameters() {
        let (shared, _) = setup(FusionOptions::default(), 4, 11);
        let (per_head, params) = setup(FusionOptions { per_head_scores: true, ..Default::default() }, 4, 11);
        assert_eq!(params.scores.len(), 2);
        assert!(per_head.count() > shared.count());
        let (no_cluster, _) = setup(FusionOptions { cluster_aware: false, ..Default::default() }, 4, 11);
        assert!(no_cluster.count() < shared.count());
    }

    #[test]
    fn layer_gradient_matches_finite_differences() {
        let d = 4;
        let n = 6;
        for per_head in [false, true] {
            let options = FusionOptions { heads: 2, attention_hidden: 5, per_head_scores: per_head, ..Default::default() };
            let (mut store, params) = setup(options, d, 12);
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            let emb = store.add("emb.table", random(&mut rng, n + 1, d), true);
            let probe = random(&mut rng, n, 2 * d);
            let probe_g = random(&mut rng, n, 1);
            let h0 = store.get(emb).slice(ndarray::s![..n, ..]).to_owned();
            let m = crate::graph_builder::similarity_values(h0.view(), Array2::ones((2, d)).view());
            let a = crate::graph_builder::sparsify(m.view(), 0.3);
            let rows: Vec<usize> = (0..n).collect();
            let loss = |s: &ParamStore<f64>| {
                let mut g = Graph::new();
                let h = g.gather(emb, s.view(emb), &rows);
                let t = g.gather(emb, s.view(emb), &[n]);
                let out = params.forward(&mut g, s, h, t, a.view(), true);
                let p = g.constant(probe.clone());
                let pg = g.constant(probe_g.clone());
                let x = g.mul(out.fused, p);
                let y = g.mul(out.gamma, pg);
                let sx = g.sum(x);
                let sy = g.sum(y);
                let total = g.add(sx, sy);
                let grads = g.backward(total).params(&g);
                (g.scalar(total), grads)
            };
            for (group, report) in check_param_gradients(&store, 1e-5, loss) {
                assert!(report.max_rel_error <= 1e-4, "{group}: {report:?}");
            }
        }
    }
}
