//! Interest-graph construction from one behaviour sequence.
//!
//! Node similarity is a multi-head weighted cosine: every head `δ` rescales
//! the item embeddings by a trainable vector `w_δ` before taking the cosine,
//! and the heads are averaged. The adjacency keeps the strongest pairs of the
//! whole graph: the threshold is the `⌈εn²⌉`-th largest off-diagonal
//! similarity, so `ε` controls overall density while individual nodes keep
//! uneven degrees.
//!
//! Two other sparsification rules were considered and rejected. An absolute
//! similarity cut-off drifts as embeddings train and can yield an empty or a
//! complete graph. Per-node top-k forces every node to the same degree, which
//! hides the dense/sparse structure the downstream convolution relies on.
//!
//! The diagonal is zeroed before ranking (it is identically 1 under cosine);
//! self-loops are re-introduced by the neighbourhood rule of the fusion layer.

use std::io::{self, Write};

use ndarray::{Array2, ArrayView2, Axis};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Division floor for zero-norm weighted embeddings.
pub const COSINE_FLOOR: f64 = 1e-12;

/// `φ` trainable weight vectors of dimension `d`, stored as a `φ×d` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricHeads<T>(Array2<T>);

impl<T: Scalar> MetricHeads<T> {
    pub fn new(weights: Array2<T>) -> Result<Self> {
        if weights.nrows() == 0 || weights.ncols() == 0 {
            return Err(Error::Config("metric heads need at least one head of nonzero dimension".into()));
        }
        Ok(Self(weights))
    }

    pub fn ones(heads: usize, dim: usize) -> Self {
        Self(Array2::ones((heads.max(1), dim)))
    }

    pub fn count(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn weights(&self) -> ArrayView2<'_, T> {
        self.0.view()
    }
}

/// Averaged weighted-cosine similarity of the rows of `h` (`n×d`), with the
/// diagonal set to zero. Exactly symmetric.
pub fn similarity_values<T: Scalar>(h: ArrayView2<'_, T>, heads: ArrayView2<'_, T>) -> Array2<T> {
    let (n, d) = h.dim();
    assert_eq!(heads.ncols(), d, "head dimension must match embeddings");
    let phi = heads.nrows();
    let tau = T::lit(COSINE_FLOOR);
    let mut m = Array2::<T>::zeros((n, n));
    for w in heads.rows() {
        let mut weighted = h.to_owned();
        weighted *= &w.insert_axis(Axis(0));
        for mut row in weighted.rows_mut() {
            let norm = row.dot(&row).sqrt().max(tau);
            row.mapv_inplace(|x| x / norm);
        }
        for i in 0..n {
            let ri = weighted.row(i);
            for j in (i + 1)..n {
                let c = ri.dot(&weighted.row(j));
                m[[i, j]] += c;
            }
        }
    }
    let inv = T::one() / T::from_usize(phi).unwrap();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = m[[i, j]] * inv;
            m[[i, j]] = v;
            m[[j, i]] = v;
        }
    }
    m
}

/// Differentiable version of [`similarity_values`] over embeddings `h` (`n×d`)
/// and heads (`φ×d`).
pub fn similarity_matrix<T: Scalar>(g: &mut Graph<'_, T>, h: Var, heads: Var) -> Var {
    let (n, _) = g.shape(h);
    let phi = g.shape(heads).0;
    let tau = T::lit(COSINE_FLOOR);
    let mut total: Option<Var> = None;
    for k in 0..phi {
        let w = g.slice_rows(heads, k, 1);
        let weighted = g.mul(h, w);
        let unit = g.row_normalize(weighted, tau);
        let unit_t = g.t(unit);
        let cos = g.matmul(unit, unit_t);
        total = Some(match total {
            Some(acc) => g.add(acc, cos),
            None => cos,
        });
    }
    let total = total.expect("at least one head");
    let total_t = g.t(total);
    let sym = g.add(total, total_t);
    let mean = g.scale(sym, T::lit(0.5) / T::from_usize(phi).unwrap());
    let off_diag = g.constant(Array2::from_shape_fn((n, n), |(i, j)| if i == j { T::zero() } else { T::one() }));
    g.mul(mean, off_diag)
}

/// Number of entries to keep: `⌈εn²⌉`, at least one.
pub fn edge_budget(epsilon: f64, n: usize) -> usize {
    let raw = epsilon * (n * n) as f64;
    // guard against 3.0000000000000004-style round-up
    ((raw - 1e-9).ceil().max(1.0)) as usize
}

/// Global threshold: the `⌈εn²⌉`-th largest off-diagonal entry of `m`, or the
/// smallest one when the budget exceeds `n(n−1)`. `None` for `n < 2`.
pub fn threshold<T: Scalar>(m: ArrayView2<'_, T>, epsilon: f64) -> Option<T> {
    let n = m.nrows();
    if n < 2 {
        return None;
    }
    let mut values: Vec<T> = Vec::with_capacity(n * (n - 1));
    for ((i, j), &v) in m.indexed_iter() {
        if i != j {
            values.push(v);
        }
    }
    let budget = edge_budget(epsilon, n).min(values.len());
    let (_, kth, _) = values.select_nth_unstable_by(budget - 1, |a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    Some(*kth)
}

/// ε-sparse 0/1 adjacency from a symmetric similarity matrix. Every
/// off-diagonal entry `≥` the global threshold becomes an edge, ties
/// included; the diagonal is always 0.
pub fn sparsify<T: Scalar>(m: ArrayView2<'_, T>, epsilon: f64) -> Array2<T> {
    let n = m.nrows();
    let mut a = Array2::zeros((n, n));
    if let Some(t) = threshold(m, epsilon) {
        for ((i, j), &v) in m.indexed_iter() {
            if i != j && v >= t {
                a[[i, j]] = T::one();
            }
        }
    }
    a
}

/// Similarity and adjacency for the valid positions of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct InterestGraph<T> {
    /// `n×n` similarity over valid nodes, zero diagonal.
    pub similarity: Array2<T>,
    /// `n×n` 0/1 adjacency, symmetric, zero diagonal.
    pub adjacency: Array2<T>,
    /// Valid positions inside the padded sequence, ascending.
    pub positions: Vec<usize>,
    pub max_len: usize,
    pub epsilon: f64,
}

impl<T: Scalar> InterestGraph<T> {
    /// Builds the graph over rows of `embeddings` (`max_len×d`) flagged by `mask`.
    pub fn build(
        embeddings: ArrayView2<'_, T>,
        mask: &[bool],
        heads: &MetricHeads<T>,
        epsilon: f64,
    ) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(Error::Config(format!("epsilon must lie in (0, 1], got {epsilon}")));
        }
        if mask.len() != embeddings.nrows() {
            return Err(Error::Shape(format!(
                "mask length {} does not match {} embedding rows",
                mask.len(),
                embeddings.nrows()
            )));
        }
        let positions: Vec<usize> = mask.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i).collect();
        let valid = embeddings.select(Axis(0), &positions);
        let similarity = similarity_values(valid.view(), heads.weights());
        let adjacency = sparsify(similarity.view(), epsilon);
        Ok(Self { similarity, adjacency, positions, max_len: mask.len(), epsilon })
    }

    /// Graph over already-compacted valid embeddings (`n×d`).
    pub fn from_valid(valid: ArrayView2<'_, T>, heads: ArrayView2<'_, T>, epsilon: f64) -> Self {
        let similarity = similarity_values(valid, heads);
        let adjacency = sparsify(similarity.view(), epsilon);
        let n = valid.nrows();
        Self { similarity, adjacency, positions: (0..n).collect(), max_len: n, epsilon }
    }

    pub fn node_count(&self) -> usize {
        self.positions.len()
    }

    /// Number of directed edges (each undirected edge counts twice).
    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().filter(|&&v| v != T::zero()).count()
    }

    pub fn mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.max_len];
        for &p in &self.positions {
            mask[p] = true;
        }
        mask
    }

    fn padded(&self, src: &Array2<T>) -> Array2<T> {
        let mut out = Array2::zeros((self.max_len, self.max_len));
        for (a, &pi) in self.positions.iter().enumerate() {
            for (b, &pj) in self.positions.iter().enumerate() {
                out[[pi, pj]] = src[[a, b]];
            }
        }
        out
    }

    /// Similarity laid out over all `max_len` slots; PAD rows/columns are zero.
    pub fn padded_similarity(&self) -> Array2<T> {
        self.padded(&self.similarity)
    }

    /// Adjacency laid out over all `max_len` slots; PAD rows/columns are zero.
    pub fn padded_adjacency(&self) -> Array2<T> {
        self.padded(&self.adjacency)
    }

    /// Debug dump: one `i j M_ij` line per edge, padded positions.
    pub fn write_edge_list<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "# nodes={} max_len={} epsilon={}", self.node_count(), self.max_len, self.epsilon)?;
        for ((a, b), &v) in self.adjacency.indexed_iter() {
            if v != T::zero() {
                writeln!(out, "{} {} {}", self.positions[a], self.positions[b], self.similarity[[a, b]])?;
            }
        }
        Ok(())
    }
}
