//! Reverse-mode automatic differentiation over dense 2-D arrays.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! the recipe for its local derivative. [`Graph::backward`] walks the tape in
//! reverse from a scalar root. Vectors are represented as `1×k` or `n×1`
//! matrices. `Add` and `Mul` broadcast any unit dimension.
//!
//! Graphs are cheap, single-use, and built per training instance; trainable
//! tensors are borrowed from the [`ParamStore`](crate::params::ParamStore)
//! rather than copied.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, CowArray, Ix2, Zip};

use crate::params::{ParamGrad, ParamGrads, ParamId};
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Constant,
    Variable,
    Param(ParamId),
    Gather(ParamId, Vec<usize>),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, T),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    XLogX(Var),
    Clamp(Var, T, T),
    SoftmaxRows(Var),
    RowNormalize(Var, T),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Constant | Variable | Param(_) | Gather(..) => Vec::new(),
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            ConcatCols(vs) => vs.clone(),
            Transpose(a) | Scale(a, _) | SliceRows(a, _) | SliceCols(a, _) | Sigmoid(a)
            | Tanh(a) | LeakyRelu(a, _) | Exp(a) | Ln(a) | Sqrt(a) | Square(a) | XLogX(a)
            | Clamp(a, ..) | SoftmaxRows(a) | RowNormalize(a, _) | SumAll(a) | SumRows(a)
            | SumCols(a) => vec![*a],
        }
    }
}

struct Node<'a, T: Scalar> {
    value: CowArray<'a, T, Ix2>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of differentiable operations.
pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

impl<'a, T: Scalar> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("incompatible broadcast shapes {a:?} and {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

/// Sums `g` down to `shape`, undoing a broadcast.
fn reduce_to<T: Scalar>(g: Array2<T>, shape: (usize, usize)) -> Array2<T> {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: CowArray<'a, T, Ix2>, op: Op<T>) -> Var {
        let needs_grad = match &op {
            Op::Constant => false,
            Op::Variable | Op::Param(_) | Op::Gather(..) => true,
            other => other.parents().iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn owned(&mut self, value: Array2<T>, op: Op<T>) -> Var {
        self.push(CowArray::from(value), op)
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, T> {
        self.nodes[v.0].value.view()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> T {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.dim(), (1, 1), "scalar() on non-scalar node");
        val[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- leaves ----

    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.owned(value, Op::Constant)
    }

    pub fn constant_view(&mut self, value: ArrayView2<'a, T>) -> Var {
        self.push(CowArray::from(value), Op::Constant)
    }

    /// Differentiable leaf not backed by a parameter (used by gradient checks).
    pub fn variable(&mut self, value: Array2<T>) -> Var {
        self.owned(value, Op::Variable)
    }

    pub fn param(&mut self, id: ParamId, value: ArrayView2<'a, T>) -> Var {
        self.push(CowArray::from(value), Op::Param(id))
    }

    /// Row lookup into a parameter table; the gradient is row-sparse.
    pub fn gather(&mut self, id: ParamId, table: ArrayView2<'a, T>, rows: &[usize]) -> Var {
        let value = table.select(Axis(0), rows);
        self.owned(value, Op::Gather(id, rows.to_vec()))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b));
        self.owned(value, Op::MatMul(a, b))
    }

    pub fn t(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.owned(value, Op::Transpose(a))
    }

    fn zip_broadcast(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Array2<T> {
        let shape = broadcast_shape(self.shape(a), self.shape(b));
        let av = self.value(a);
        let bv = self.value(b);
        let av = av.broadcast(shape).expect("broadcast lhs");
        let bv = bv.broadcast(shape).expect("broadcast rhs");
        let mut out = Array2::zeros(shape);
        Zip::from(&mut out).and(&av).and(&bv).for_each(|o, &x, &y| *o = f(x, y));
        out
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_broadcast(a, b, |x, y| x + y);
        self.owned(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_broadcast(a, b, |x, y| x - y);
        self.owned(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_broadcast(a, b, |x, y| x * y);
        self.owned(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).mapv(|x| x * c);
        self.owned(value, Op::Scale(a, c))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.owned(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.owned(value, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.owned(value, Op::SliceCols(a, start))
    }

    // ---- elementwise ----

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(a).mapv(f);
        self.owned(value, op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), move |x| if x > T::zero() { x } else { x * slope })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), |x| x.ln())
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), |x| x.sqrt())
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// `x ln x`, with `0 ln 0 = 0`.
    pub fn xlogx(&mut self, a: Var) -> Var {
        self.unary(a, Op::XLogX(a), |x| if x > T::zero() { x * x.ln() } else { T::zero() })
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), move |x| x.max(lo).min(hi))
    }

    // ---- normalisations and reductions ----

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).to_owned();
        for mut row in value.rows_mut() {
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let total: T = row.sum();
            row.mapv_inplace(|x| x / total);
        }
        self.owned(value, Op::SoftmaxRows(a))
    }

    /// Row softmax restricted to entries where `mask` is true. Masked entries
    /// get an additive `-1e9` logit so they vanish; a fully masked row is zero.
    pub fn softmax_rows_masked(&mut self, a: Var, mask: &Array2<bool>) -> Var {
        assert_eq!(mask.dim(), self.shape(a), "mask shape");
        let penalty = T::lit(-1e9);
        let logits = {
            let av = self.value(a);
            let mut l = av.to_owned();
            Zip::from(&mut l).and(mask).for_each(|x, &keep| {
                if !keep {
                    *x = *x + penalty;
                }
            });
            l
        };
        let masked = self.constant(mask.mapv(|k| if k { T::zero() } else { penalty }));
        let shifted = self.owned(logits, Op::Add(a, masked));
        let out = self.softmax_rows(shifted);
        // fully masked rows: softmax of equal huge-negative logits is uniform, force zero
        if mask.rows().into_iter().any(|r| !r.iter().any(|&k| k)) {
            let keep_rows = mask.map_axis(Axis(1), |r| r.iter().any(|&k| k));
            let gate = keep_rows.mapv(|k| if k { T::one() } else { T::zero() }).insert_axis(Axis(1));
            let gate = self.constant(gate);
            return self.mul(out, gate);
        }
        out
    }

    /// Scales each row to unit Euclidean norm, dividing by `max(‖row‖, tau)`.
    pub fn row_normalize(&mut self, a: Var, tau: T) -> Var {
        let mut value = self.value(a).to_owned();
        for mut row in value.rows_mut() {
            let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt().max(tau);
            row.mapv_inplace(|x| x / norm);
        }
        self.owned(value, Op::RowNormalize(a, tau))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        self.owned(Array2::from_elem((1, 1), total), Op::SumAll(a))
    }

    /// `n×k → n×1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.owned(value, Op::SumRows(a))
    }

    /// `n×k → 1×k`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.owned(value, Op::SumCols(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let s = self.sum(a);
        self.scale(s, T::one() / T::from_usize(r * c).unwrap())
    }

    /// Frobenius / Euclidean norm of the whole array.
    pub fn norm(&mut self, a: Var) -> Var {
        let sq = self.square(a);
        let s = self.sum(sq);
        self.sqrt(s)
    }

    // ---- backward ----

    /// Reverse pass from the `1×1` node `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.shape(root), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Array2<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Array2::ones((1, 1)));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match &node.op {
                Op::Variable | Op::Param(_) | Op::Gather(..) => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(i, g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Array2<T>>], v: Var, delta: Array2<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        debug_assert_eq!(delta.dim(), self.shape(v));
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, i: usize, g: Array2<T>, grads: &mut [Option<Array2<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.view();
        let zero = T::zero();
        let one = T::one();
        match &node.op {
            Op::Constant | Op::Variable | Op::Param(_) | Op::Gather(..) => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    let ga = g.dot(&self.value(*b).t());
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    let gb = self.value(*a).t().dot(&g);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.t().to_owned()),
            Op::Add(a, b) => {
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, reduce_to(g.clone(), self.shape(*b)));
                }
                self.accumulate(grads, *a, reduce_to(g, self.shape(*a)));
            }
            Op::Sub(a, b) => {
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, reduce_to(g.mapv(|x| -x), self.shape(*b)));
                }
                self.accumulate(grads, *a, reduce_to(g, self.shape(*a)));
            }
            Op::Mul(a, b) => {
                let shape = g.dim();
                if self.nodes[a.0].needs_grad {
                    let bv = self.value(*b);
                    let bv = bv.broadcast(shape).unwrap();
                    let ga = &g * &bv;
                    self.accumulate(grads, *a, reduce_to(ga, self.shape(*a)));
                }
                if self.nodes[b.0].needs_grad {
                    let av = self.value(*a);
                    let av = av.broadcast(shape).unwrap();
                    let gb = &g * &av;
                    self.accumulate(grads, *b, reduce_to(gb, self.shape(*b)));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.mapv(|x| x * c));
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    if self.nodes[p.0].needs_grad {
                        self.accumulate(grads, *p, g.slice(s![.., col..col + w]).to_owned());
                    }
                    col += w;
                }
            }
            Op::SliceRows(a, start) => {
                let mut ga = Array2::zeros(self.shape(*a));
                ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                self.accumulate(grads, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let mut ga = Array2::zeros(self.shape(*a));
                ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let mut ga = g;
                Zip::from(&mut ga).and(&y).for_each(|d, &s| *d = *d * s * (one - s));
                self.accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let mut ga = g;
                Zip::from(&mut ga).and(&y).for_each(|d, &t| *d = *d * (one - t * t));
                self.accumulate(grads, *a, ga);
            }
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                let mut ga = g;
                Zip::from(&mut ga).and(&self.value(*a)).for_each(|d, &x| {
                    if x <= zero {
                        *d = *d * slope;
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Exp(a) => {
                let mut ga = g;
                Zip::from(&mut ga).and(&y).for_each(|d, &e| *d = *d * e);
                self.accumulate(grads, *a, ga);
            }
            Op::Ln(a) => {
                let mut ga = g;
                Zip::from(&mut ga).and(&self.value(*a)).for_each(|d, &x| *d = *d / x);
                self.accumulate(grads, *a, ga);
            }
            Op::Sqrt(a) => {
                let two = T::lit(2.0);
                let mut ga = g;
                Zip::from(&mut ga).and(&y).for_each(|d, &r| {
                    *d = if r > zero { *d / (two * r) } else { zero };
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Square(a) => {
                let two = T::lit(2.0);
                let mut ga = g;
                Zip::from(&mut ga).and(&self.value(*a)).for_each(|d, &x| *d = *d * two * x);
                self.accumulate(grads, *a, ga);
            }
            Op::XLogX(a) => {
                let mut ga = g;
                Zip::from(&mut ga).and(&self.value(*a)).for_each(|d, &x| {
                    *d = if x > zero { *d * (x.ln() + one) } else { zero };
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let mut ga = g;
                Zip::from(&mut ga).and(&self.value(*a)).for_each(|d, &x| {
                    if x < lo || x > hi {
                        *d = zero;
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let mut ga = g;
                for (mut grow, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                    let dot: T = grow.iter().zip(yrow.iter()).map(|(&d, &p)| d * p).sum();
                    Zip::from(&mut grow).and(&yrow).for_each(|d, &p| *d = p * (*d - dot));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::RowNormalize(a, tau) => {
                let x = self.value(*a);
                let mut ga = g;
                for ((mut grow, yrow), xrow) in ga.rows_mut().into_iter().zip(y.rows()).zip(x.rows()) {
                    let norm = xrow.iter().map(|&v| v * v).sum::<T>().sqrt();
                    if norm > *tau {
                        let dot: T = grow.iter().zip(yrow.iter()).map(|(&d, &u)| d * u).sum();
                        Zip::from(&mut grow).and(&yrow).for_each(|d, &u| *d = (*d - u * dot) / norm);
                    } else {
                        let tau = *tau;
                        grow.mapv_inplace(|d| d / tau);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let gv = g[[0, 0]];
                self.accumulate(grads, *a, Array2::from_elem(self.shape(*a), gv));
            }
            Op::SumRows(a) => {
                let ga = g.broadcast(self.shape(*a)).unwrap().to_owned();
                self.accumulate(grads, *a, ga);
            }
            Op::SumCols(a) => {
                let ga = g.broadcast(self.shape(*a)).unwrap().to_owned();
                self.accumulate(grads, *a, ga);
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a leaf created by [`Graph::variable`],
    /// [`Graph::param`] or [`Graph::gather`]. `None` when the root does not
    /// depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Array2<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Collects parameter gradients, merging repeated uses of one parameter.
    pub fn params(&self, graph: &Graph<'_, T>) -> ParamGrads<T> {
        let mut out = ParamGrads::default();
        for (i, node) in graph.nodes.iter().enumerate() {
            let Some(g) = self.grads.get(i).and_then(|g| g.as_ref()) else {
                continue;
            };
            match &node.op {
                Op::Param(id) => out.add_dense(*id, g.view()),
                Op::Gather(id, rows) => {
                    let mut map: BTreeMap<usize, Array1<T>> = BTreeMap::new();
                    for (k, &r) in rows.iter().enumerate() {
                        let row = g.row(k);
                        map.entry(r)
                            .and_modify(|acc| *acc += &row)
                            .or_insert_with(|| row.to_owned());
                    }
                    out.add(*id, ParamGrad::Rows(map));
                }
                _ => {}
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_leaf_gradients, GradCheck};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    fn check(inputs: Vec<Array2<f64>>, build: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Var) {
        let report: GradCheck = check_leaf_gradients(&inputs, 1e-5, &build);
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }

    #[test]
    fn matmul_and_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check(vec![random(&mut rng, 3, 4), random(&mut rng, 4, 2)], |g, v| {
            let p = g.matmul(v[0], v[1]);
            let t = g.t(p);
            let sq = g.square(t);
            g.sum(sq)
        });
    }

    #[test]
    fn broadcasting_add_mul_sub() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check(
            vec![random(&mut rng, 3, 4), random(&mut rng, 1, 4), random(&mut rng, 3, 1)],
            |g, v| {
                let a = g.add(v[0], v[1]);
                let b = g.mul(a, v[2]);
                let c = g.sub(b, v[1]);
                let d = g.mul(c, c);
                g.sum(d)
            },
        );
    }

    #[test]
    fn outer_sum_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check(vec![random(&mut rng, 4, 1), random(&mut rng, 1, 4)], |g, v| {
            let a = g.add(v[0], v[1]);
            let e = g.exp(a);
            g.sum(e)
        });
    }

    #[test]
    fn nonlinearities() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check(vec![random(&mut rng, 3, 3)], |g, v| {
            let a = g.sigmoid(v[0]);
            let b = g.tanh(v[0]);
            let c = g.leaky_relu(v[0], 0.01);
            let ab = g.mul(a, b);
            let abc = g.add(ab, c);
            let s = g.square(abc);
            let r = g.sqrt(s);
            let sc = g.scale(r, 1.5);
            g.sum(sc)
        });
    }

    #[test]
    fn log_and_entropy_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, 2, 3).mapv(|v| v.abs() + 0.1);
        check(vec![x], |g, v| {
            let a = g.ln(v[0]);
            let b = g.xlogx(v[0]);
            let s = g.add(a, b);
            g.sum(s)
        });
    }

    #[test]
    fn softmax_masked_and_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mask = array![[true, false, true], [true, true, true], [false, true, false]];
        let w = random(&mut rng, 3, 3);
        check(vec![random(&mut rng, 3, 3)], move |g, v| {
            let p = g.softmax_rows_masked(v[0], &mask);
            let q = g.softmax_rows(v[0]);
            let wv = g.constant(w.clone());
            let pw = g.mul(p, wv);
            let qq = g.square(q);
            let s = g.add(pw, qq);
            g.sum(s)
        });
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(array![[1.0, 2.0, 3.0], [0.5, 0.5, 0.5]]);
        let mask = array![[true, false, true], [false, false, false]];
        let p = g.softmax_rows_masked(x, &mask);
        let v = g.value(p);
        assert_eq!(v[[0, 1]], 0.0);
        assert!((v[[0, 0]] + v[[0, 2]] - 1.0).abs() < 1e-12);
        assert!(v.row(1).iter().all(|&e| e == 0.0));
    }

    #[test]
    fn row_normalize_and_slicing() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = random(&mut rng, 2, 5);
        check(vec![random(&mut rng, 4, 5)], move |g, v| {
            let n = g.row_normalize(v[0], 1e-12);
            let top = g.slice_rows(n, 1, 2);
            let wv = g.constant(w.clone());
            let m = g.mul(top, wv);
            let cols = g.slice_cols(m, 2, 3);
            let cat = g.concat_cols(&[cols, top]);
            let rs = g.sum_rows(cat);
            let cs = g.sum_cols(cat);
            let a = g.sum(rs);
            let b = g.norm(cs);
            let out = g.add(a, b);
            g.mean(out)
        });
    }

    #[test]
    fn zero_norm_row_normalizes_to_zero() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(Array2::zeros((2, 3)));
        let n = g.row_normalize(x, 1e-12);
        assert!(g.value(n).iter().all(|v| *v == 0.0 && !v.is_nan()));
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.variable(array![[-2.0, 0.5, 3.0]]);
        let c = g.clamp(x, 0.0, 1.0);
        let s = g.sum(c);
        let grads = g.backward(s);
        assert_eq!(grads.wrt(x).unwrap(), &array![[0.0, 1.0, 0.0]]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.variable(array![[1.0, 2.0]]);
        let k = g.constant(array![[3.0, 4.0]]);
        let p = g.mul(x, k);
        let s = g.sum(p);
        assert!(!g.requires_grad(k));
        let grads = g.backward(s);
        assert!(grads.wrt(k).is_none());
        assert_eq!(grads.wrt(x).unwrap(), &array![[3.0, 4.0]]);
    }

    #[test]
    fn gather_gradients_are_row_sparse_and_merged() {
        let table = array![[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]];
        let mut g: Graph<f64> = Graph::new();
        let rows = g.gather(ParamId(0), table.view(), &[2, 0, 2]);
        let s = g.sum(rows);
        let grads = g.backward(s).params(&g);
        match grads.get(ParamId(0)).unwrap() {
            ParamGrad::Rows(map) => {
                assert_eq!(map.len(), 2);
                assert_eq!(map[&2], ndarray::arr1(&[2.0, 2.0]));
                assert_eq!(map[&0], ndarray::arr1(&[1.0, 1.0]));
            }
            ParamGrad::Dense(_) => panic!("expected row gradient"),
        }
    }
}
