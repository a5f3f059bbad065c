//! Trainable tensors, their gradients, initialisation and the Adam optimiser.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of parameter matrices.
///
/// Insertion order is the canonical order for checkpoints and gradient
/// reductions. Bias vectors are stored with `decay = false` and are left out
/// of the L2 penalty.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Array2<T>>,
    decay: Vec<bool>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self { names: Vec::new(), values: Vec::new(), decay: Vec::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<T>, decay: bool) -> ParamId {
        let name = name.into();
        assert!(self.id(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.decay.push(decay);
        ParamId(self.values.len() - 1)
    }

    /// Uniform Xavier/Glorot initialisation, `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn xavier<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let value = Array2::from_shape_fn((rows, cols), |_| T::lit(rng.gen_range(-bound..bound)));
        self.add(name, value, true)
    }

    pub fn bias(&mut self, name: impl Into<String>, cols: usize) -> ParamId {
        self.add(name, Array2::zeros((1, cols)), false)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    /// Prefix of the name before the first `.`.
    pub fn group(&self, id: ParamId) -> &str {
        let name = self.name(id);
        name.split('.').next().unwrap_or(name)
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.decay[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Array2<T> {
        &self.values[id.0]
    }

    pub fn view(&self, id: ParamId) -> ArrayView2<'_, T> {
        self.values[id.0].view()
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Squared L2 norm of every decaying parameter.
    pub fn l2_sq(&self) -> T {
        self.values
            .iter()
            .zip(&self.decay)
            .filter(|(_, &d)| d)
            .map(|(v, _)| v.iter().map(|&x| x * x).sum::<T>())
            .sum()
    }
}

/// Gradient of one parameter: dense, or row-sparse for embedding lookups.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamGrad<T> {
    Dense(Array2<T>),
    Rows(BTreeMap<usize, Array1<T>>),
}

impl<T: Scalar> ParamGrad<T> {
    fn merge(&mut self, other: ParamGrad<T>) {
        match (&mut *self, other) {
            (ParamGrad::Dense(a), ParamGrad::Dense(b)) => *a += &b,
            (ParamGrad::Dense(a), ParamGrad::Rows(rows)) => {
                for (r, v) in rows {
                    let mut row = a.row_mut(r);
                    row += &v;
                }
            }
            (ParamGrad::Rows(a), ParamGrad::Rows(b)) => {
                for (r, v) in b {
                    a.entry(r).and_modify(|acc| *acc += &v).or_insert(v);
                }
            }
            (ParamGrad::Rows(a), ParamGrad::Dense(mut b)) => {
                for (r, v) in std::mem::take(a) {
                    let mut row = b.row_mut(r);
                    row += &v;
                }
                *self = ParamGrad::Dense(b);
            }
        }
    }

    fn scale(&mut self, c: T) {
        match self {
            ParamGrad::Dense(a) => a.mapv_inplace(|x| x * c),
            ParamGrad::Rows(rows) => rows.values_mut().for_each(|v| v.mapv_inplace(|x| x * c)),
        }
    }

    /// Materialises the gradient as a dense matrix of `shape`.
    pub fn to_dense(&self, shape: (usize, usize)) -> Array2<T> {
        match self {
            ParamGrad::Dense(a) => a.clone(),
            ParamGrad::Rows(rows) => {
                let mut out = Array2::zeros(shape);
                for (&r, v) in rows {
                    out.row_mut(r).assign(v);
                }
                out
            }
        }
    }
}

/// Gradients for a set of parameters, keyed by [`ParamId`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads<T> {
    entries: BTreeMap<ParamId, ParamGrad<T>>,
}

impl<T> Default for ParamGrads<T> {
    fn default() -> Self {
        Self { entries: BTreeMap::new() }
    }
}

impl<T: Scalar> ParamGrads<T> {
    pub fn add(&mut self, id: ParamId, grad: ParamGrad<T>) {
        match self.entries.get_mut(&id) {
            Some(existing) => existing.merge(grad),
            None => {
                self.entries.insert(id, grad);
            }
        }
    }

    pub fn add_dense(&mut self, id: ParamId, grad: ArrayView2<'_, T>) {
        self.add(id, ParamGrad::Dense(grad.to_owned()));
    }

    pub fn get(&self, id: ParamId) -> Option<&ParamGrad<T>> {
        self.entries.get(&id)
    }

    /// Dense gradient for `id`, zeros when absent.
    pub fn dense(&self, id: ParamId, shape: (usize, usize)) -> Array2<T> {
        self.entries.get(&id).map_or_else(|| Array2::zeros(shape), |g| g.to_dense(shape))
    }

    pub fn merge(&mut self, other: ParamGrads<T>) {
        for (id, g) in other.entries {
            self.add(id, g);
        }
    }

    pub fn scale(&mut self, c: T) {
        self.entries.values_mut().for_each(|g| g.scale(c));
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamGrad<T>)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Adam with the usual defaults (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: i32,
    first: Vec<Array2<T>>,
    second: Vec<Array2<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: T, store: &ParamStore<T>) -> Self {
        let first = store.ids().map(|id| Array2::zeros(store.get(id).raw_dim())).collect();
        let second = store.ids().map(|id| Array2::zeros(store.get(id).raw_dim())).collect();
        Self {
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            step: 0,
            first,
            second,
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One update. `l2` is the coefficient of the squared-L2 penalty on
    /// decaying parameters; its gradient `2·l2·θ` is added here.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>, l2: T) {
        self.step += 1;
        let one = T::one();
        let bias1 = one - self.beta1.powi(self.step);
        let bias2 = one - self.beta2.powi(self.step);
        let two_l2 = T::lit(2.0) * l2;
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let decays = store.decays(id);
            let shape = store.get(id).dim();
            let idle = grads.get(id).is_none() && (!decays || l2 == T::zero());
            if idle && self.first[id.0].iter().all(|x| *x == T::zero()) {
                continue;
            }
            let mut g = grads.dense(id, shape);
            if decays && l2 != T::zero() {
                g.zip_mut_with(store.get(id), |gi, &w| *gi += two_l2 * w);
            }
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            let m = &mut self.first[id.0];
            let v = &mut self.second[id.0];
            let w = store.get_mut(id);
            ndarray::Zip::from(w).and(m).and(v).and(&g).for_each(|w, m, v, &gi| {
                *m = b1 * *m + (one - b1) * gi;
                *v = b2 * *v + (one - b2) * gi * gi;
                let mhat = *m / bias1;
                let vhat = *v / bias2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            });
        }
    }
}
