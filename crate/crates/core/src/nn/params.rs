use std::cell::RefCell;
use std::collections::HashMap;

use ndarray::Array2;

use super::scalar::Real;
use super::tape::{Gradients, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors. `group` tags each tensor with an optimizer
/// group (the RG level for flow models) for per-group learning rates.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Array2<T>>,
    groups: Vec<usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            groups: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<T>, group: usize) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        self.groups.push(group);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> usize {
        self.groups[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Array2<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<T>] {
        &mut self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn groups(&self) -> &[usize] {
        &self.groups
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }

    pub fn to_flat(&self) -> Vec<T> {
        self.values.iter().flat_map(|v| v.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.num_scalars());
        let mut off = 0;
        for v in &mut self.values {
            for (dst, &src) in v.iter_mut().zip(&flat[off..]) {
                *dst = src;
            }
            off += v.len();
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.mapv(|x| U::of(x.as_f64()))).collect(),
            groups: self.groups.clone(),
        }
    }

    pub fn zeros_like(&self) -> Vec<Array2<T>> {
        self.values.iter().map(|v| Array2::zeros(v.raw_dim())).collect()
    }
}

/// Binds a [`ParamStore`] to a [`Tape`]: each parameter becomes one leaf,
/// created on first use, and weight-normalized matrices are built once per
/// tape.
pub struct Binding<'a, T: Real> {
    tape: &'a Tape<T>,
    store: &'a ParamStore<T>,
    trainable: bool,
    leaves: RefCell<Vec<Option<Var<T>>>>,
    normalized: RefCell<HashMap<(ParamId, ParamId), Var<T>>>,
}

impl<'a, T: Real> Binding<'a, T> {
    pub fn new(tape: &'a Tape<T>, store: &'a ParamStore<T>) -> Self {
        Self::with_mode(tape, store, true)
    }

    /// Parameters enter the tape as constants; only inputs get gradients.
    pub fn frozen(tape: &'a Tape<T>, store: &'a ParamStore<T>) -> Self {
        Self::with_mode(tape, store, false)
    }

    fn with_mode(tape: &'a Tape<T>, store: &'a ParamStore<T>, trainable: bool) -> Self {
        Self {
            tape,
            store,
            trainable,
            leaves: RefCell::new(vec![None; store.len()]),
            normalized: RefCell::new(HashMap::new()),
        }
    }

    pub fn tape(&self) -> &'a Tape<T> {
        self.tape
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var<T> {
        let mut leaves = self.leaves.borrow_mut();
        leaves[id.0]
            .get_or_insert_with(|| {
                let value = self.store.get(id).clone();
                if self.trainable {
                    self.tape.leaf(value)
                } else {
                    self.tape.constant(value)
                }
            })
            .clone()
    }

    pub fn weight_norm(&self, v: ParamId, g: ParamId) -> Var<T> {
        if let Some(w) = self.normalized.borrow().get(&(v, g)) {
            return w.clone();
        }
        let w = self.tape.weight_norm(&self.param(v), &self.param(g));
        self.normalized.borrow_mut().insert((v, g), w.clone());
        w
    }

    /// Gradient per parameter (zeros for parameters that were not used).
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<Array2<T>> {
        let leaves = self.leaves.borrow();
        self.store
            .values()
            .iter()
            .zip(leaves.iter())
            .map(|(v, leaf)| {
                leaf.as_ref()
                    .and_then(|l| grads.get(l).cloned())
                    .unwrap_or_else(|| Array2::zeros(v.raw_dim()))
            })
            .collect()
    }
}
