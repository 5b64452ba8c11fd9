//! Recording tape over 2-D arrays with reverse-mode (vector-Jacobian) and
//! forward-mode (Jacobian-vector) sweeps.
//!
//! Every value is a row-major `rows x cols` matrix; rows are batch items.
//! A tape built with [`Tape::no_grad`] records nothing, so intermediate
//! values are released as soon as their `Var` handles go out of scope.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use ndarray::{Array2, Axis, Zip};

use super::scalar::Real;
use crate::error::{Error, Result};

/// Handle to a value on a [`Tape`].
#[derive(Clone, Debug)]
pub struct Var<T> {
    id: Option<usize>,
    value: Rc<Array2<T>>,
}

impl<T: Real> Var<T> {
    pub fn value(&self) -> &Array2<T> {
        &self.value
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.dim()
    }

    /// Whether gradients or tangents can flow through this value.
    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    pub fn to_owned(&self) -> Array2<T> {
        (*self.value).clone()
    }

    /// Unwraps the value without copying when this is the last handle.
    pub fn into_value(self) -> Array2<T> {
        Rc::try_unwrap(self.value).unwrap_or_else(|rc| (*rc).clone())
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    /// `x · wᵀ`
    MatMulT(Var<T>, Var<T>),
    /// `x + b` with `b` broadcast over rows.
    AddRow(Var<T>, Var<T>),
    Add(Var<T>, Var<T>),
    Sub(Var<T>, Var<T>),
    Mul(Var<T>, Var<T>),
    /// `a·x + b`
    Affine(Var<T>, T),
    Exp(Var<T>),
    /// `c·tanh(x/c)`
    SoftClamp(Var<T>, T),
    Silu(Var<T>),
    Abs(Var<T>),
    /// `min(max(x, lo), hi)`
    Clamp(Var<T>, T, T),
    Square(Var<T>),
    /// Row-wise `g · v / ‖v‖`.
    WeightNorm(Var<T>, Var<T>),
    /// `out[r, k] = x[r, map[k]]`
    GatherCols(Var<T>, Arc<[usize]>),
    ConcatCols(Var<T>, Var<T>),
    Reshape(Var<T>),
    SumCols(Var<T>),
    SumAll(Var<T>),
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Rc<Array2<T>>,
}

#[derive(Debug)]
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: bool,
}

/// Reverse-mode result: one optional gradient per recorded node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&Array2<T>> {
        var.id.and_then(|id| self.grads.get(id).and_then(Option::as_ref))
    }

    pub fn take(&mut self, var: &Var<T>) -> Option<Array2<T>> {
        var.id.and_then(|id| self.grads.get_mut(id).and_then(Option::take))
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).fast_exp())
}

fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

fn reshape<T: Real>(x: &Array2<T>, shape: (usize, usize)) -> Array2<T> {
    let data = match x.as_slice() {
        Some(s) => s.to_vec(),
        None => x.iter().copied().collect(),
    };
    Array2::from_shape_vec(shape, data).expect("reshape preserves element count")
}

fn gather_cols<T: Real>(x: &Array2<T>, map: &[usize]) -> Array2<T> {
    let x = x.as_standard_layout();
    let cols = x.ncols();
    let src = x.as_slice().expect("standard layout");
    let mut out = Vec::with_capacity(x.nrows() * map.len());
    for row in src.chunks_exact(cols.max(1)).take(x.nrows()) {
        out.extend(map.iter().map(|&k| row[k]));
    }
    Array2::from_shape_vec((x.nrows(), map.len()), out).expect("gather shape")
}

fn scatter_cols<T: Real>(g: &Array2<T>, map: &[usize], cols: usize) -> Array2<T> {
    let g = g.as_standard_layout();
    let mut out = Array2::<T>::zeros((g.nrows(), cols));
    for (grow, mut orow) in g.outer_iter().zip(out.outer_iter_mut()) {
        for (&v, &k) in grow.iter().zip(map) {
            orow[k] = orow[k] + v;
        }
    }
    out
}

fn concat_cols<T: Real>(a: &Array2<T>, b: &Array2<T>) -> Array2<T> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("row counts agree")
}

fn add_opt<T: Real>(a: Option<Array2<T>>, b: Option<Array2<T>>) -> Option<Array2<T>> {
    match (a, b) {
        (Some(a), Some(b)) => Some(a + b),
        (a, None) => a,
        (None, b) => b,
    }
}

/// Weight-normalization partials shared by the reverse and forward sweeps.
fn row_norms<T: Real>(v: &Array2<T>) -> Vec<T> {
    v.outer_iter()
        .map(|r| r.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt())
        .collect()
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that evaluates eagerly and records nothing.
    pub fn no_grad() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input. Untracked when the tape is not recording.
    pub fn leaf(&self, value: Array2<T>) -> Var<T> {
        let value = Rc::new(value);
        if !self.recording {
            return Var { id: None, value };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: Op::Leaf,
            value: value.clone(),
        });
        Var {
            id: Some(nodes.len() - 1),
            value,
        }
    }

    /// A value that never receives gradients.
    pub fn constant(&self, value: Array2<T>) -> Var<T> {
        Var {
            id: None,
            value: Rc::new(value),
        }
    }

    fn push(&self, value: Array2<T>, op: Op<T>, tracked: bool) -> Var<T> {
        let value = Rc::new(value);
        if !(self.recording && tracked) {
            return Var { id: None, value };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value: value.clone(),
        });
        Var {
            id: Some(nodes.len() - 1),
            value,
        }
    }

    pub fn matmul_t(&self, x: &Var<T>, w: &Var<T>) -> Var<T> {
        let out = x.value.dot(&w.value.t());
        let tracked = x.is_tracked() || w.is_tracked();
        self.push(out, Op::MatMulT(x.clone(), w.clone()), tracked)
    }

    pub fn add_row(&self, x: &Var<T>, b: &Var<T>) -> Var<T> {
        debug_assert_eq!(b.value.nrows(), 1);
        let out = &*x.value + &b.value.row(0);
        let tracked = x.is_tracked() || b.is_tracked();
        self.push(out, Op::AddRow(x.clone(), b.clone()), tracked)
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        let out = &*a.value + &*b.value;
        let tracked = a.is_tracked() || b.is_tracked();
        self.push(out, Op::Add(a.clone(), b.clone()), tracked)
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        let out = &*a.value - &*b.value;
        let tracked = a.is_tracked() || b.is_tracked();
        self.push(out, Op::Sub(a.clone(), b.clone()), tracked)
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        let out = &*a.value * &*b.value;
        let tracked = a.is_tracked() || b.is_tracked();
        self.push(out, Op::Mul(a.clone(), b.clone()), tracked)
    }

    /// `scale·x + shift`
    pub fn affine(&self, x: &Var<T>, scale: T, shift: T) -> Var<T> {
        let out = x.value.mapv(|v| scale * v + shift);
        self.push(out, Op::Affine(x.clone(), scale), x.is_tracked())
    }

    pub fn scale(&self, x: &Var<T>, scale: T) -> Var<T> {
        self.affine(x, scale, T::zero())
    }

    pub fn exp(&self, x: &Var<T>) -> Var<T> {
        let out = x.value.mapv(T::fast_exp);
        self.push(out, Op::Exp(x.clone()), x.is_tracked())
    }

    pub fn soft_clamp(&self, x: &Var<T>, bound: T) -> Var<T> {
        let out = x.value.mapv(|v| bound * (v / bound).fast_tanh());
        self.push(out, Op::SoftClamp(x.clone(), bound), x.is_tracked())
    }

    pub fn silu(&self, x: &Var<T>) -> Var<T> {
        let out = x.value.mapv(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x.clone()), x.is_tracked())
    }

    pub fn abs(&self, x: &Var<T>) -> Var<T> {
        let out = x.value.mapv(T::abs);
        self.push(out, Op::Abs(x.clone()), x.is_tracked())
    }

    /// Hard clamp into `[lo, hi]`; NaN maps to `lo`. The gradient is zero
    /// outside the interval.
    pub fn clamp(&self, x: &Var<T>, lo: T, hi: T) -> Var<T> {
        let out = x.value.mapv(|v| v.max(lo).min(hi));
        self.push(out, Op::Clamp(x.clone(), lo, hi), x.is_tracked())
    }

    pub fn square(&self, x: &Var<T>) -> Var<T> {
        let out = x.value.mapv(|v| v * v);
        self.push(out, Op::Square(x.clone()), x.is_tracked())
    }

    /// Effective weight `g_i · v_i / ‖v_i‖` for `v: out x in`, `g: out x 1`.
    pub fn weight_norm(&self, v: &Var<T>, g: &Var<T>) -> Var<T> {
        let norms = row_norms(&v.value);
        let mut out = (*v.value).clone();
        for ((mut row, n), gi) in out.outer_iter_mut().zip(norms).zip(g.value.iter()) {
            let f = *gi / n;
            row.mapv_inplace(|x| x * f);
        }
        let tracked = v.is_tracked() || g.is_tracked();
        self.push(out, Op::WeightNorm(v.clone(), g.clone()), tracked)
    }

    pub fn gather_cols(&self, x: &Var<T>, map: &Arc<[usize]>) -> Var<T> {
        let out = gather_cols(&x.value, map);
        self.push(out, Op::GatherCols(x.clone(), map.clone()), x.is_tracked())
    }

    pub fn concat_cols(&self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        let out = concat_cols(&a.value, &b.value);
        let tracked = a.is_tracked() || b.is_tracked();
        self.push(out, Op::ConcatCols(a.clone(), b.clone()), tracked)
    }

    /// Row-major reinterpretation with the same element count.
    pub fn reshape(&self, x: &Var<T>, rows: usize, cols: usize) -> Var<T> {
        assert_eq!(x.value.len(), rows * cols, "reshape must preserve size");
        let out = reshape(&x.value, (rows, cols));
        self.push(out, Op::Reshape(x.clone()), x.is_tracked())
    }

    /// Per-row sums, `rows x 1`.
    pub fn sum_cols(&self, x: &Var<T>) -> Var<T> {
        let out = x.value.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::SumCols(x.clone()), x.is_tracked())
    }

    pub fn sum_all(&self, x: &Var<T>) -> Var<T> {
        let out = Array2::from_elem((1, 1), x.value.sum());
        self.push(out, Op::SumAll(x.clone()), x.is_tracked())
    }

    /// Reverse sweep from a `1 x 1` loss.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        let (rows, cols) = loss.shape();
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarLoss { rows, cols });
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Array2<T>>> = (0..nodes.len()).map(|_| None).collect();
        let Some(root) = loss.id else {
            return Ok(Gradients { grads });
        };
        grads[root] = Some(Array2::from_elem((1, 1), T::one()));

        fn acc<T: Real>(grads: &mut [Option<Array2<T>>], var: &Var<T>, g: Array2<T>) {
            if let Some(id) = var.id {
                match &mut grads[id] {
                    Some(existing) => existing.zip_mut_with(&g, |a, &b| *a = *a + b),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        for id in (0..=root).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMulT(x, w) => {
                    if x.is_tracked() {
                        acc(&mut grads, x, g.dot(&*w.value));
                    }
                    if w.is_tracked() {
                        acc(&mut grads, w, g.t().dot(&*x.value));
                    }
                }
                Op::AddRow(x, b) => {
                    if b.is_tracked() {
                        acc(&mut grads, b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    acc(&mut grads, x, g);
                }
                Op::Add(a, b) => {
                    if b.is_tracked() {
                        acc(&mut grads, b, g.clone());
                    }
                    acc(&mut grads, a, g);
                }
                Op::Sub(a, b) => {
                    if b.is_tracked() {
                        acc(&mut grads, b, g.mapv(|v| -v));
                    }
                    acc(&mut grads, a, g);
                }
                Op::Mul(a, b) => {
                    if a.is_tracked() {
                        acc(&mut grads, a, &g * &*b.value);
                    }
                    if b.is_tracked() {
                        acc(&mut grads, b, &g * &*a.value);
                    }
                }
                Op::Affine(x, s) => {
                    let s = *s;
                    acc(&mut grads, x, g.mapv(|v| v * s));
                }
                Op::Exp(x) => acc(&mut grads, x, &g * &*node.value),
                Op::SoftClamp(x, c) => {
                    let c = *c;
                    let mut out = g;
                    Zip::from(&mut out).and(&*x.value).for_each(|o, &xv| {
                        let t = (xv / c).fast_tanh();
                        *o = *o * (T::one() - t * t);
                    });
                    acc(&mut grads, x, out);
                }
                Op::Silu(x) => {
                    let mut out = g;
                    Zip::from(&mut out)
                        .and(&*x.value)
                        .for_each(|o, &xv| *o = *o * silu_grad(xv));
                    acc(&mut grads, x, out);
                }
                Op::Abs(x) => {
                    let mut out = g;
                    Zip::from(&mut out).and(&*x.value).for_each(|o, &xv| {
                        *o = if xv == T::zero() { T::zero() } else { *o * xv.signum() }
                    });
                    acc(&mut grads, x, out);
                }
                Op::Clamp(x, lo, hi) => {
                    let mut out = g;
                    Zip::from(&mut out).and(&*x.value).for_each(|o, &xv| {
                        if !(xv >= *lo && xv <= *hi) {
                            *o = T::zero();
                        }
                    });
                    acc(&mut grads, x, out);
                }
                Op::Square(x) => {
                    let two = T::of(2.0);
                    let mut out = g;
                    Zip::from(&mut out)
                        .and(&*x.value)
                        .for_each(|o, &xv| *o = *o * two * xv);
                    acc(&mut grads, x, out);
                }
                Op::WeightNorm(v, gain) => {
                    let norms = row_norms(&v.value);
                    let mut gv = Array2::<T>::zeros(v.value.raw_dim());
                    let mut gg = Array2::<T>::zeros(gain.value.raw_dim());
                    for i in 0..v.value.nrows() {
                        let vi = v.value.row(i);
                        let gi = g.row(i);
                        let n = norms[i];
                        let dot = vi.iter().zip(gi.iter()).fold(T::zero(), |a, (&p, &q)| a + p * q);
                        gg[[i, 0]] = dot / n;
                        let gn = gain.value[[i, 0]] / n;
                        let corr = gain.value[[i, 0]] * dot / (n * n * n);
                        for j in 0..v.value.ncols() {
                            gv[[i, j]] = gn * gi[j] - corr * vi[j];
                        }
                    }
                    if v.is_tracked() {
                        acc(&mut grads, v, gv);
                    }
                    if gain.is_tracked() {
                        acc(&mut grads, gain, gg);
                    }
                }
                Op::GatherCols(x, map) => {
                    let out = scatter_cols(&g, map, x.value.ncols());
                    acc(&mut grads, x, out);
                }
                Op::ConcatCols(a, b) => {
                    let split = a.value.ncols();
                    if a.is_tracked() {
                        acc(&mut grads, a, g.slice(ndarray::s![.., ..split]).to_owned());
                    }
                    if b.is_tracked() {
                        acc(&mut grads, b, g.slice(ndarray::s![.., split..]).to_owned());
                    }
                }
                Op::Reshape(x) => acc(&mut grads, x, reshape(&g, x.value.dim())),
                Op::SumCols(x) => {
                    let (r, c) = x.value.dim();
                    let out = Array2::from_shape_fn((r, c), |(i, _)| g[[i, 0]]);
                    acc(&mut grads, x, out);
                }
                Op::SumAll(x) => {
                    let out = Array2::from_elem(x.value.raw_dim(), g[[0, 0]]);
                    acc(&mut grads, x, out);
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Forward tangent sweep. `seeds` pair recorded leaves with tangent
    /// directions; returns the tangent of each requested output (`None`
    /// when the output does not depend on any seed).
    pub fn jvp(&self, seeds: &[(&Var<T>, Array2<T>)], outputs: &[&Var<T>]) -> Vec<Option<Array2<T>>> {
        let nodes = self.nodes.borrow();
        let mut tan: Vec<Option<Array2<T>>> = (0..nodes.len()).map(|_| None).collect();
        let mut start = nodes.len();
        for (var, t) in seeds {
            if let Some(id) = var.id {
                assert_eq!(t.dim(), var.shape(), "tangent shape must match seed");
                tan[id] = Some(t.clone());
                start = start.min(id);
            }
        }
        let end = outputs.iter().filter_map(|v| v.id).max().map_or(0, |m| m + 1);

        for id in start..end {
            let node = &nodes[id];
            let get = |v: &Var<T>| v.id.and_then(|i| tan[i].as_ref());
            let t = match &node.op {
                Op::Leaf => continue,
                Op::MatMulT(x, w) => add_opt(
                    get(x).map(|dx| dx.dot(&w.value.t())),
                    get(w).map(|dw| x.value.dot(&dw.t())),
                ),
                Op::AddRow(x, b) => add_opt(
                    get(x).cloned(),
                    get(b).map(|db| Array2::from_shape_fn(x.value.raw_dim(), |(_, j)| db[[0, j]])),
                ),
                Op::Add(a, b) => add_opt(get(a).cloned(), get(b).cloned()),
                Op::Sub(a, b) => add_opt(get(a).cloned(), get(b).map(|d| d.mapv(|v| -v))),
                Op::Mul(a, b) => add_opt(get(a).map(|da| da * &*b.value), get(b).map(|db| &*a.value * db)),
                Op::Affine(x, s) => get(x).map(|d| d.mapv(|v| v * *s)),
                Op::Exp(x) => get(x).map(|d| d * &*node.value),
                Op::SoftClamp(x, c) => get(x).map(|d| {
                    let mut out = d.clone();
                    Zip::from(&mut out).and(&*x.value).for_each(|o, &xv| {
                        let t = (xv / *c).fast_tanh();
                        *o = *o * (T::one() - t * t);
                    });
                    out
                }),
                Op::Silu(x) => get(x).map(|d| {
                    let mut out = d.clone();
                    Zip::from(&mut out)
                        .and(&*x.value)
                        .for_each(|o, &xv| *o = *o * silu_grad(xv));
                    out
                }),
                Op::Abs(x) => get(x).map(|d| {
                    let mut out = d.clone();
                    Zip::from(&mut out).and(&*x.value).for_each(|o, &xv| {
                        *o = if xv == T::zero() { T::zero() } else { *o * xv.signum() }
                    });
                    out
                }),
                Op::Clamp(x, lo, hi) => get(x).map(|d| {
                    let mut out = d.clone();
                    Zip::from(&mut out).and(&*x.value).for_each(|o, &xv| {
                        if !(xv >= *lo && xv <= *hi) {
                            *o = T::zero();
                        }
                    });
                    out
                }),
                Op::Square(x) => get(x).map(|d| {
                    let two = T::of(2.0);
                    let mut out = d.clone();
                    Zip::from(&mut out)
                        .and(&*x.value)
                        .for_each(|o, &xv| *o = *o * two * xv);
                    out
                }),
                Op::WeightNorm(v, gain) => {
                    let dv = get(v);
                    let dg = get(gain);
                    if dv.is_none() && dg.is_none() {
                        None
                    } else {
                        let norms = row_norms(&v.value);
                        let mut out = Array2::<T>::zeros(v.value.raw_dim());
                        for i in 0..v.value.nrows() {
                            let n = norms[i];
                            let gi = gain.value[[i, 0]];
                            let vi = v.value.row(i);
                            let dgi = dg.map_or(T::zero(), |d| d[[i, 0]]);
                            let vdv = dv.map_or(T::zero(), |d| {
                                vi.iter().zip(d.row(i).iter()).fold(T::zero(), |a, (&p, &q)| a + p * q)
                            });
                            for j in 0..v.value.ncols() {
                                let dvij = dv.map_or(T::zero(), |d| d[[i, j]]);
                                out[[i, j]] = dgi * vi[j] / n + gi * dvij / n - gi * vi[j] * vdv / (n * n * n);
                            }
                        }
                        Some(out)
                    }
                }
                Op::GatherCols(x, map) => get(x).map(|d| gather_cols(d, map)),
                Op::ConcatCols(a, b) => {
                    let (da, db) = (get(a), get(b));
                    if da.is_none() && db.is_none() {
                        None
                    } else {
                        let za;
                        let zb;
                        let da = match da {
                            Some(d) => d,
                            None => {
                                za = Array2::zeros(a.value.raw_dim());
                                &za
                            }
                        };
                        let db = match db {
                            Some(d) => d,
                            None => {
                                zb = Array2::zeros(b.value.raw_dim());
                                &zb
                            }
                        };
                        Some(concat_cols(da, db))
                    }
                }
                Op::Reshape(x) => get(x).map(|d| reshape(d, node.value.dim())),
                Op::SumCols(x) => get(x).map(|d| d.sum_axis(Axis(1)).insert_axis(Axis(1))),
                Op::SumAll(x) => get(x).map(|d| Array2::from_elem((1, 1), d.sum())),
            };
            tan[id] = t;
        }
        outputs
            .iter()
            .map(|v| v.id.and_then(|id| tan[id].clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn clamp_passes_gradient_only_inside() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(ndarray::array![[-2.0, -0.5, 0.5, 3.0, f64::NAN]]);
        let y = tape.clamp(&x, -1.0, 1.0);
        assert_eq!(y.value().row(0).to_vec(), vec![-1.0, -0.5, 0.5, 1.0, -1.0]);
        let grads = tape.backward(&tape.sum_all(&y)).unwrap();
        assert_eq!(grads.get(&x).unwrap().row(0).to_vec(), vec![0.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(array![[1.0, -2.0, 3.0]]);
        let loss = tape.sum_all(&x);
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap(), &array![[1.0, 1.0, 1.0]]);
    }

    #[test]
    fn squared_norm_gradient_is_twice_input() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(array![[0.5, -1.5], [2.0, 0.0]]);
        let loss = tape.sum_all(&tape.square(&x));
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap(), &(x.value() * 2.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(array![[1.0, 2.0]]);
        assert!(matches!(
            tape.backward(&x),
            Err(Error::NonScalarLoss { rows: 1, cols: 2 })
        ));
    }

    #[test]
    fn no_grad_tape_records_nothing() {
        let tape = Tape::<f32>::no_grad();
        let x = tape.leaf(array![[1.0f32]]);
        let y = tape.exp(&x);
        assert!(!y.is_tracked());
        assert!(tape.is_empty());
    }

    /// Central-difference check of every op, reverse and forward mode.
    #[test]
    fn ops_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut rand_arr = |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0));
        let x0 = rand_arr(3, 4);
        let w0 = rand_arr(5, 4);
        let g0 = rand_arr(5, 1).mapv(|v: f64| v + 1.5);
        let b0 = rand_arr(1, 5);
        let map: Arc<[usize]> = Arc::from(vec![4usize, 0, 2, 2, 1, 3]);

        let build = |tape: &Tape<f64>, x: &Var<f64>, w: &Var<f64>, g: &Var<f64>, b: &Var<f64>| {
            let weff = tape.weight_norm(w, g);
            let h = tape.add_row(&tape.matmul_t(x, &weff), b);
            let h = tape.silu(&h);
            let s = tape.soft_clamp(&h, 0.7);
            let e = tape.exp(&s);
            let m = tape.mul(&e, &tape.affine(&h, 0.3, 0.1));
            let c = tape.concat_cols(&tape.clamp(&m, -0.8, 0.9), &tape.abs(&h));
            let gth = tape.gather_cols(&c, &map);
            let r = tape.reshape(&gth, 2, 9);
            let d = tape.sub(&tape.square(&r), &tape.scale(&r, 0.5));
            let q = tape.add(&tape.sum_cols(&d), &tape.sum_cols(&r));
            tape.sum_all(&q)
        };
        let eval = |x: &Array2<f64>, w: &Array2<f64>, g: &Array2<f64>, b: &Array2<f64>| {
            let t = Tape::no_grad();
            let (x, w, g, b) = (t.leaf(x.clone()), t.leaf(w.clone()), t.leaf(g.clone()), t.leaf(b.clone()));
            build(&t, &x, &w, &g, &b).value()[[0, 0]]
        };

        let tape = Tape::new();
        let (x, w, g, b) = (tape.leaf(x0.clone()), tape.leaf(w0.clone()), tape.leaf(g0.clone()), tape.leaf(b0.clone()));
        let loss = build(&tape, &x, &w, &g, &b);
        let grads = tape.backward(&loss).unwrap();

        let h = 1e-6;
        let inputs = [&x0, &w0, &g0, &b0];
        let vars = [&x, &w, &g, &b];
        for which in 0..4 {
            let analytic = grads.get(vars[which]).unwrap();
            for idx in 0..inputs[which].len() {
                let bump = |delta: f64| {
                    let mut args: Vec<Array2<f64>> = inputs.iter().map(|a| (*a).clone()).collect();
                    let flat = args[which].as_slice_mut().unwrap();
                    flat[idx] += delta;
                    eval(&args[0], &args[1], &args[2], &args[3])
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[idx];
                assert!((fd - a).abs() < 1e-6 * (1.0 + fd.abs()), "input {which} idx {idx}: {a} vs {fd}");
            }
        }

        // forward mode: directional derivative along a random direction of x and w
        let dx = Array2::from_shape_fn(x0.raw_dim(), |(i, j)| ((i * 7 + j) as f64).sin());
        let dw = Array2::from_shape_fn(w0.raw_dim(), |(i, j)| ((i * 3 + j) as f64).cos());
        let tan = tape.jvp(&[(&x, dx.clone()), (&w, dw.clone())], &[&loss]);
        let fd = (eval(&(&x0 + &(&dx * h)), &(&w0 + &(&dw * h)), &g0, &b0)
            - eval(&(&x0 - &(&dx * h)), &(&w0 - &(&dw * h)), &g0, &b0))
            / (2.0 * h);
        let jv = tan[0].as_ref().unwrap()[[0, 0]];
        assert!((jv - fd).abs() < 1e-6 * (1.0 + fd.abs()), "{jv} vs {fd}");
    }
}
