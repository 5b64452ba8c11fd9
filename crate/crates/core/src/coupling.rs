//! Affine coupling bijectors on flattened patches.
//!
//! A block splits its input into a conditioning half `x1` and a transformed
//! half `x2`, then
//!
//! ```text
//! x2' = x2 ⊙ exp(s1(x1)) + t1(x1)
//! x1' = x1 ⊙ exp(s2(x2')) + t2(x2')
//! ```
//!
//! with log-determinant `Σ s1 + Σ s2`. Scales pass through `c·tanh(s/c)`.

use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::{kaiming_init, Binding, ParamStore, Real, ResNet, ResNetShape, Tape, Var};

/// Bound applied to scale outputs before exponentiation.
pub const SCALE_BOUND: f64 = 8.0;

/// Partition of a patch's columns into conditioning and transformed sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CouplingMask {
    pub dim: usize,
    pub parity: usize,
    conditioner: Arc<[usize]>,
    transformed: Arc<[usize]>,
    /// Gathers `[x1' | x2']` back into patch order.
    merge: Arc<[usize]>,
}

impl CouplingMask {
    fn from_selection(dim: usize, parity: usize, selected: impl Fn(usize) -> bool) -> Self {
        let conditioner: Vec<usize> = (0..dim).filter(|&k| selected(k)).collect();
        let transformed: Vec<usize> = (0..dim).filter(|&k| !selected(k)).collect();
        let mut merge = vec![0; dim];
        for (r, &k) in conditioner.iter().enumerate() {
            merge[k] = r;
        }
        for (r, &k) in transformed.iter().enumerate() {
            merge[k] = conditioner.len() + r;
        }
        Self {
            dim,
            parity,
            conditioner: conditioner.into(),
            transformed: transformed.into(),
            merge: merge.into(),
        }
    }

    /// Pixels with `(a + b) mod 2 == parity` condition; all channels of a
    /// pixel stay together. Patch columns are `(a·m + b)·C + c`.
    pub fn checkerboard(m: usize, channels: usize, parity: usize) -> Self {
        Self::from_selection(m * m * channels, parity, |k| {
            let pix = k / channels;
            (pix / m + pix % m) % 2 == parity
        })
    }

    /// Columns with `k mod 2 == parity` condition.
    pub fn alternating(dim: usize, parity: usize) -> Self {
        Self::from_selection(dim, parity, |k| k % 2 == parity)
    }

    pub fn conditioner(&self) -> &[usize] {
        &self.conditioner
    }

    pub fn transformed(&self) -> &[usize] {
        &self.transformed
    }
}

#[derive(Clone, Debug)]
pub struct CouplingBlock {
    pub mask: CouplingMask,
    pub s1: ResNet,
    pub t1: ResNet,
    pub s2: ResNet,
    pub t2: ResNet,
}

/// Width and depth of the scale/translation networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetSize {
    pub hidden: usize,
    pub n_res: usize,
}

impl CouplingBlock {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        mask: CouplingMask,
        size: NetSize,
        group: usize,
        rng: &mut R,
    ) -> Self {
        let n1 = mask.conditioner.len();
        let n2 = mask.transformed.len();
        let fwd = ResNetShape { input: n1, hidden: size.hidden, output: n2, n_res: size.n_res };
        let back = ResNetShape { input: n2, hidden: size.hidden, output: n1, n_res: size.n_res };
        let s1 = ResNet::new(store, &format!("{name}.s1"), fwd, group, rng);
        let t1 = ResNet::new(store, &format!("{name}.t1"), fwd, group, rng);
        let s2 = ResNet::new(store, &format!("{name}.s2"), back, group, rng);
        let t2 = ResNet::new(store, &format!("{name}.t2"), back, group, rng);
        Self { mask, s1, t1, s2, t2 }
    }

    pub fn dim(&self) -> usize {
        self.mask.dim
    }

    fn check(&self, x: &Var<impl Real>) -> Result<()> {
        if x.shape().1 != self.dim() {
            return Err(Error::shape(format!("{} patch values", self.dim()), format!("{}", x.shape().1)));
        }
        Ok(())
    }

    fn scale<T: Real>(&self, b: &Binding<'_, T>, net: &ResNet, x: &Var<T>) -> Result<Var<T>> {
        Ok(b.tape().soft_clamp(&net.forward(b, x)?, T::of(SCALE_BOUND)))
    }

    /// Returns the transformed rows and each row's log-determinant (`N x 1`).
    pub fn forward<T: Real>(&self, b: &Binding<'_, T>, x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        self.check(x)?;
        let tape = b.tape();
        let x1 = tape.gather_cols(x, &self.mask.conditioner);
        let x2 = tape.gather_cols(x, &self.mask.transformed);

        let s1 = self.scale(b, &self.s1, &x1)?;
        let t1 = self.t1.forward(b, &x1)?;
        let y2 = tape.add(&tape.mul(&x2, &tape.exp(&s1)), &t1);

        let s2 = self.scale(b, &self.s2, &y2)?;
        let t2 = self.t2.forward(b, &y2)?;
        let y1 = tape.add(&tape.mul(&x1, &tape.exp(&s2)), &t2);

        let y = tape.gather_cols(&tape.concat_cols(&y1, &y2), &self.mask.merge);
        let logdet = tape.add(&tape.sum_cols(&s1), &tape.sum_cols(&s2));
        Ok((y, logdet))
    }

    /// Exact inverse; the returned log-determinant is that of the inverse map.
    pub fn inverse<T: Real>(&self, b: &Binding<'_, T>, y: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        self.check(y)?;
        let tape = b.tape();
        let y1 = tape.gather_cols(y, &self.mask.conditioner);
        let y2 = tape.gather_cols(y, &self.mask.transformed);

        let s2 = self.scale(b, &self.s2, &y2)?;
        let t2 = self.t2.forward(b, &y2)?;
        let x1 = tape.mul(&tape.sub(&y1, &t2), &tape.exp(&tape.scale(&s2, -T::one())));

        let s1 = self.scale(b, &self.s1, &x1)?;
        let t1 = self.t1.forward(b, &x1)?;
        let x2 = tape.mul(&tape.sub(&y2, &t1), &tape.exp(&tape.scale(&s1, -T::one())));

        let x = tape.gather_cols(&tape.concat_cols(&x1, &x2), &self.mask.merge);
        let logdet = tape.scale(&tape.add(&tape.sum_cols(&s1), &tape.sum_cols(&s2)), -T::one());
        Ok((x, logdet))
    }

    pub fn networks(&self) -> [&ResNet; 4] {
        [&self.s1, &self.t1, &self.s2, &self.t2]
    }

    /// Re-draws every layer, projections included, so the block is far from
    /// the identity: Kaiming weights, projection gains scaled by
    /// `projection_gain`, biases `N(0, 0.1²)`.
    pub fn randomize<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R, projection_gain: f64) {
        let bias = Normal::new(0.0, 0.1).expect("positive std");
        for net in self.networks() {
            for layer in net.layers() {
                kaiming_init(store, layer, rng);
                if std::ptr::eq(layer, &net.projection) {
                    store.get_mut(layer.gain).mapv_inplace(|g| g * T::of(projection_gain));
                }
                store.get_mut(layer.bias).mapv_inplace(|_| T::of(bias.sample(rng)));
            }
        }
    }
}

/// Ordered composition of coupling blocks.
#[derive(Clone, Debug, Default)]
pub struct BijectorStack {
    pub blocks: Vec<CouplingBlock>,
}

impl BijectorStack {
    /// `n` blocks whose mask parity alternates 0, 1, 0, ...
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        n: usize,
        mask: impl Fn(usize) -> CouplingMask,
        size: NetSize,
        group: usize,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..n)
            .map(|k| CouplingBlock::new(store, &format!("{name}.{k}"), mask(k % 2), size, group, rng))
            .collect();
        Self { blocks }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn randomize<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R, projection_gain: f64) {
        for block in &self.blocks {
            block.randomize(store, rng, projection_gain);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn forward<T: Real>(&self, b: &Binding<'_, T>, x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let tape = b.tape();
        let mut logdet = tape.constant(Array2::zeros((x.shape().0, 1)));
        let mut h = x.clone();
        for block in &self.blocks {
            let (y, ld) = block.forward(b, &h)?;
            logdet = tape.add(&logdet, &ld);
            h = y;
        }
        Ok((h, logdet))
    }

    pub fn inverse<T: Real>(&self, b: &Binding<'_, T>, y: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let tape = b.tape();
        let mut logdet = tape.constant(Array2::zeros((y.shape().0, 1)));
        let mut h = y.clone();
        for block in self.blocks.iter().rev() {
            let (x, ld) = block.inverse(b, &h)?;
            logdet = tape.add(&logdet, &ld);
            h = x;
        }
        Ok((h, logdet))
    }

    /// Eager evaluation on rows of `x`: returns outputs and per-row log-dets.
    pub fn forward_array<T: Real>(&self, store: &ParamStore<T>, x: &Array2<T>) -> Result<(Array2<T>, Array1<T>)> {
        self.eval_array(store, x, false)
    }

    pub fn inverse_array<T: Real>(&self, store: &ParamStore<T>, y: &Array2<T>) -> Result<(Array2<T>, Array1<T>)> {
        self.eval_array(store, y, true)
    }

    fn eval_array<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Array2<T>,
        inverse: bool,
    ) -> Result<(Array2<T>, Array1<T>)> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("coupling input"));
        }
        let tape = Tape::no_grad();
        let b = Binding::frozen(&tape, store);
        let xv = tape.constant(x.clone());
        let (y, ld) = if inverse { self.inverse(&b, &xv)? } else { self.forward(&b, &xv)? };
        Ok((y.into_value(), ld.into_value().remove_axis(Axis(1))))
    }
}
