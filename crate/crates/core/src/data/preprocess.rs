//! Dequantization and logit transform between 8-bit pixels and model space.
//!
//! `y = (x8 + u) / 256` with `u ∈ [0, 1)`, then `x = logit(α + (1 - 2α) y)`.
//! The returned log-determinant is that of `x8 + u ↦ x`, so it includes
//! `-ln 256` per value and a model's bits per dimension come out on the
//! 8-bit scale.

use ndarray::{Array1, Array2, ArrayView2, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Real;

pub const BINS: f64 = 256.0;

/// How the dequantization offset `u` is chosen.
pub enum Noise<'a, R: Rng> {
    /// Fresh `u ~ U[0, 1)` per value.
    Uniform(&'a mut R),
    /// `u = 1/2` everywhere.
    Midpoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dequantizer {
    pub alpha: f64,
}

impl Default for Dequantizer {
    fn default() -> Self {
        Self { alpha: 0.05 }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Dequantizer {
    /// Maps a continuous pixel `v = x8 + u ∈ [0, 256)` to model space and
    /// returns the log-derivative.
    pub fn forward_value(&self, v: f64) -> (f64, f64) {
        let a = self.alpha;
        let p = a + (1.0 - 2.0 * a) * v / BINS;
        let x = (p / (1.0 - p)).ln();
        let ld = (1.0 - 2.0 * a).ln() - p.ln() - (1.0 - p).ln() - BINS.ln();
        (x, ld)
    }

    /// Inverse of [`forward_value`](Self::forward_value).
    pub fn inverse_value(&self, x: f64) -> f64 {
        let a = self.alpha;
        (sigmoid(x) - a) / (1.0 - 2.0 * a) * BINS
    }

    /// Rows of 8-bit pixels to model space, with the per-row log-determinant.
    pub fn preprocess<T: Real, R: Rng>(&self, x8: ArrayView2<'_, u8>, noise: Noise<'_, R>) -> (Array2<T>, Array1<f64>) {
        let mut out = Array2::zeros(x8.raw_dim());
        let mut logdet = Array1::zeros(x8.nrows());
        let mut offset = match noise {
            Noise::Uniform(rng) => Box::new(move || rng.random::<f64>()) as Box<dyn FnMut() -> f64 + '_>,
            Noise::Midpoint => Box::new(|| 0.5),
        };
        for ((row, mut orow), ld) in x8.outer_iter().zip(out.outer_iter_mut()).zip(logdet.iter_mut()) {
            let mut acc = 0.0;
            for (&p, o) in row.iter().zip(orow.iter_mut()) {
                let (x, d) = self.forward_value(p as f64 + offset());
                *o = T::of(x);
                acc += d;
            }
            *ld = acc;
        }
        (out, logdet)
    }

    /// Like [`preprocess`](Self::preprocess) for pixel values held as
    /// floats; rejects values that are not integers in `0..=255`.
    pub fn preprocess_levels<T: Real, R: Rng>(&self, levels: &Array2<f64>, noise: Noise<'_, R>) -> Result<(Array2<T>, Array1<f64>)> {
        let x8 = levels_to_u8(levels)?;
        Ok(self.preprocess(x8.view(), noise))
    }

    /// Model space back to 8-bit pixels (the offset is dropped by flooring).
    pub fn postprocess<T: Real>(&self, x: &Array2<T>) -> Array2<u8> {
        x.mapv(|v| self.inverse_value(v.as_f64()).floor().clamp(0.0, BINS - 1.0) as u8)
    }

    /// Model space to continuous intensities in `[0, 1]`.
    pub fn to_unit<T: Real>(&self, x: &Array2<T>) -> Array2<f64> {
        x.mapv(|v| (self.inverse_value(v.as_f64()) / BINS).clamp(0.0, 1.0))
    }

    /// Model-space value of intensity `y ∈ [0, 1]`.
    pub fn from_unit(&self, y: f64) -> f64 {
        self.forward_value(y.clamp(0.0, 1.0) * BINS).0
    }
}

pub fn levels_to_u8(levels: &Array2<f64>) -> Result<Array2<u8>> {
    let mut out = Array2::zeros(levels.raw_dim());
    let mut bad = None;
    Zip::from(&mut out).and(levels).for_each(|o, &v| {
        if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
            *o = v as u8;
        } else {
            bad = Some(v);
        }
    });
    match bad {
        Some(v) => Err(Error::InvalidArgument(format!("pixel value {v} outside 0..=255"))),
        None => Ok(out),
    }
}

/// `-(log p + logdet) / (D ln 2)`: bits per dimension of one image given
/// its model-space log-likelihood and the preprocessing log-determinant.
pub fn bits_per_dim(log_prob: f64, preprocess_logdet: f64, dims: usize) -> f64 {
    -(log_prob + preprocess_logdet) / (dims as f64 * std::f64::consts::LN_2)
}

/// The density that uniform 8-bit noise induces in model space: the
/// push-forward of `U[0, 1]^D` through the logit map.
#[derive(Clone, Copy, Debug, Default)]
pub struct UniformOracle {
    pub dequantizer: Dequantizer,
}

impl UniformOracle {
    pub fn log_prob<T: Real>(&self, x: &Array2<T>) -> Array1<f64> {
        let a = self.dequantizer.alpha;
        x.outer_iter()
            .map(|row| {
                row.iter()
                    .map(|&v| {
                        let p = sigmoid(v.as_f64());
                        if p < a || p > 1.0 - a {
                            f64::NEG_INFINITY
                        } else {
                            p.ln() + (1.0 - p).ln() - (1.0 - 2.0 * a).ln()
                        }
                    })
                    .sum()
            })
            .collect()
    }
}
