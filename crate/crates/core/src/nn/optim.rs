//! AdamW with decoupled weight decay and global-norm gradient clipping.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::scalar::Real;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-5,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub first_moment: Vec<Array2<T>>,
    pub second_moment: Vec<Array2<T>>,
    pub step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

pub fn global_norm<T: Real>(grads: &[Array2<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Array2<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * scale);
        }
    }
    norm
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        Self {
            config,
            first_moment: store.zeros_like(),
            second_moment: store.zeros_like(),
            step: 0,
        }
    }

    /// One update. `lr_multipliers[group]` scales the learning rate of
    /// parameters in that group (missing groups use 1).
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &mut [Array2<T>],
        lr_multipliers: &[f64],
    ) -> Result<StepStats> {
        if grads.len() != store.len() {
            return Err(Error::shape(format!("{} gradients", store.len()), format!("{}", grads.len())));
        }
        for (g, v) in grads.iter().zip(store.values()) {
            if g.dim() != v.dim() {
                return Err(Error::shape(format!("{:?}", v.dim()), format!("{:?}", g.dim())));
            }
        }
        if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::TrainingDiverged {
                step: self.step,
                reason: "non-finite gradient".into(),
            });
        }
        let grad_norm = match self.config.clip_norm {
            Some(max) => clip_global_norm(grads, max),
            None => global_norm(grads),
        };
        let clipped = self.config.clip_norm.is_some_and(|m| grad_norm > m);

        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let eps = T::of(c.eps);

        let groups = store.groups().to_vec();
        for (idx, param) in store.values_mut().iter_mut().enumerate() {
            let mult = lr_multipliers.get(groups[idx]).copied().unwrap_or(1.0);
            let lr = c.lr * mult;
            let decay = T::of(1.0 - lr * c.weight_decay);
            let step_size = T::of(lr / bias1);
            let inv_sqrt_bias2 = T::of(1.0 / bias2.sqrt());
            Zip::from(param)
                .and(&mut self.first_moment[idx])
                .and(&mut self.second_moment[idx])
                .and(&grads[idx])
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + one_b1 * g;
                    *v = b2 * *v + one_b2 * g * g;
                    let denom = v.sqrt() * inv_sqrt_bias2 + eps;
                    *p = *p * decay - step_size * *m / denom;
                });
        }
        Ok(StepStats { grad_norm, clipped })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn single(value: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", array![[value]], 0);
        s
    }

    #[test]
    fn zero_gradient_zero_decay_is_noop() {
        let mut store = single(0.7);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&store, cfg);
        for _ in 0..10 {
            let mut g = vec![array![[0.0]]];
            opt.step(&mut store, &mut g, &[]).unwrap();
        }
        assert_eq!(store.values()[0][[0, 0]], 0.7);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut grads: Vec<Array2<f64>> = vec![array![[6.0, 0.0]], array![[0.0], [8.0]]];
        let before = clip_global_norm(&mut grads, 1.0);
        assert!((before - 10.0).abs() < 1e-12);
        assert!(global_norm(&grads) <= 1.0 + 1e-9);
        assert!((grads[0][[0, 0]] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_is_rejected() {
        let mut store = single(1.0);
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        let mut g = vec![array![[f64::NAN]]];
        assert!(matches!(
            opt.step(&mut store, &mut g, &[]),
            Err(Error::TrainingDiverged { .. })
        ));
    }

    /// Minimize (p - 1.5)^2 from p = 0 with the default AdamW settings
    /// except decay (which would bias the minimum).
    #[test]
    fn scalar_quadratic_converges() {
        let mut store = single(0.0);
        let cfg = AdamWConfig {
            lr: 1e-2,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&store, cfg);
        let mut steps = 0;
        for _ in 0..5000 {
            let p = store.values()[0][[0, 0]];
            let mut g = vec![array![[2.0 * (p - 1.5)]]];
            opt.step(&mut store, &mut g, &[]).unwrap();
            steps += 1;
        }
        let p = store.values()[0][[0, 0]];
        assert!((p - 1.5).abs() < 1e-4, "p = {p} after {steps} steps");
    }
}
