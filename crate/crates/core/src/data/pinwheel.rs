//! Pinwheel point clouds: Gaussian blobs stretched radially and bent into
//! spiral arms whose twist grows with radius.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PinwheelParams {
    pub legs: usize,
    pub radial_std: f64,
    pub tangential_std: f64,
    pub rate: f64,
}

impl Default for PinwheelParams {
    fn default() -> Self {
        Self {
            legs: 4,
            radial_std: 0.3,
            tangential_std: 0.1,
            rate: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pinwheel {
    /// `n x 2`
    pub points: Array2<f64>,
    /// Arm of each point.
    pub labels: Vec<usize>,
}

/// Point `k` belongs to arm `k mod legs`.
pub fn gen_pinwheel(params: &PinwheelParams, n: usize, seed: u64) -> Result<Pinwheel> {
    if params.legs == 0 {
        return Err(Error::InvalidArgument("pinwheel needs at least one leg".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for k in 0..n {
        let label = k % params.legs;
        let a: f64 = StandardNormal.sample(&mut rng);
        let b: f64 = StandardNormal.sample(&mut rng);
        let (r, t) = (a * params.radial_std + 1.0, b * params.tangential_std);
        let angle = 2.0 * PI * label as f64 / params.legs as f64 + params.rate * r.exp();
        let (sin, cos) = angle.sin_cos();
        points[[k, 0]] = 2.0 * (r * cos - t * sin);
        points[[k, 1]] = 2.0 * (r * sin + t * cos);
        labels.push(label);
    }
    Ok(Pinwheel { points, labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_labels_and_determinism() {
        let p = gen_pinwheel(&PinwheelParams::default(), 1000, 3).unwrap();
        for arm in 0..4 {
            assert_eq!(p.labels.iter().filter(|&&l| l == arm).count(), 250);
        }
        assert_eq!(p, gen_pinwheel(&PinwheelParams::default(), 1000, 3).unwrap());
        assert!(gen_pinwheel(&PinwheelParams { legs: 0, ..Default::default() }, 5, 0).is_err());
    }

    /// Rotating arm k back by 2πk/4 makes its radius and angle samples
    /// indistinguishable from arm 0 (two-sample Kolmogorov-Smirnov).
    #[test]
    fn arms_are_rotations_of_each_other() {
        let p = gen_pinwheel(&PinwheelParams::default(), 8000, 11).unwrap();
        let polar = |arm: usize| -> (Vec<f64>, Vec<f64>) {
            let back = -2.0 * PI * arm as f64 / 4.0;
            let (s, c) = back.sin_cos();
            p.points
                .outer_iter()
                .zip(&p.labels)
                .filter(|(_, &l)| l == arm)
                .map(|(x, _)| {
                    let (u, v) = (x[0] * c - x[1] * s, x[0] * s + x[1] * c);
                    ((u * u + v * v).sqrt(), v.atan2(u))
                })
                .unzip()
        };
        let ks = |mut a: Vec<f64>, mut b: Vec<f64>| {
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            let (mut i, mut j, mut d) = (0, 0, 0.0f64);
            while i < a.len() && j < b.len() {
                if a[i] <= b[j] {
                    i += 1;
                } else {
                    j += 1;
                }
                d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
            }
            d
        };
        let (r0, t0) = polar(0);
        let crit = 1.95 * (2.0 / 2000.0f64).sqrt();
        for arm in 1..4 {
            let (r, t) = polar(arm);
            assert!(ks(r0.clone(), r) < crit);
            assert!(ks(t0.clone(), t) < crit);
        }
    }
}
