//! Factorized latent priors and temperature schedules.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Real, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    Laplacian,
    Gaussian,
}

impl std::str::FromStr for PriorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "laplacian" | "laplace" => Ok(Self::Laplacian),
            "gaussian" | "normal" => Ok(Self::Gaussian),
            _ => Err(Error::InvalidArgument(format!("unknown prior {s:?}"))),
        }
    }
}

/// Independent prior over every latent: Laplacian with scale `b`, or
/// Gaussian with standard deviation `σ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub kind: PriorKind,
    pub scale: f64,
}

impl Default for Prior {
    fn default() -> Self {
        Self::laplacian(1.0)
    }
}

impl Prior {
    pub fn laplacian(b: f64) -> Self {
        Self { kind: PriorKind::Laplacian, scale: b }
    }

    pub fn gaussian(sigma: f64) -> Self {
        Self { kind: PriorKind::Gaussian, scale: sigma }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::InvalidArgument(format!("prior scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }

    /// `log p(z)` for one coordinate.
    pub fn log_density(&self, z: f64) -> f64 {
        let s = self.scale;
        match self.kind {
            PriorKind::Laplacian => -z.abs() / s - (2.0 * s).ln(),
            PriorKind::Gaussian => -0.5 * (z / s).powi(2) - (s * (2.0 * PI).sqrt()).ln(),
        }
    }

    /// Row sums of `log p` over the columns of `z` (`B x k` to `B x 1`).
    pub fn log_prob_var<T: Real>(&self, tape: &Tape<T>, z: &Var<T>) -> Var<T> {
        let k = z.shape().1 as f64;
        let s = self.scale;
        match self.kind {
            PriorKind::Laplacian => {
                let a = tape.sum_cols(&tape.abs(z));
                tape.affine(&a, T::of(-1.0 / s), T::of(-k * (2.0 * s).ln()))
            }
            PriorKind::Gaussian => {
                let q = tape.sum_cols(&tape.square(z));
                tape.affine(&q, T::of(-0.5 / (s * s)), T::of(-k * (s * (2.0 * PI).sqrt()).ln()))
            }
        }
    }

    /// Draw at temperature `t`: the density `p^{1/T}` renormalized, which is
    /// a Laplacian of scale `b·T` or a Gaussian of std `σ·√T`.
    pub fn sample<R: Rng>(&self, rng: &mut R, t: f64) -> f64 {
        match self.kind {
            PriorKind::Laplacian => {
                let e: f64 = Exp1.sample(rng);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                sign * e * self.scale * t
            }
            PriorKind::Gaussian => {
                let n: f64 = StandardNormal.sample(rng);
                n * self.scale * t.sqrt()
            }
        }
    }

    pub fn sample_array<T: Real, R: Rng>(&self, rng: &mut R, rows: usize, cols: usize, t: f64) -> Array2<T> {
        Array2::from_shape_simple_fn((rows, cols), || T::of(self.sample(rng, t)))
    }

    /// CDF at temperature 1.
    pub fn cdf(&self, z: f64) -> f64 {
        let s = self.scale;
        match self.kind {
            PriorKind::Laplacian => {
                if z < 0.0 {
                    0.5 * (z / s).exp()
                } else {
                    1.0 - 0.5 * (-z / s).exp()
                }
            }
            PriorKind::Gaussian => 0.5 * (1.0 + erf(z / (s * std::f64::consts::SQRT_2))),
        }
    }
}

/// Abramowitz-Stegun 7.1.26 (|error| < 1.5e-7).
fn erf(x: f64) -> f64 {
    let t = 1.0 / (1.0 + 0.327_591_1 * x.abs());
    let poly = t * (0.254_829_592 + t * (-0.284_496_736 + t * (1.421_413_741 + t * (-1.453_152_027 + t * 1.061_405_429))));
    let y = 1.0 - poly * (-x * x).exp();
    if x >= 0.0 {
        y
    } else {
        -y
    }
}

/// One positive temperature per level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub temps: Vec<f64>,
}

impl TemperatureSchedule {
    pub fn uniform(t: f64, levels: usize) -> Result<Self> {
        Self::new(vec![t; levels])
    }

    /// `t0` on level 0 and `rest` everywhere above.
    pub fn mixed(t0: f64, rest: f64, levels: usize) -> Result<Self> {
        let mut temps = vec![rest; levels];
        if let Some(first) = temps.first_mut() {
            *first = t0;
        }
        Self::new(temps)
    }

    pub fn new(temps: Vec<f64>) -> Result<Self> {
        if let Some(bad) = temps.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
            return Err(Error::InvalidArgument(format!("temperatures must be positive, got {bad}")));
        }
        Ok(Self { temps })
    }

    pub fn level(&self, h: usize) -> f64 {
        self.temps[h]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn densities_at_zero() {
        assert!((Prior::laplacian(1.0).log_density(0.0) - 0.5f64.ln()).abs() < 1e-15);
        let g = Prior::gaussian(1.0).log_density(0.0);
        assert!((g + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn tape_log_prob_matches_scalar_sum() {
        for prior in [Prior::laplacian(0.7), Prior::gaussian(1.3)] {
            let tape = Tape::<f64>::no_grad();
            let z = Array2::from_shape_fn((3, 5), |(i, j)| (i as f64 - 1.0) * 0.4 + j as f64 * 0.3 - 0.6);
            let lp = prior.log_prob_var(&tape, &tape.constant(z.clone()));
            for (r, row) in z.outer_iter().enumerate() {
                let want: f64 = row.iter().map(|&v| prior.log_density(v)).sum();
                assert!((lp.value()[[r, 0]] - want).abs() < 1e-12);
            }
        }
    }

    /// Kolmogorov-Smirnov distance of 20k draws against the CDF.
    #[test]
    fn unit_temperature_samples_follow_prior() {
        for prior in [Prior::laplacian(1.0), Prior::gaussian(1.0)] {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let mut xs: Vec<f64> = (0..20_000).map(|_| prior.sample(&mut rng, 1.0)).collect();
            xs.sort_by(f64::total_cmp);
            let n = xs.len() as f64;
            let d = xs
                .iter()
                .enumerate()
                .map(|(k, &x)| {
                    let f = prior.cdf(x);
                    (f - k as f64 / n).abs().max((f - (k + 1) as f64 / n).abs())
                })
                .fold(0.0, f64::max);
            // critical value at alpha = 0.001 is 1.95 / sqrt(n)
            assert!(d < 1.95 / n.sqrt(), "{prior:?}: D = {d}");
        }
    }

    #[test]
    fn temperature_scales_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lap = Prior::laplacian(1.0);
        let mean_abs: f64 = (0..20_000).map(|_| lap.sample(&mut rng, 0.25).abs()).sum::<f64>() / 20_000.0;
        assert!((mean_abs - 0.25).abs() < 0.01);
        let gau = Prior::gaussian(1.0);
        let var: f64 = (0..20_000).map(|_| gau.sample(&mut rng, 0.36).powi(2)).sum::<f64>() / 20_000.0;
        assert!((var - 0.36).abs() < 0.02);
    }

    #[test]
    fn schedules_validate() {
        let s = TemperatureSchedule::mixed(0.2, 0.6, 4).unwrap();
        assert_eq!(s.temps, vec![0.2, 0.6, 0.6, 0.6]);
        assert!(TemperatureSchedule::uniform(0.0, 3).is_err());
        assert!(TemperatureSchedule::new(vec![1.0, f64::NAN]).is_err());
    }
}
