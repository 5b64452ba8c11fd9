use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type used by the tape and the models.
///
/// Training runs in `f32`; derivative and determinant oracles run in `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Sum
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }

    /// `exp` for the elementwise kernels. Exact for `f64`.
    fn fast_exp(self) -> Self {
        self.exp()
    }

    fn fast_tanh(self) -> Self {
        self.tanh()
    }
}

impl Real for f32 {
    /// Branch-free polynomial `exp` (relative error below 3e-7) that
    /// vectorizes, unlike the libm call.
    #[inline(always)]
    fn fast_exp(self) -> Self {
        let x = if self < -87.0 {
            -87.0
        } else if self > 88.0 {
            88.0
        } else {
            self
        };
        // Adding 1.5·2^23 rounds to the nearest integer and leaves it in
        // the low mantissa bits.
        let t = x * std::f32::consts::LOG2_E + 12_582_912.0;
        let n = t - 12_582_912.0;
        let r = x - n * 0.693_145_75 - n * 1.428_606_8e-6;
        let p = 1.0 + r * (1.0 + r * (0.5 + r * (0.166_666_6 + r * (0.041_666_87 + r * (0.008_333_6 + r * 0.001_388_9)))));
        p * f32::from_bits(t.to_bits().wrapping_add(127) << 23)
    }

    #[inline(always)]
    fn fast_tanh(self) -> Self {
        1.0 - 2.0 / ((2.0 * self).fast_exp() + 1.0)
    }
}

impl Real for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_exp_is_accurate() {
        let mut worst = 0.0f64;
        for i in 0..200_001 {
            let x = -80.0 + 160.0 * i as f32 / 200_000.0;
            let want = (x as f64).exp();
            worst = worst.max(((x.fast_exp() as f64 - want) / want).abs());
        }
        assert!(worst < 5e-7, "{worst}");
        assert_eq!(f32::INFINITY.fast_exp(), 88f32.fast_exp());
        assert_eq!(f32::NEG_INFINITY.fast_exp(), (-87f32).fast_exp());
        for x in [-30.0f32, -1.0, -1e-3, 0.0, 0.5, 3.0, 40.0] {
            assert!((x.fast_tanh() - x.tanh()).abs() < 3e-7, "{x}");
        }
    }
}
