//! Floating-point scalar abstraction shared by every numeric module.
//!
//! All math in this crate is written against [`Scalar`], which is
//! implemented for `f32` and `f64`. Reference runs use `f64`; tolerances
//! quoted in the tests assume double precision.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::hexfloat::{self, HexFloatError};

/// Floating point type usable by policies, losses and the optimizer.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Log-probability assigned to masked tokens. Stands in for `-inf`.
    fn masked() -> Self;

    /// Exact hexadecimal floating-point rendering (`-0x1.8p+1` style).
    fn to_hex(self) -> String;

    /// Inverse of [`Scalar::to_hex`]; must reproduce the bits exactly.
    fn from_hex(s: &str) -> Result<Self, HexFloatError>;
}

impl Scalar for f64 {
    fn masked() -> Self {
        -1e30
    }

    fn to_hex(self) -> String {
        hexfloat::format_f64(self)
    }

    fn from_hex(s: &str) -> Result<Self, HexFloatError> {
        hexfloat::parse_f64(s)
    }
}

impl Scalar for f32 {
    fn masked() -> Self {
        -1e30
    }

    fn to_hex(self) -> String {
        hexfloat::format_f64(self as f64)
    }

    fn from_hex(s: &str) -> Result<Self, HexFloatError> {
        let wide = hexfloat::parse_f64(s)?;
        let narrow = wide as f32;
        if (narrow as f64).to_bits() != wide.to_bits() && !(wide.is_nan() && narrow.is_nan()) {
            return Err(HexFloatError::Inexact(s.to_string()));
        }
        Ok(narrow)
    }
}

/// Lossless-enough conversion from an `f64` literal or config value.
#[inline]
pub fn lit<S: Scalar>(x: f64) -> S {
    S::from_f64(x).expect("f64 converts to every Scalar")
}

/// `log(sum(exp(xs)))`, stable for large magnitudes. Empty input gives `-inf`.
pub fn log_sum_exp<S: Scalar>(xs: &[S]) -> S {
    let max = xs.iter().copied().fold(S::neg_infinity(), S::max);
    if !max.is_finite() {
        return max;
    }
    let sum: S = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// `log(1 + exp(x))`.
pub fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

/// Logistic sigmoid, evaluated on the branch that avoids overflow.
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_matches_naive() {
        let xs = [0.1f64, -2.0, 3.5];
        let naive = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&xs) - naive).abs() < 1e-14);
        assert_eq!(log_sum_exp::<f64>(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn log_sum_exp_ignores_sentinel() {
        let xs = [0.0f64, 0.0, f64::masked()];
        assert!((log_sum_exp(&xs) - 2f64.ln()).abs() < 1e-15);
        let xs32 = [0.0f32, 0.0, f32::masked()];
        assert!((log_sum_exp(&xs32) - 2f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn sigmoid_is_symmetric() {
        for &w in &[-40.0f64, -3.0, -0.2, 0.0, 0.7, 12.0, 50.0] {
            assert!((sigmoid(w) + sigmoid(-w) - 1.0).abs() < 1e-12);
        }
        assert_eq!(sigmoid(0.0f64), 0.5);
    }

    #[test]
    fn softplus_is_neg_log_sigmoid() {
        for &w in &[-30.0f64, -1.0, 0.0, 2.0, 35.0] {
            let expected = -sigmoid(-w).ln();
            assert!((softplus(w) - expected).abs() < 1e-12, "w={w}");
        }
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn f32_hex_rejects_inexact() {
        assert!(f32::from_hex("0x1.0000000000001p+0").is_err());
        assert_eq!(f32::from_hex(&1.5f32.to_hex()).unwrap(), 1.5);
    }
}
