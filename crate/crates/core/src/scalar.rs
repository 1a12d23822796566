//! Floating-point abstraction shared by the model, likelihood and metric code.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign};

/// Real scalar used throughout the numerical core: `f32` or `f64`.
pub trait Scalar:
    Float + FloatConst + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal into this scalar type.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// `log(exp(a) + exp(b))` without overflow.
pub(crate) fn log_add_exp<T: Scalar>(a: T, b: T) -> T {
    if a == T::neg_infinity() {
        return b;
    }
    if b == T::neg_infinity() {
        return a;
    }
    let hi = a.max(b);
    hi + ((a - hi).exp() + (b - hi).exp()).ln()
}

/// Log-sum-exp over a slice; `-inf` for an empty slice.
pub(crate) fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let hi = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if hi == T::neg_infinity() {
        return hi;
    }
    hi + xs.iter().map(|&x| (x - hi).exp()).sum::<T>().ln()
}

pub(crate) fn ln_gamma<T: Scalar>(x: T) -> T {
    T::lit(statrs::function::gamma::ln_gamma(x.as_f64()))
}

/// `log(1 + exp(x))`, stable for large |x|.
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn logistic<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
