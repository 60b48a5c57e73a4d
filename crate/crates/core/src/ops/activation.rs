use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EluParams {
    alpha: f64,
}

impl EluParams {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::invalid("elu", format!("alpha must be positive, got {alpha}")));
        }
        Ok(EluParams { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

impl Default for EluParams {
    fn default() -> Self {
        EluParams { alpha: 1.0 }
    }
}

/// `x` for `x > 0`, `alpha * (e^x - 1)` otherwise.
#[inline]
pub fn elu<T: Scalar>(x: T, alpha: T) -> T {
    if x > T::zero() {
        x
    } else {
        alpha * x.exp_m1()
    }
}

/// 1 for `x > 0`, `alpha * e^x` otherwise (so the value at 0 is `alpha`).
#[inline]
pub fn elu_derivative<T: Scalar>(x: T, alpha: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        alpha * x.exp()
    }
}

pub fn elu_forward<T: Scalar>(x: &Tensor4<T>, alpha: f64) -> Tensor4<T> {
    let a = T::lit(alpha);
    x.map(|v| elu(v, a))
}

pub fn elu_backward<T: Scalar>(x: &Tensor4<T>, alpha: f64, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    let a = T::lit(alpha);
    x.zip_with(grad_out, "elu_backward", |v, g| g * elu_derivative(v, a))
}

pub fn relu_forward<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| v.max(T::zero()))
}

/// Subgradient 0 at exactly 0.
pub fn relu_backward<T: Scalar>(x: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    x.zip_with(grad_out, "relu_backward", |v, g| if v > T::zero() { g } else { T::zero() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    #[test]
    fn elu_reference_values() {
        assert_eq!(elu(0.0f64, 1.0), 0.0);
        assert_eq!(elu(1.0f64, 1.0), 1.0);
        assert!((elu(-1.0f64, 1.0) - (-0.632_120_558_828_557_7)).abs() < 1e-12);
        assert!((elu(-20.0f64, 1.0) + 1.0).abs() < 1e-8);
        assert!((elu(-1.0f64, 2.0) - 2.0 * (-0.632_120_558_828_557_7)).abs() < 1e-12);
    }

    #[test]
    fn elu_derivative_branches() {
        assert_eq!(elu_derivative(2.0f64, 1.0), 1.0);
        assert_eq!(elu_derivative(0.0f64, 1.0), 1.0);
        assert_eq!(elu_derivative(0.0f64, 0.5), 0.5);
        assert!((elu_derivative(-1e-12f64, 1.0) - 1.0).abs() < 1e-11);
    }

    #[test]
    fn alpha_must_be_positive() {
        assert!(EluParams::new(0.0).is_err());
        assert!(EluParams::new(-1.0).is_err());
        assert!(EluParams::new(f64::NAN).is_err());
        assert_eq!(EluParams::default().alpha(), 1.0);
    }

    #[test]
    fn relu_values_and_subgradient() {
        let x = Tensor4::from_vec([1, 1, 1, 3], vec![-5.0f64, 0.0, 5.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 5.0]);
        let g = Tensor4::full([1, 1, 1, 3], 1.0).unwrap();
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn elu_pulls_gaussian_mean_closer_to_zero_than_relu() {
        let x = Tensor4::<f64>::randn([1_000_000, 1, 1, 1], 0.0, 1.0, &mut Rng::new(17)).unwrap();
        let n = x.len() as f64;
        let elu_mean = elu_forward(&x, 1.0).sum() / n;
        let relu_mean = relu_forward(&x).sum() / n;
        assert!(elu_mean.abs() < relu_mean.abs(), "elu {elu_mean} relu {relu_mean}");
    }

    proptest! {
        #[test]
        fn relu_equals_elu_on_nonnegatives(v in 0.0f64..1e6) {
            prop_assert_eq!(v.max(0.0), elu(v, 1.0));
        }

        #[test]
        fn elu_is_monotone(a in -50.0f64..50.0, b in -50.0f64..50.0, alpha in 0.01f64..5.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(elu(lo, alpha) <= elu(hi, alpha));
        }

        #[test]
        fn elu_is_continuous_at_zero(eps in 1e-12f64..1e-6) {
            prop_assert!((elu(eps, 1.0) - elu(-eps, 1.0)).abs() <= 2.0 * eps + 1e-15);
        }
    }
}
