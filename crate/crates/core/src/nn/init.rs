//! Parameter initialization.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Draws from `N(0, std²)`.
pub fn normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut Rng) -> Result<Tensor<T>> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(rng.normal(0.0, std))).collect();
    Tensor::from_vec(data, shape)
}

/// He initialization: `N(0, 2/fan_in)`.
pub fn he_normal<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Result<Tensor<T>> {
    if fan_in == 0 {
        return Err(Error::Config("fan_in must be positive".into()));
    }
    normal(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn he_variance_is_two_over_fan_in() {
        let mut rng = Rng::new(11);
        let fan_in = 36;
        let t: Tensor<f64> = he_normal(&[100_000], fan_in, &mut rng).unwrap();
        let n = t.numel() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let want = 2.0 / fan_in as f64;
        assert!((var - want).abs() / want < 0.05, "{var} vs {want}");
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a: Tensor<f32> = he_normal(&[64], 9, &mut Rng::new(3)).unwrap();
        let b: Tensor<f32> = he_normal(&[64], 9, &mut Rng::new(3)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn zero_fan_in_rejected() {
        assert!(he_normal::<f32>(&[4], 0, &mut Rng::new(0)).is_err());
    }
}
