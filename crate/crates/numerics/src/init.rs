use rand_distr::{Distribution, Normal};

use crate::error::{NumericsError, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Xavier-normal matrix of shape `[fan_in, fan_out]`, drawn from
/// N(0, 2 / (fan_in + fan_out)).
pub fn xavier_init(fan_in: usize, fan_out: usize, seed: u64) -> Result<Tensor> {
    let mut r = rng::rng(seed);
    xavier_normal(&[fan_in, fan_out], fan_in, fan_out, &mut r)
}

/// Xavier-normal tensor of arbitrary shape with explicit fans (conv kernels
/// use `in_ch * k * k` and `out_ch * k * k`).
pub fn xavier_normal(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<Tensor> {
    if fan_in == 0 || fan_out == 0 {
        return Err(NumericsError::pre(
            "xavier_init",
            format!("fan_in={fan_in}, fan_out={fan_out}; both must be >= 1"),
        ));
    }
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_var(t: &Tensor) -> f64 {
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    }

    #[test]
    fn variance_matches_glorot_target() {
        // 10^6 draws for fan (3, 1): target 2 / 4 = 0.5
        let mut r = rng::rng(11);
        let t = xavier_normal(&[1_000_000], 3, 1, &mut r).unwrap();
        let v = sample_var(&t);
        assert!((v - 0.5).abs() / 0.5 < 0.02, "variance {v}");
    }

    #[test]
    fn square_fans_give_inverse_fan_variance() {
        let mut r = rng::rng(3);
        let t = xavier_normal(&[400_000], 8, 8, &mut r).unwrap();
        let v = sample_var(&t);
        assert!((v - 1.0 / 8.0).abs() / (1.0 / 8.0) < 0.02, "variance {v}");
    }

    #[test]
    fn deterministic_given_seed() {
        let a = xavier_init(5, 7, 42).unwrap();
        let b = xavier_init(5, 7, 42).unwrap();
        assert!(a.bit_eq(&b));
        assert_eq!(a.shape(), &[5, 7]);
        assert!(!a.bit_eq(&xavier_init(5, 7, 43).unwrap()));
    }

    #[test]
    fn zero_fan_is_rejected() {
        assert!(matches!(xavier_init(0, 3, 1), Err(NumericsError::Precondition { .. })));
        assert!(matches!(xavier_init(3, 0, 1), Err(NumericsError::Precondition { .. })));
    }
}
