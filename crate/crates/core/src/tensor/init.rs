use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;
use crate::scalar::Scalar;

/// Normal(0, std) samples, redrawn until they fall within two standard
/// deviations.
pub fn truncated_normal<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    std: f64,
    rng: &mut R,
) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let normal = Normal::new(0.0, std).expect("std is finite and positive");
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break T::from_f64_lossy(v);
            }
        })
        .collect();
    Tensor::new(shape, data).expect("extents are positive")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bounded_and_seeded() {
        let a: Tensor<f64> = truncated_normal(&[50, 40], 0.02, &mut ChaCha8Rng::seed_from_u64(1));
        let b: Tensor<f64> = truncated_normal(&[50, 40], 0.02, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.abs() <= 0.04));
        let mean = a.data().iter().sum::<f64>() / 2000.0;
        assert!(mean.abs() < 0.003);
    }
}
