//! Seeded parameter initializers.

use crate::rng::SplitMix64;

use super::Tensor;

/// Gaussian(mu, sigma) init; sigma must be positive.
pub fn init_gaussian(shape: &[usize], mu: f64, sigma: f64, seed: u64) -> Tensor {
    assert!(sigma > 0.0, "init_gaussian wants sigma > 0, got {sigma}");
    let n: usize = shape.iter().product();
    let mut rng = SplitMix64::new(seed);
    let data = (0..n).map(|_| mu + sigma * rng.next_gaussian()).collect();
    Tensor::new(shape.to_vec(), data).expect("finite by construction").into_param()
}

/// He init: zero-mean Gaussian with variance 2/fan_in, where fan_in is the
/// receptive-field size (everything but the leading output-channel axis).
pub fn init_he(shape: &[usize], seed: u64) -> Tensor {
    let fan_in: usize = if shape.len() > 1 { shape[1..].iter().product() } else { shape[0] };
    let sigma = (2.0 / fan_in as f64).sqrt();
    init_gaussian(shape, 0.0, sigma, seed)
}
