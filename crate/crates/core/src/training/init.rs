use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Half-width of the He-uniform interval, `sqrt(6 / fan_in)`.
pub fn he_uniform_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// I.i.d. samples from `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub fn he_uniform_init<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Result<Tensor<T>> {
    if fan_in == 0 {
        return Err(Error::config("fan-in must be >= 1"));
    }
    let bound = he_uniform_bound(fan_in);
    // Sampled in f64 so f32 and f64 models built from one seed agree.
    Ok(Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..=bound))))
}
