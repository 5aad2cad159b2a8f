//! Seed-controlled variance-scaling (fan-in) initialization.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Float;

pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Standard normal via Box-Muller, drawn in f64 and narrowed.
    fn normal(&mut self) -> f64 {
        let u1: f64 = self.rng.random_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = self.rng.random_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Tensor with entries ~ N(0, 2 / fan_in).
    pub fn variance_scaled<F: Float>(&mut self, shape: &[usize], fan_in: usize) -> ArrayD<F> {
        let std = (2.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let values: Vec<F> = (0..n)
            .map(|_| F::from_f64(self.normal() * std).unwrap())
            .collect();
        ArrayD::from_shape_vec(IxDyn(shape), values).expect("shape/product mismatch")
    }
}
