//! Seeded, platform-stable random streams.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A ChaCha8 stream identified by `(seed, stream)`.
///
/// Different stream ids under one seed give independent sequences, which lets
/// data generation, weight init and batch shuffling each draw from their own
/// stream without perturbing each other.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngState { seed, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }
}

/// `n` i.i.d. draws from `N(mean, std²)`.
pub fn gaussian_sample(rng: &mut RngState, mean: f64, std: f64, n: usize) -> Result<Tensor> {
    if !(std >= 0.0) || !std.is_finite() || !mean.is_finite() {
        return Err(Error::Parameter(format!(
            "gaussian_sample needs finite mean and std >= 0, got mean={mean}, std={std}"
        )));
    }
    if n == 0 {
        return Err(Error::Parameter("gaussian_sample needs n >= 1".into()));
    }
    let data = (0..n).map(|_| mean + std * rng.standard_normal()).collect();
    Ok(Tensor::vector(data))
}
