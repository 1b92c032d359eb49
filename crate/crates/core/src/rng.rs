//! Deterministic randomness.
//!
//! All sampling is backed by ChaCha8, a counter-based generator whose output
//! depends only on (seed, stream, position). Identical seeds produce identical
//! sample streams on every platform. An `RngState` is a value, not a mutable
//! generator: every draw method derives a fresh generator internally, so
//! calling the same method twice with the same state replays the same stream.

use crate::tensor::{Scalar, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Named sub-streams so adding a consumer never perturbs another.
pub mod streams {
    pub const GUMBEL: u64 = 1;
    pub const FIXTURES: u64 = 2;
    pub const GRADCHECK: u64 = 3;
    pub const PARAMS: u64 = 4;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState { seed, stream: 0 }
    }

    pub fn stream(&self, stream: u64) -> Self {
        RngState {
            seed: self.seed,
            stream,
        }
    }

    fn sampler(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }

    /// Uniform values in [-scale, scale]. Drawn in f64 and cast, so the f32
    /// forward path and the f64 replay see the same underlying samples.
    pub fn uniform_vec<S: Scalar>(&self, len: usize, scale: f64) -> Vec<S> {
        let mut rng = self.sampler();
        (0..len)
            .map(|_| S::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * scale))
            .collect()
    }

    pub fn uniform_tensor<S: Scalar>(&self, shape: Shape, scale: f64) -> Tensor<S> {
        Tensor::new(shape, self.uniform_vec(shape.len(), scale)).expect("finite uniform data")
    }

    /// Deterministic choice of `count` distinct indices out of `0..len`,
    /// returned sorted.
    pub fn choose(&self, len: usize, count: usize) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..len).collect();
        idx.shuffle(&mut self.sampler());
        idx.truncate(count.min(len));
        idx.sort_unstable();
        idx
    }

    /// Standard Gumbel samples g = -ln(-ln(u)), u ~ Uniform(0,1), always in
    /// f64 so forward (f32) and replay (f64) share identical noise.
    pub fn gumbel_noise(&self, count: usize) -> Vec<f64> {
        let mut rng = self.sampler();
        (0..count)
            .map(|_| {
                let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
                -(-u.ln()).ln()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream_replays() {
        let a = RngState::new(7).gumbel_noise(16);
        let b = RngState::new(7).gumbel_noise(16);
        assert_eq!(a, b);
        let v1: Vec<f32> = RngState::new(7).uniform_vec(16, 1.0);
        let v2: Vec<f32> = RngState::new(7).uniform_vec(16, 1.0);
        assert_eq!(v1, v2);
    }

    #[test]
    fn different_streams_differ() {
        let a = RngState::new(7).stream(1).gumbel_noise(8);
        let b = RngState::new(7).stream(2).gumbel_noise(8);
        assert_ne!(a, b);
    }

    #[test]
    fn gumbel_noise_is_finite() {
        assert!(RngState::new(0).gumbel_noise(1000).iter().all(|g| g.is_finite()));
    }
}
