//! Seedable, splittable random streams.
//!
//! Every run derives its generators from one `u64` seed. Each consumer gets
//! its own ChaCha8 stream (ChaCha is a counter-mode generator: the 64-bit
//! stream id and block counter are part of the cipher input), so streams
//! never overlap and drawing from one never perturbs another. Output is
//! defined by the ChaCha8 keystream and is identical on every platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use rand_chacha::ChaCha8Rng as StreamRng;

/// Named stream ids.
pub mod streams {
    /// Parameter initialization.
    pub const INIT: u64 = 1;
    /// Training-set generation.
    pub const DATASET: u64 = 2;
    /// Minibatch indices, timesteps, noise and condition dropout.
    pub const BATCH: u64 = 3;
    /// Reference sets, probe batches and projection directions.
    pub const EVAL: u64 = 4;
    /// Initial points of the sampler.
    pub const SAMPLER: u64 = 5;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seed(pub u64);

impl Seed {
    pub fn stream(self, id: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.0);
        rng.set_stream(id);
        rng
    }
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normals(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}
