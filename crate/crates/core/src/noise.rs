//! Counter-based Gaussian noise streams.
//!
//! Every draw is addressed by `(seed, replicate, stream, t)`, so the
//! algorithm run and the oracle run can consume the same system noise
//! without replaying each other.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Each time index owns a disjoint window of 2^24 32-bit words in its stream.
const WORDS_PER_STEP_LOG2: u32 = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StreamTag {
    /// System noise `eps_t`.
    Eps = 0,
    /// Exploration noise `eta_t`.
    Eta = 1,
    /// System noise for an oracle run that is deliberately not coupled.
    EpsIndependent = 2,
}

#[derive(Debug, Clone)]
pub struct NoiseStreams {
    seed: u64,
    replicate_id: u64,
    rng: ChaCha8Rng,
}

impl NoiseStreams {
    pub fn new(seed: u64, replicate_id: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&replicate_id.to_le_bytes());
        key[16..].copy_from_slice(b"adaptive-lqr/v1\0");
        Self {
            seed,
            replicate_id,
            rng: ChaCha8Rng::from_seed(key),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn replicate_id(&self) -> u64 {
        self.replicate_id
    }

    /// `len` i.i.d. standard normal draws for time `t` of `stream`.
    pub fn standard_normal(&mut self, stream: StreamTag, t: usize, len: usize) -> DVector<f64> {
        self.rng.set_stream(stream as u64);
        self.rng.set_word_pos((t as u128) << WORDS_PER_STEP_LOG2);
        DVector::from_fn(len, |_, _| self.rng.sample(StandardNormal))
    }

    /// Unit-variance system noise at `t`; the caller scales by `sigma_eps`.
    pub fn eps(&mut self, t: usize, n: usize) -> DVector<f64> {
        self.standard_normal(StreamTag::Eps, t, n)
    }

    /// Unit-variance exploration noise at `t`; the caller scales by the schedule.
    pub fn eta(&mut self, t: usize, d: usize) -> DVector<f64> {
        self.standard_normal(StreamTag::Eta, t, d)
    }
}
