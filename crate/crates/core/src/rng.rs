//! Counter-based random substreams.
//!
//! A run is keyed by one master seed. Every draw is addressed by
//! `(agent, t, purpose)`: the ChaCha8 key is expanded from the seed, the
//! 64-bit stream id is `agent * 4 + purpose`, and the word position is
//! `t * WORDS_PER_STEP`. Draws therefore do not depend on the order in which
//! agents or steps are evaluated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 32-bit words reserved for each `(agent, t, purpose)` cell.
pub const WORDS_PER_STEP: u128 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Signal = 0,
    NeighborChoice = 1,
    Nature = 2,
}

#[derive(Debug, Clone)]
pub struct RngStreams {
    base: ChaCha8Rng,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self { base: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn stream(&self, agent: usize, t: usize, purpose: Purpose) -> ChaCha8Rng {
        let mut rng = self.base.clone();
        rng.set_stream(agent as u64 * 4 + purpose as u64);
        rng.set_word_pos(t as u128 * WORDS_PER_STEP);
        rng
    }

    /// Stream used to draw the state of the world when it is not pinned.
    pub fn nature(&self) -> ChaCha8Rng {
        let mut rng = self.base.clone();
        rng.set_stream(u64::MAX);
        rng
    }
}

/// Seed of the `k`-th Monte Carlo replicate.
pub fn replicate_seed(master: u64, k: u64) -> u64 {
    master ^ k
}
