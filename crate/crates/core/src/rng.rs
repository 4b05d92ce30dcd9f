//! Counter-based splittable random streams.
//!
//! Every consumer derives its own stream from the single run seed plus a
//! name and a list of counter words (step, document ordinal, rollout
//! ordinal, ...). Streams derived from distinct keys are independent, so
//! rollouts can be evaluated in parallel and still draw exactly the same
//! samples as a serial run.

use rand::{Error as RandError, RngCore, SeedableRng};

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// splitmix64 output function.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over the stream name, used as the first key word.
fn hash_name(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A splitmix64 generator keyed by (seed, name, counter words).
#[derive(Debug, Clone)]
pub struct StreamRng {
    state: u64,
}

impl StreamRng {
    /// Derives the stream for `(seed, name, words)`.
    pub fn derive(seed: u64, name: &str, words: &[u64]) -> Self {
        let mut key = mix64(seed ^ hash_name(name));
        for &w in words {
            key = mix64(key.wrapping_add(GOLDEN_GAMMA) ^ mix64(w ^ GOLDEN_GAMMA));
        }
        StreamRng { state: key }
    }

    /// Uniform f64 in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl RngCore for StreamRng {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        for chunk in dest.chunks_mut(8) {
            let word = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&word[..chunk.len()]);
        }
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), RandError> {
        self.fill_bytes(dest);
        Ok(())
    }
}

impl SeedableRng for StreamRng {
    type Seed = [u8; 8];

    fn from_seed(seed: Self::Seed) -> Self {
        StreamRng {
            state: mix64(u64::from_le_bytes(seed)),
        }
    }

    fn seed_from_u64(state: u64) -> Self {
        StreamRng {
            state: mix64(state),
        }
    }
}
