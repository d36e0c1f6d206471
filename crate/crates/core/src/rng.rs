//! Keyed random streams.
//!
//! Every stochastic draw in the simulator comes from a stream addressed by a
//! tuple of integers (base seed, purpose, worker, round, ...). Two streams
//! with the same key produce the same draws no matter which thread asks for
//! them or in which order, so runs are replayable and parallel execution
//! cannot change results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The concrete generator handed out by [`Seed::stream`].
pub type Stream = ChaCha8Rng;

/// What a stream is used for. Part of every key so that, for example, the
/// minibatch draws of worker 0 in round 3 never alias its quantization draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Data = 1,
    Minibatch = 2,
    RingQuantize = 3,
    GossipQuantize = 4,
    Probe = 5,
    Verify = 6,
    Arm = 7,
}

/// A base seed from which named sub-streams are derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Seed(pub u64);

impl Seed {
    /// Derive a child seed, e.g. one per experiment arm.
    pub fn child(self, purpose: Purpose, index: u64) -> Seed {
        Seed(mix(&[self.0, purpose as u64, index]))
    }

    /// A generator keyed by `(self, purpose, path...)`.
    pub fn stream(self, purpose: Purpose, path: &[u64]) -> Stream {
        let mut state = splitmix(self.0 ^ 0x5151_5eed_0000_0000);
        state = splitmix(state ^ purpose as u64);
        for &p in path {
            state = splitmix(state ^ p);
        }
        let mut seed = [0u8; 32];
        for chunk in seed.chunks_mut(8) {
            state = splitmix(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mix(words: &[u64]) -> u64 {
    words.iter().fold(0x2545_F491_4F6C_DD1D, |acc, &w| splitmix(acc ^ w))
}
