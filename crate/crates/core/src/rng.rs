//! Named, seedable random streams.
//!
//! Every stochastic component draws from its own ChaCha8 stream whose key is
//! derived from `(seed, name, index)`. ChaCha is counter based, so a stream is
//! fully determined by its key and streams never overlap.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub const SPLIT: &str = "split";
pub const BLOBS: &str = "blobs";
pub const INIT_ENCODER: &str = "init.encoder";
pub const INIT_CONFIDENCE: &str = "init.confidence";
pub const INIT_HEAD: &str = "init.head";
pub const EPISODES: &str = "episodes";
pub const EPSILON: &str = "epsilon";
pub const DROPOUT: &str = "dropout";
pub const SHUFFLE: &str = "shuffle";
pub const EVAL_EPSILON: &str = "eval.epsilon";

/// Names of every stream used by a training run, in the order they are logged.
pub const ALL_STREAMS: &[&str] = &[
    SPLIT,
    BLOBS,
    INIT_ENCODER,
    INIT_CONFIDENCE,
    INIT_HEAD,
    EPISODES,
    EPSILON,
    DROPOUT,
    SHUFFLE,
    EVAL_EPSILON,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngStreams {
    seed: u64,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, name: &str) -> StreamRng {
        self.substream(name, 0)
    }

    /// Independent stream for item `index` of a named family, e.g. one per
    /// evaluated sample.
    pub fn substream(&self, name: &str, index: u64) -> StreamRng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update(index.to_le_bytes());
        let key: [u8; 32] = h.finalize().into();
        ChaCha8Rng::from_seed(key)
    }

    pub fn log_streams(&self) {
        for name in ALL_STREAMS {
            log::debug!("rng stream `{name}` keyed from seed {}", self.seed);
        }
    }
}
