//! Seeded random streams. Every stream in a run is derived from one master
//! seed plus a fixed purpose tag, so components never share draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const STREAM_BACKBONE_INIT: u64 = 1;
pub const STREAM_RELATION_INIT: u64 = 2; // + layer index
pub const STREAM_TRAIN_EPISODES: u64 = 16;
pub const STREAM_VAL_EPISODES: u64 = 17;
pub const STREAM_EVAL_EPISODES: u64 = 18;

pub fn stream(master_seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(purpose);
    rng
}

/// Exact position of a ChaCha stream, enough to resume it bit-for-bit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}
