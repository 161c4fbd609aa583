//! Emotion-aware autoregressive token model with dynamic parameter memory
//! (DPM) inference.
//!
//! The library trains a small decoder-only transformer over discrete audio
//! tokens with two objectives (next-token prediction and constrained emotion
//! supervision), then classifies unbounded-length token streams under a fixed
//! context window by encoding each sentence into a temporary low-rank adapter
//! through per-sentence gradient updates.

pub mod corpus;
pub mod error;
pub mod lora;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{DpmError, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Counter-mode seed splitting: one master seed, independent streams.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
