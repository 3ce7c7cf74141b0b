//! Black-box adversarial reprogramming and the stateful query detector that
//! defends against it.
//!
//! * [`data`] synthetic source/target domains, padding and the program mask
//! * [`models`] source classifiers and the score-only [`models::QueryChannel`]
//! * [`reprogram`] the program, label mapping, focal loss and white-box attack
//! * [`zoattack`] zeroth-order gradient estimation and black-box attacks
//! * [`encoder`] siamese similarity encoder trained with a contrastive loss
//! * [`detector`] per-account k-NN query detector and its metrics

pub mod data;
pub mod detector;
pub mod encoder;
pub mod error;
pub mod models;
pub mod reprogram;
pub mod zoattack;

pub use error::{CoreError, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic RNG for one purpose (`stream`) of a run (`seed`).
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// RNG stream ids; one per purpose so that changing how many draws one
/// purpose makes never shifts another.
pub mod streams {
    pub const PROGRAM_INIT: u64 = 0x30;
    pub const SHUFFLE: u64 = 0x31;
    pub const DIRECTIONS: u64 = 0x32;
    pub const ENCODER_INIT: u64 = 0x40;
    pub const ENCODER_SHUFFLE: u64 = 0x41;
    pub const CALIBRATION: u64 = 0x42;
}
