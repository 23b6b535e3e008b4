//! Federated meta-learning simulator.
//!
//! Agents each own one task. They train a local model offline, then walk
//! backward from it with projected stochastic gradient ascent while a
//! parameter server keeps pulling them toward their average; the average
//! after the last backward round is the meta-model. An iMAML baseline and a
//! communication/computation cost ledger make the two approaches comparable.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backward;
pub mod config;
pub mod cost;
pub mod data;
pub mod eval;
pub mod experiment;
pub mod imaml;
pub mod nn;
pub mod plot;
pub mod projection;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use nn::{Batch, Head, MlpSpec, Model, ParamVector};

/// Independent random stream derived from a master seed.
///
/// Every consumer of randomness (an agent, a trial, a round) gets its own
/// stream id, so results depend only on `(master, stream)` and never on the
/// order in which work is scheduled.
pub fn stream_rng(master: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng
}

/// Packs a purpose tag and two indices into a stream id.
pub fn stream_id(tag: u16, major: u32, minor: u16) -> u64 {
    (u64::from(tag) << 48) | (u64::from(major) << 16) | u64::from(minor)
}
