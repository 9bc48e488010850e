//! Two-stage layout diffusion: structural layout generation for primary
//! furniture, contextual layout generation for the small objects that depend
//! on it, and the tooling to train, sample and evaluate both.

pub mod checkpoint;
pub mod conditions;
pub mod config;
pub mod error;
pub mod eval;
pub mod format;
pub mod model;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod sample;
pub mod selftest;
pub mod train;

pub use error::{Error, Result};

/// Seed of the named substream `name` of a global seed.
pub fn substream(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
