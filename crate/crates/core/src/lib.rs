//! Streaming SVDF keyword spotting with domain-adversarial training.
//!
//! The crate contains a log-mel frontend, an SVDF encoder/decoder network
//! with hand-written reverse-mode gradients, a gradient-reversal adversarial
//! head that discriminates synthetic from real examples, a two-domain toy
//! corpus generator, and FRR-at-fixed-FA/h evaluation.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod model;
pub mod sweep;
pub mod training;

mod real;
pub mod rng;

pub use error::{KwsError, Result};
pub use real::Real;
