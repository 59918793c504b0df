//! Identity-encoder bias laboratory.
//!
//! Generates a synthetic face universe with known identity/attribute factors,
//! builds blended pseudo-positive training samples, trains a small margin-loss
//! embedding encoder with manually derived gradients, and measures how much
//! the encoder's similarity judgments depend on attributes.

pub mod analysis;
pub mod blend;
pub mod color;
pub mod error;
pub mod gradsuite;
pub mod image;
pub mod losses;
pub mod margin;
pub mod pretrain;
pub mod net;
pub mod num;
pub mod seeding;
pub mod shard;
pub mod synth;

pub use error::{Error, Result};
