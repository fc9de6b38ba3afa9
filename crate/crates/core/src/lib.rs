//! Structured decoding over discrete token grids: a fully-connected random
//! field over grid locations with learned spatial and label compatibility
//! matrices, parallel mean-field inference as a differentiable layer, a
//! two-stage training recipe, a progressive parallel decoder, an exact
//! brute-force oracle, and a speed/quality benchmark harness.

pub mod bench;
pub mod datagen;
pub mod error;
pub mod mrf;
pub mod oracle;
pub mod teacher;
pub mod tensor_file;
pub mod train;
pub mod types;
pub mod verify;

pub use error::{Error, Result};
