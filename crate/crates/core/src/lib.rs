//! Multi-label class-incremental learning with class-level embeddings.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`numerics`]), the
//! class-token cross-attention network ([`cinet`]), the training losses
//! ([`losses`]), data formats and a synthetic stream generator ([`dataio`]),
//! the session protocol ([`protocol`]), the training loop ([`trainer`]),
//! evaluation ([`metrics`]) and the command-line front end ([`cli`]).

pub mod cinet;
pub mod cli;
pub mod dataio;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod protocol;
pub mod trainer;

pub use error::{Error, Result};
