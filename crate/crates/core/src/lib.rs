//! Polyphone disambiguation for grapheme-to-phoneme conversion.
//!
//! A small transformer encoder is pre-trained on raw character sequences with
//! masked-character and next-sentence objectives, then frozen and used as a
//! feature extractor for per-character classifier heads. Everything here is
//! `no_std` + `alloc`; file formats and the command line live in the `g2p`
//! crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod baseline;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod heads;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pca;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use optim::{AdamConfig, AdamState, LrSchedule};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
