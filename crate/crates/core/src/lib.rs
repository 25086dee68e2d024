//! End-to-end transformer model for spoken language understanding.
//!
//! The crate turns a mono waveform into stacked log-mel features, encodes
//! them with a multi-head self-attention encoder and predicts the
//! domain / intent / slot label vector of the utterance, either as a single
//! class over every label combination or token by token with a causal
//! decoder.
//!
//! Everything here is pure computation and builds without `std`; file
//! formats and the command-line front end live in the companion `slu`
//! crate. Enabling the `parallel` feature lets training and evaluation fan
//! out over utterances with rayon; reductions stay in a fixed order so
//! results do not depend on the thread count.
#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod attention;
pub mod data;
pub mod decoding;
pub mod error;
pub mod eval;
mod exec;
pub mod features;
pub(crate) mod math;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
pub use numerics::tensor::Tensor;
