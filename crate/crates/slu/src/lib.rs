//! File formats, data preparation and run orchestration around
//! [`slu_core`]. The `slu` binary is a thin command-line layer over
//! [`pipeline`].

pub mod audio;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod report;
pub mod store;

pub use error::{Error, Result};
