//! Tri-attention: attention over (query, key, context) triples.

pub mod bi;
pub mod data;
pub mod error;
pub mod grad;
pub mod harness;
pub mod init;
pub mod model;
pub mod tensor;
pub mod tri;

pub use error::{Error, Result};
