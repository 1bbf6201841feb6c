//! Few-shot class-incremental semantic segmentation with retrieval-based
//! pseudo-labeling.

pub mod cli;
pub mod datamodel;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod network;
pub mod pseudolabel;
pub mod retrieval;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
