//! File formats, configuration and the experiment runner around
//! [`mbil_core`].

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiment;
pub mod jsonl;
pub mod metrics;

pub use error::{Error, Result};
pub use mbil_core as core;
