//! Markov balance-based imitation learning, allocation-only core.
//!
//! Everything here is pure computation: a reverse-mode tape over dense
//! `f64` tensors, feedforward networks and Adam, conditional normalizing
//! flows, policies, the built-in environments with their analytic oracles,
//! and the training loops. File formats, configuration and the CLI live in
//! the `mbil` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod adam;
pub mod bc;
pub mod data;
pub mod envs;
pub mod error;
pub mod eval;
pub mod flow;
pub mod gradcheck;
pub mod math;
pub mod mbil;
pub mod nn;
pub mod policy;
pub mod rng;
pub mod tabular;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
