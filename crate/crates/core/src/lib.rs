//! Task-aware coupling of a semantic encoder with a recurrent state-space
//! world model.
//!
//! The crate is `no_std` (with `alloc`) and carries everything that is pure
//! computation: a reverse-mode differentiation tape over dense `f64` arrays,
//! the toy locomotion environments, the encoders, the RSSM, task-aware
//! modular fusion, imagination-based behavior learning, the joint objective,
//! and the training/evaluation loops. File formats, configuration parsing and
//! the command line live in the `bitagent` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod behavior;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod jointopt;
pub mod model;
pub mod numcore;
pub mod rng;
pub mod tamf;
pub mod toyworlds;
pub mod train;
pub mod worldmodel;

pub use error::{Error, Result};
pub use rng::Rng;
