#![no_std]
//! Curriculum training for dialog state tracking: difficulty scoring,
//! staged scheduling, preview pretraining, hard-example review and a
//! reference tracker. Allocation only; no IO.

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod codec;
pub mod corpus;
pub mod difficulty;
pub mod encoder;
pub mod error;
pub mod model;
pub mod nn;
pub mod preview;
pub mod refmodel;
pub mod review;
pub mod rng;
pub mod scheduler;
pub mod schema;
pub mod synth;
pub mod text;

pub use error::{Error, Result};
