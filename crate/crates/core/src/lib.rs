//! One-step diffusion distillation for image super-resolution at desk scale.
//!
//! The crate is `no_std` with `alloc`; file formats and the command line live
//! in the companion `sr-distill` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod dasm;
pub mod degradation;
pub mod error;
pub mod image;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod real;
pub mod rng;
pub mod scheduler;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
