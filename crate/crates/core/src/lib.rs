//! Adversarial domain adaptation with a Monte Carlo dropout discriminator.
//!
//! A shared feature extractor is trained against a single discriminator whose
//! hidden units are dropped out independently on every forward pass. Each of
//! the `K` stochastic passes acts as a separate domain classifier, and the
//! reversed gradients from all of them are averaged into the extractor
//! update. The curriculum variant grows `K` over the course of training; the
//! fixed variant keeps it constant.
//!
//! Layout:
//!
//! - [`diffcore`]: dense kernels with hand-written backward passes, losses,
//!   dropout, gradient reversal, SGD and a finite-difference oracle.
//! - [`network`]: extractor, classifier and MC-dropout discriminator, plus
//!   checkpoint I/O.
//! - [`adapt`]: joint objective, schedules and the training loop.
//! - [`data`]: synthetic domain-shift generators, CSV I/O and batching.
//! - [`eval`]: accuracy, proxy-A-distance, Nemenyi critical difference and
//!   the K sweep.

pub mod adapt;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod network;

pub use error::{Error, Result};
