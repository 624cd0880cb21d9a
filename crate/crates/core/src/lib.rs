//! Meta-learned matrix factorization for imputing missing entries of small
//! rating matrices.
//!
//! A neural network built from exchangeable matrix layers reads a partially
//! observed matrix and emits the means of Gaussian priors over its row and
//! column factors. The factors are then adapted by a fixed number of closed-form
//! gradient steps on the MAP objective, and the whole pipeline is trained
//! end-to-end across many matrices by back-propagating the held-out error
//! through those steps.
//!
//! This crate is `no_std` and only needs `alloc`. File formats, checkpoints and
//! the command-line front end live in the companion `mmf` crate.

#![no_std]

extern crate alloc;

pub mod autodiff;
pub mod baselines;
pub mod episodes;
mod error;
pub mod gradcheck;
pub mod imputer;
pub mod layers;
pub mod metatrain;
pub mod rng;
pub mod synthetic;
pub mod tensor;

pub use autodiff::{ReduceAxis, Tape, Var};
pub use error::{Error, Result};
pub use imputer::{AdaptConfig, ModelConfig, ModelParams};
pub use tensor::Tensor;
