//! Segment-recurrent sequence models with astromorphic linear attention.
//!
//! The crate bundles a neuron-astrocyte ODE simulator (used to derive the
//! per-segment memory retention schedule), a small reverse-mode autodiff
//! tape, the attention block and recurrent model, and a memory-replay
//! trainer whose gradients match full backpropagation through time.

pub mod amrb;
pub mod attention;
pub mod autodiff;
pub mod error;
pub mod harness;
pub mod matrix;
pub mod model;
pub mod neuroglia;
pub mod optim;
pub mod retention;
pub mod rng;

pub use error::{Error, Result};
pub use matrix::Matrix;
