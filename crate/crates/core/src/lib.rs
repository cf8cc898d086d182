//! Single-image atmospheric turbulence restoration guided by a
//! Monte-Carlo-dropout uncertainty prior.
//!
//! The pipeline has two learned stages. A prior network is trained to
//! restore degraded images; at inference it is run `S` times with dropout
//! active and the per-pixel variance of those outputs becomes the prior `d`.
//! A restoration network then maps `(y, d)` to the restored image.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod graph;
pub mod image;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod uncertainty;

pub use error::{Error, Result};
