//! Parameter optimization for finite-size symmetric MDI-QKD.
//!
//! The crate evaluates the secret key rate for a choice of intensities and
//! send probabilities, searches for the optimal choice with coordinate
//! descent, learns that search with a small neural network and compiles the
//! network into a sharded look-up table for devices that cannot afford either.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod dataset;
pub mod keyrate;
pub mod lut;
pub mod mlp;
pub mod optimizer;

pub use keyrate::{DeviceConstants, ExperimentParams, ProtocolParams};
