//! Linear looped Transformers for in-context linear regression.
//!
//! The crate implements the restricted linear self-attention layer, its looped
//! and per-layer forward passes, Monte-Carlo and closed-form population losses,
//! exact Wishart moments by Wick pairing, gradient-flow and SGD dynamics, and
//! numerical verifiers for the bounds that govern the trained preconditioner.

pub mod acceptance;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod loss;
pub mod matkernel;
pub mod model;
pub mod moments;
pub mod par;
pub mod report;
pub mod tasks;
pub mod theory;

pub use error::{LabError, Result};
pub use par::Exec;
