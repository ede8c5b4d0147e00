//! Syntactic specialization analysis over pooled transformer activations.

pub mod behavior;
pub mod dynamics;
pub mod error;
pub mod exec;
pub mod fmt;
pub mod manifest;
pub mod neurons;
pub mod rng;
pub mod ssi;
pub mod stats;
pub mod store;
pub mod synth;

pub use error::{Error, Result};
pub use exec::Backend;
