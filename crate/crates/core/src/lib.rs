//! Dynamic backbone freezing for detector fine-tuning at desk scale.
//!
//! A small reverse-mode autodiff engine drives a backbone/neck/head detector.
//! A freezing scheduler decides per epoch whether the backbone is updated;
//! frozen epochs skip its backward pass, and an exact FLOPs ledger records the
//! saving.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod flops;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod schedule;
pub mod synth;

pub use error::{Error, Result};
