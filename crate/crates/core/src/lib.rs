//! Knowledge-factorization toolkit.
//!
//! Decomposes a pretrained multi-task teacher network into a shared
//! common-knowledge network (CKN) plus per-task task-specific networks
//! (TSNs) by jointly optimizing a structural-factorization loss and an
//! InfoMax-Bottleneck objective, and verifies the underlying
//! mutual-information bounds against exact oracles.
//!
//! Modules follow the pipeline: [`synthdata`] generates latent-factor image
//! datasets, [`models`] holds the differentiable components, [`losses`] the
//! training objectives, [`mi`] the exact mutual-information oracles,
//! [`trainer`] the training loops, [`assembly`] the plug-and-play model hub,
//! and [`metrics`] the disentanglement and representation-similarity scores.
//!
//! All information-theoretic quantities are in nats; all arithmetic is f64.
//! With the default `parallel` feature, data-parallel inner loops run on
//! rayon; disabling it falls back to identical sequential code.

pub mod assembly;
pub mod checkpoint;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod mi;
pub mod models;
pub mod nn;
pub mod synthdata;
pub mod trainer;
pub mod verify;

pub use error::{KfError, Result};
