//! CPU-only deep-learning kernel and a complete DCGAN workbench built on it.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`] and [`tape`] form a small reverse-mode autodiff engine over
//!   dense row-major tensors, generic over [`scalar::Scalar`] so every kernel
//!   runs in f32 for training and f64 for gradient verification.
//! * [`nn`] supplies the layer kernels: strided and fractionally-strided
//!   convolutions, batch normalization, rectifiers, dropout, pooling, and the
//!   binary cross-entropy loss.
//! * [`models`] assembles generator/discriminator pairs from a fixed
//!   architecture template and enforces the DCGAN stability guidelines.
//! * [`optim`] and [`train`] implement Adam and the alternating GAN update
//!   with deterministic, resumable runs.
//! * [`latent`], [`analysis`], [`dedup`], and [`nnc`] cover the downstream
//!   experiments: latent-space algebra, guided backpropagation and feature
//!   probes, semantic-hash deduplication, and conditional nearest-neighbor
//!   evaluation.
//! * [`data`] handles dataset ingestion, PNG figure grids, checkpoints, and
//!   run directories.

pub mod analysis;
pub mod checks;
pub mod data;
pub mod dedup;
pub mod error;
pub mod latent;
pub mod models;
pub mod nn;
pub mod nnc;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
