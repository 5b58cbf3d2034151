//! Desk-scale lab for latent-variable models trained by matching a pair of
//! encoder/decoder joint distributions to fixed anchor distributions.
//!
//! The crate provides:
//!
//! - a small reverse-mode autodiff engine over dense f64 tensors
//!   ([`autodiff`]);
//! - diagonal Gaussians, finite mixtures and anchor distributions with
//!   reparameterized sampling ([`dist`]);
//! - MLP conditional Gaussians, prior parameterizations (standard,
//!   learned mixture, posterior-mixture with pseudo-inputs, implicit
//!   decoder marginal) and the model bundle tying them together
//!   ([`model`]);
//! - Monte-Carlo loss estimators for the symmetric and asymmetric
//!   cross-entropy objectives, the VAE baseline, and entropy-regularized
//!   ablations ([`objective`]);
//! - an exact finite-alphabet oracle that verifies the algebraic
//!   identities the objectives are built on ([`discrete`]);
//! - post-hoc evaluation metrics: KSG mutual information, importance
//!   NLL, reconstruction error, k-NN probes, posterior-collapse index
//!   ([`metrics`]);
//! - synthetic dataset generation, PCA projection and dataset I/O
//!   ([`data`]);
//! - Adam, the training loop with warm-up and early stopping, and binary
//!   checkpoints ([`train`]).

pub mod autodiff;
pub mod data;
pub mod discrete;
pub mod dist;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod train;
