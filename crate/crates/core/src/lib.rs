//! Ladder networks at desk scale: a denoising autoencoder with lateral
//! shortcut connections, per-layer reconstruction costs, and a decorrelation
//! penalty on the clean activations, together with the synthetic
//! source-separation experiments built on top of it.
//!
//! The crate is organized by concern:
//!
//! * [`linalg`]: dense matrices, symmetric eigendecomposition, SPD matrix
//!   functions, covariance and PCA whitening.
//! * [`data`]: seeded synthetic datasets (scalar source families, the linear
//!   ICA mixture, the variance-modulated subspace model) and corruption.
//! * [`model`]: the ladder spec, parameter store, forward passes and the
//!   scalar denoiser.
//! * [`cost`]: the composite cost, its exact gradient, and the beta
//!   controller.
//! * [`optim`]: batch gradient descent with momentum, trace recording and a
//!   finite-difference gradient checker.
//! * [`metrics`]: loading matrices, subspace leakage, block scores and gate
//!   response curves.

pub mod cost;
pub mod csvio;
pub mod data;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod optim;

pub use error::{Error, Result};
