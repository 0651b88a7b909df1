//! Clustering with a GAN whose latent prior is a learnable Gaussian mixture.
//!
//! The generator maps `z ~ N(mu_y, sigma_y^2)` to data space and is trained
//! adversarially; an encoder maps generated samples back to a diagonal
//! Gaussian over `z`; cluster membership of a latent point is its posterior
//! under the mixture. [`trainer`] runs the full alternating update loop,
//! [`metrics`] scores the result and [`verify`] checks the KL identities the
//! objective is built on, exactly, on finite supports.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod prior;
pub mod rng;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
