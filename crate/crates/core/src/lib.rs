//! Two-stage generative inverse design of coax-fed rectangular patch
//! antennas: an analytic cavity oracle, a β-VAE over S11 curves, latent
//! search toward idealized targets, an adversarially disentangled
//! conditional VAE for designs, scoring and test-time search.

// `!(x > 0.0)` is used deliberately so that NaN fails positivity checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dataset;
pub mod designcvae;
pub mod emodel;
pub mod error;
pub mod hull;
pub mod nets;
pub mod pipeline;
pub mod respsearch;
pub mod respvae;
pub mod scoring;
pub mod train;
pub mod tto;

pub use error::{Error, Result};
