//! Differentially private release of process-mining trace variants.
//!
//! Two generative engines learn the variant distribution of an event log
//! under DP-SGD: an autoencoder + GAN pipeline ([`travag`]) and a denoising
//! diffusion model ([`ddpm`]). Privacy spent during training is tracked
//! with a Renyi-DP accountant ([`accountant`]); anonymized logs are scored
//! against the original with the measures in [`metrics`].

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod ddpm;
pub mod dpsgd;
pub mod encoding;
pub mod error;
pub mod log;
pub mod metrics;
pub mod nn;
pub mod release;
pub mod synth;
pub mod travag;

pub use error::{Error, Result};
