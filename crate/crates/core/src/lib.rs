//! Dictionary learning and dictionary-regularized low-dose CT reconstruction.
//!
//! The crate is organised bottom-up:
//!
//! - [`operators`]: images, dictionaries, coefficient maps and the two synthesis
//!   operators (convolutional and non-overlapping patch) with their adjoints.
//! - [`sparse`]: soft thresholding, Lipschitz estimation and FISTA sparse coding.
//! - [`tomo`]: parallel/fan-beam Joseph projector, FBP, Poisson data simulation
//!   and the weighted least-squares likelihood.
//! - [`learn`]: stochastic alternating dictionary learning (FISTA + Adam) with the
//!   adaptive sparsity rule and CT-consistent low-frequency removal.
//! - [`recon`]: dictionary-regularized reconstruction (convolutional and overlapping
//!   patch variants) and the Huber baseline.
//! - [`elbo`]: numerical verification of the Laplace-posterior ELBO bound.
//! - [`analytics`]: metrics, phantoms, atom significance and file formats.
//! - [`config`]: flat `key = value` configuration files.

pub mod analytics;
pub mod config;
pub mod elbo;
mod error;
pub mod learn;
pub mod operators;
pub mod recon;
pub mod sparse;
pub mod tomo;

pub use error::{Error, Result};
pub use operators::{CoefficientMaps, DictGradient, Dictionary, ImageGrid, SynthesisMode};
