//! Diffusion-based probabilistic time-series forecasting with a learnable,
//! spectrally regularized noise schedule and a frequency-guided denoiser.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`autodiff`], [`rng`]: dense f64 tensors, a reverse-mode
//!   tape, and a counter-based deterministic random source.
//! - [`spectral`]: one-sided real DFT, spectral mass/flatness, KL-to-uniform.
//! - [`scheduler`]: the parametric noise schedule, its spectral losses, and a
//!   projected-gradient mode over raw beta vectors.
//! - [`diffusion`]: closed-form forward corruption, x0-parameterized reverse
//!   transitions, ancestral sampling, and Gaussian-KL drift bounds.
//! - [`denoiser`]: instance normalization and the frequency-guided denoiser.
//! - [`training`]: the two-stage training loop, Adam, and windowing.
//! - [`evaluation`]: sample-based CRPS, MAE/MSE, and error histograms.
//! - [`dataio`], [`config`], [`cli`]: dataset ingestion, configuration, and
//!   the command-line surface.

pub mod autodiff;
pub mod error;
pub mod rng;
pub mod tensor;

pub mod spectral;

pub mod scheduler;

pub mod diffusion;

pub mod denoiser;

pub mod training;

pub mod evaluation;

pub mod cli;
pub mod config;
pub mod dataio;

pub use error::{Error, Result};
pub use tensor::Tensor;
