//! Deep kernel accelerated failure time (DKAFT) models.
//!
//! A GRU sequence encoder maps each patient's static and longitudinal
//! features to a latent vector; exact, SVGP or PPGP Gaussian-process heads
//! (or a linear AFT head) turn that vector into a Gaussian predictive
//! distribution over log time-to-event. Right-censored records enter the
//! objectives through the log-normal survival function.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod dml;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gp;
pub mod model;
pub mod stats;

pub use error::{Error, Result};

/// Seedable generator used everywhere randomness enters.
pub type Prng = rand_chacha::ChaCha8Rng;
