//! Forecasting laboratory for multichannel electrophysiology-like time series.
//!
//! The crate covers the whole loop: synthesising or loading recordings,
//! tokenising them (mu-law per channel, or covariance-bucketed residual
//! vector quantisation), training autoregressive forecasters (linear AR,
//! two Wavenet variants, a channel-embedded GPT2 and a flattened GPT2),
//! recursively generating new data with top-p sampling, and comparing the
//! generated data with the reference through spectra, covariance, evoked
//! responses, HMM state dynamics and decoding accuracy.

pub mod decoding;
pub mod error;
pub mod evaluation;
pub mod generation;
pub mod models;
pub mod nn;
pub mod signal;
pub mod tokenize;
pub mod training;

pub use error::{Error, Result};
