//! Confident decoding for data-to-text generation.
//!
//! An encoder-decoder whose decoder carries an explicit attention score and a
//! base language model, combined into a per-token confidence score. Training
//! uses a variational-Bayes confident-sub-sequence objective with Monte Carlo
//! score-function gradients; decoding adds calibration, length penalty and
//! `<null>`-token thresholding.

pub mod cli;
pub mod data;
pub mod decoding;
pub mod metrics;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod training;
