//! SDE-RNN imputation of irregularly sampled time series with aleatoric and
//! epistemic uncertainty.

pub mod cli;
pub mod data;
pub mod evaluation;
pub mod error;
pub mod gru;
pub mod moments;
pub mod neural_sde;
pub mod numcore;
pub mod sde_rnn;
pub mod training;

pub use error::{Error, Result};
