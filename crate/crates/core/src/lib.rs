//! Time-series forecasting with a Transformer encoder and a spectrally
//! capped linear latent propagator.

pub mod autodiff;
pub mod data;
pub mod encoder;
pub mod error;
pub mod forecaster;
pub mod koopman;
pub mod linalg;
pub mod train;

pub use error::{Error, Result};
