//! FlowVocoder: a mixture-of-logistic-CDF autoregressive flow vocoder.

pub mod conditioning;
pub mod config;
pub mod error;
pub mod flowstack;
pub mod metrics;
pub mod mixlogcdf;
pub mod numcore;
pub mod selfcheck;
pub mod synthesis;
pub mod training;

pub use config::Config;
pub use error::{Error, Result};
