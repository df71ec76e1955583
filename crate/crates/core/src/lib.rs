//! Online forecasting of delayed outcomes through less-delayed proxy
//! signals: tabular and neural forecasters, a synthetic task generator,
//! and an evaluation harness that replays the delayed-feedback protocol.

pub mod cli;
pub mod domain;
pub mod environment;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod neural;
pub mod tabular;

pub use domain::{log_loss, ProbVector, ProblemSpaces, RoundEvent, StochasticMatrix};
pub use error::{Error, Result};
pub use estimators::{SmoothedCategoricalEstimator, Smoothing};
pub use tabular::{DirectForecaster, FactoredForecaster, Forecaster, OracleForecaster};
