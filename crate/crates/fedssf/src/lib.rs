//! Configuration, persistence, metrics, sweeps and the command line for the
//! federated adversarial SSF simulator in [`fedssf_core`].

pub mod cli;
pub mod config;
pub mod error;
pub mod executor;
pub mod io;
pub mod metrics;
pub mod pipeline;

pub use config::ExperimentConfig;
pub use error::{AppError, AppResult};
