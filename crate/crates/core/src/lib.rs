//! Federated-learning simulator with loss-decrease-driven device selection
//! and aggregation.

pub mod aggregation;
pub mod bounds;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod local_solver;
pub mod models;
pub mod numerics;
pub mod selection;

pub use error::{FedError, Result};
pub use numerics::ParamVector;
pub use config::{ExperimentConfig, Strategy};
pub use experiment::{run_experiment, run_rounds, RoundRecord, Simulation};
