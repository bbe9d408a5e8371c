//! Experiment harness for multi-view contrastive world-model agents:
//! configuration, the collect / train / evaluate loop, metrics, file
//! formats and the command-line front end.

pub mod config;
pub mod error;
pub mod harness;
pub mod io;
pub mod metrics;

pub use mvdream_core as core;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
pub use harness::{
    composite_grad_check, dump_reconstructions, env_demo, restore, run_eval, run_training, EvalSummary,
    TrainSummary, Trainer,
};
