//! Command implementations behind the `unisearch` binary: corpus
//! generation, staged training, evaluation and the ablation sweep.

pub mod commands;
pub mod config;

pub use commands::{ablate, eval, gen_data, train, AblationOutcome, EvalArgs, TrainOutcome};
pub use config::{Recipe, RunConfig};
