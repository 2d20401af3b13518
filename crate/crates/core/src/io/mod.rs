//! Cloud files, checkpoints, run configuration and the pipeline commands.

mod checkpoint;
mod cloud;
mod commands;
mod config;


pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainingSnapshot, FORMAT_VERSION};
pub use cloud::{read_cloud, write_cloud};
pub use commands::{cmd_eval, cmd_gen, cmd_register, cmd_train, evaluate_pair, read_pairs, EvalOutput, PairEval, PairRecord, RegisterOutput, StoredPair};
pub use config::{DatasetConfig, OutputConfig, RunConfig};
