//! Experiment configuration and the partition → train → eval → rollout →
//! finetune-novel pipeline behind the `fedtp` binary.

pub mod config;
pub mod error;
pub mod run;

pub use config::{parse_config, resolve, DatasetSpec, ExperimentConfig, NovelConfig, Overrides, Preset};
pub use error::{CliError, Result};
pub use run::{
    cmd_eval, cmd_finetune_novel, cmd_partition, cmd_rollout, cmd_train, train_config, trained_config, RunDir,
};
