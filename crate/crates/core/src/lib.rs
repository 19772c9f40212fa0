//! Federated learning with personalized self-attention.
//!
//! A server-side hypernetwork generates each client's attention projections
//! from a learned client embedding, while every other transformer parameter
//! is averaged across clients. The crate also carries the usual baselines,
//! non-IID partitioners, and attention-rollout analysis.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod federation;
pub mod hypernet;
pub mod model;
pub mod seed;
pub mod tensor;

pub use autodiff::{grad_check, sgd_step, GradCheck, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{GradMap, ParamSet, Tensor};
pub use data::{LabeledDataset, PartitionManifest, PartitionScheme};
pub use federation::{Federation, FederationConfig, RoundReport, StrategyName, StrategySpec};
pub use hypernet::{HyperNet, HyperNetConfig};
pub use model::{ModelConfig, ParamPartition, Transformer};
