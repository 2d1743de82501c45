//! Synthetic domain-shift task, training loops and the ablation suites.

pub mod data;
pub mod suites;
pub mod train;

pub use data::{generate_dataset, Corruption, Dataset, DatasetMeta, Domain, Sample, SyntheticTaskConfig};
pub use train::{
    adapted_model, evaluate, evaluate_frozen, loss_and_gradients, pretrain_frozen_backbone, train_adapters, EpochRecord, Evaluation, PretrainConfig,
    PretrainReport, TrainConfig, TrainOutcome, DEFAULT_SEEDS,
};
