//! Minibatch SGD with momentum, step learning-rate schedule, augmentation
//! and dataset splitting.

pub mod augment;
pub mod data;
pub mod optim;
mod run;
pub mod schedule;

pub use augment::{AugmentConfig, Pipeline};
pub use data::{split_dataset, ChannelStats, Dataset};
pub use optim::{sgd_step, Gradients, OptimizerState};
pub use run::{epoch_len, eval_batch, evaluate, predict_dataset, train, EpochMetrics, TrainConfig};
pub use schedule::{Budget, Schedule};
