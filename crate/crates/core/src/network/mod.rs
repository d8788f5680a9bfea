//! The assembled network: configuration, model construction and forward
//! pass, loss, Adam, the training loop, and checkpoints.

pub mod checkpoint;
mod config;
mod model;
mod optim;
mod train;

pub use config::{lr_at_epoch, NetworkConfig, RunConfig, TrainConfig};
pub use model::{argmax_rows, build_model, cross_entropy_loss, graph_for, Model};
pub use optim::{Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use train::{train, train_step, EpochStats, StepStats, TrainBlock, Trainer, TrainingReport};

pub use crate::layers::Variant;
