//! Datasets, configuration, training, logging, persistence and sweeps.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod gradsuite;
pub mod model;
pub mod optim;
pub mod runlog;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{Regularizer, RunConfig};
pub use data::{make_dataset, DatasetKind, Standardizer};
pub use model::TrainedModel;
pub use runlog::{LogRow, RunLog};
pub use train::{train, train_with, StepEvent, TrainOutput, Trainer};
