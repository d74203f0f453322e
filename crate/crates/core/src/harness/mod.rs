//! Configuration, the epoch loop and run records.

pub mod config;
pub mod kfold;
pub mod metrics;
pub mod train;
pub mod trajectory;

pub use config::{Formulation, PersonalTrain, RunConfig, SplitMode};
pub use kfold::{kfold_collect, kfold_then_replay, GridScore, KFoldOutcome};
pub use metrics::{mean_std, Aggregate, MetricsRecord};
pub use train::{
    derive_seed, initial_model, no_observer, replay_train, run_training, EpochEvent, Experiment,
    StepSummary, TrainOutcome,
};
pub use trajectory::{EpochSnapshot, TrajectoryLog};
