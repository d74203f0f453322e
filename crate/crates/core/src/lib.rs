//! Meta-learned learning-rate multipliers for neural network training.
//!
//! A small MLP is trained with one learnable learning-rate multiplier per
//! training instance (or per class) and an optional learnable weight-decay
//! coefficient. Each step rolls the model forward one SGD step on a train
//! batch, measures the loss on a clean meta batch at the rolled-out
//! parameters and moves every multiplier against its exact one-step
//! meta-gradient.

pub mod analysis;
pub mod cli;
pub mod data_params;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod losses;
pub mod meta;
pub mod nn;
pub mod optim;

pub use data_params::{DataParamState, WeightMode};
pub use error::{Error, Result};
pub use nn::{Activation, Batch, Matrix, ParamVector};
