//! Losses, metrics, optimisation, data and the training loop.

pub mod augment;
pub mod data;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod trainer;

pub use trainer::{evaluate, train_loop, TrainConfig, TrainOutcome};
