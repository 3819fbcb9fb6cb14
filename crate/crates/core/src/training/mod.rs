//! Losses, optimisation, the epoch loop and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod loss;
pub mod trainer;

pub use adam::AdamState;
pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use trainer::{EpochStats, Trainer};
