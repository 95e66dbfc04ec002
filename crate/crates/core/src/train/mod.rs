//! Optimization: Adam, seeded random streams and the epoch loop.

mod adam;
mod fit;
mod seeds;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use fit::{train, train_with, EpochRecord, TrainConfig, TrainMode, TrainOutcome};
pub use seeds::{SeedStreams, StreamRng, STREAM_NAMES};
