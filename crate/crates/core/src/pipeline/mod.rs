//! Data handling around the network: rasters, datasets, tiling,
//! augmentation, synthetic pairs, checkpoints, training and prediction.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod raster;
pub mod synth;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use data::{augment, stitch, tile, Augmentation, SamplePair};
pub use raster::Raster;
pub use synth::synth_dataset;
pub use train::{predict, Prediction, TrainConfig, TrainLog, Trainer};

#[cfg(test)]
mod tests;
