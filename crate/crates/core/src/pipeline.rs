//! Datasets, training, checkpoints, sampling from runs and evaluation.

pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod optim;
pub mod pgm;
pub mod sampling;
pub mod train;

pub use checkpoint::{expert_dir, load_checkpoint, load_denoiser, save_checkpoint, CheckpointManifest, ExpertTag};
pub use data::{load_image_folder, synthetic_powerlaw, Dataset, DatasetSpec, Provenance};
pub use eval::{evaluate, Metrics};
pub use optim::{AdamW, AdamWConfig};
pub use sampling::{load_expert, sample_run, write_samples};
pub use train::{
    expert_seed, train_all, train_expert, train_single, LossRecord, RunManifest, RunOutcome, TrainOptions,
    TrainOutcome, TrainState,
};

#[cfg(test)]
mod tests;
