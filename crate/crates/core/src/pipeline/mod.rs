//! Toy Siamese tracker: a three-layer stride-2 backbone, depth-wise or
//! pixel-wise correlation, classification and box heads, a deterministic
//! SGD training loop and frame-by-frame inference.

mod config;
mod model;
mod track;
mod train;

pub use config::{LossFlags, TrainConfig, SEED_ENV, STRIDE};
pub use model::{forward, raster_tensor, Arch, Heads, ModelParams, BACKBONE};
pub use track::{infer, track, windowed, Inference, TrackOptions};
pub use train::{
    draw_pair, image_loss, image_loss_frozen, run_log_csv, train, train_with, ImageLoss, LogRow, TrainOutput,
    RUN_LOG_HEADER,
};
