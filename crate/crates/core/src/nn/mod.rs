//! Trainable convolutional denoiser: tensors, layers, the U-Net, Adam,
//! the training loop, and checkpoint I/O.

pub mod adam;
pub mod checkpoint;
pub mod layers;
pub mod tensor;
pub mod train;
pub mod unet;

pub use adam::AdamState;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use train::{eval_loss, train_denoiser, Normalization, TrainConfig, TrainState};
pub use unet::{DenoiserNet, NetConfig};
