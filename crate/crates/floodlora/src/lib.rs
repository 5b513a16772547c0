//! LoRA fine-tuning of a ViT-style encoder-decoder for binary flood
//! segmentation on pre/post dual-polarization SAR raster pairs.
//!
//! The crate is self-contained: a dense-tensor autograd tape, low-rank
//! adaptation of frozen linear maps, the segmentation model, the combined
//! BCE+Dice objective with its metric suite, the training recipe (Adam,
//! plateau scheduler, early stopping, masked-autoencoder pretraining), and
//! a synthetic pre/post flood-scene generator with an on-disk raster
//! format.

pub mod autograd;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod wire;

pub use autograd::{NodeId, Tape};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use rng::Rng;
pub use tensor::Tensor;
