//! Trainable quantized models: configuration, data, QAT, PTQ and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod model;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{Config, LayerKind, LayerSpec, TrainConfig};
pub use data::{gen_synthetic, load_idx, Dataset, Split, SyntheticKind};
pub use model::{build_model, EvalMode, Model};
pub use train::{evaluate, post_training_quantize, predict, train, Metrics, TrainReport};
