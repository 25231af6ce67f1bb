//! Convolutional networks trained from scratch on the CPU for binary
//! preference prediction, with transfer learning by layer freezing.
//!
//! Tensors are row-major `[N, C, H, W]`. Training runs in `f32`; every layer
//! is generic over [`tensor::Scalar`] so gradient checks can run in `f64`.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod network;
pub mod optim;
pub mod tensor;
pub mod transfer;

pub use checkpoint::{load_checkpoint, save_checkpoint, write_atomic};
pub use data::Dataset;
pub use error::{Error, Result};
pub use model::{
    build_preset, Checkpoint, FreezeMask, InitScheme, ModelSpec, Preset, PresetOptions,
};
pub use optim::{evaluate, train, CurveLog, TrainConfig, TrainOutcome};
pub use tensor::Tensor;
pub use transfer::{estimate_label_noise, extract_features, fine_tune, train_logreg};
