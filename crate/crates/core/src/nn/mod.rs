//! Layers, the four sensor-model families, the GC-MS encoder and training.

pub mod layers;
mod model;
mod optim;
mod train;

pub use model::{BatchMask, Family, GcmsEncoder, GcmsEncoderConfig, Model, ModelConfig, Pooling};
pub use optim::{Adam, AdamConfig};
pub use train::{
    gather, predict_embeddings, predict_logits, predict_mixture, softmax_rows, train, LossTrace,
    Objective, Targets, TraceRow, TrainConfig,
};
