//! Machine-olfaction toolkit: gas-sensor ingestion and preprocessing, a small
//! reverse-mode autodiff engine with four sensor-model families, training
//! objectives, evaluation metrics and offline analysis.

pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gcms;
pub mod ingest;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod preprocess;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
