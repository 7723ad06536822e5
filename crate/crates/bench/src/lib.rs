//! Deterministic inputs shared by the benchmarks in `benches/`.

use olfact_core::nn::ModelConfig;
use olfact_core::Tensor;

/// A smooth pseudo-signal of the requested shape; cheap and reproducible.
pub fn signal(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| {
            let x = i as f64;
            (x * 0.013).sin() * 40.0 + (x * 0.0007).cos() * 300.0
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// The small transformer used by the acceptance runs.
pub fn small_transformer(input_dim: usize, classes: usize) -> ModelConfig {
    ModelConfig {
        input_dim,
        latent_dim: 32,
        layers: 1,
        heads: 4,
        num_classes: classes,
        ..ModelConfig::default()
    }
}
