//! A small trainable network with fake quantization, clipped straight-through
//! gradients, channel masks and kernel-size branches.

pub mod checkpoint;
pub mod config;
pub mod kernels;
pub mod model;
pub mod tensor;
pub mod thresholds;

pub use config::{LayerConfig, LayerParams, LayerType, ModelConfig};
pub use model::{
    accuracy, active_channels, cross_entropy, ForwardCache, ForwardOptions, Gradients, Network, QuantPhase, Sgd,
    WeightKind, WeightLayer,
};
pub use tensor::Tensor;
pub use thresholds::{RunningStats, StdMultiples, ThresholdTable};

#[derive(Debug, thiserror::Error)]
pub enum NetworkError {
    #[error("model config error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite activation {value} at layer index {layer}")]
    NonFinite { layer: usize, value: f64 },
    #[error("no threshold for layer `{layer}` format {format}")]
    MissingThreshold { layer: String, format: String },
    #[error("degenerate threshold: activations into layer `{layer}` have zero variance")]
    DegenerateThreshold { layer: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}
