//! One-shot mixed-precision quantization search.
//!
//! The crate trains a small network while a per-layer REINFORCE controller
//! picks numeric formats (integers, minifloats, BF16), channel widths and
//! kernel sizes under a quadratic bit-operation cost model.
//!
//! - [`numerics`]: emulated formats and the symmetric fake quantizer
//! - [`costmodel`]: BOPs cost model, manifests and the absolute reward
//! - [`controller`]: policies, REINFORCE updates and entropy schedules
//! - [`network`]: a minimal trainable network with fake quantization
//! - [`data`]: IDX ingestion, synthetic datasets and batching
//! - [`search`]: the search loop, uniform baselines and sweeps
//! - [`analysis`]: switching-error, clipping and entropy studies

pub mod analysis;
pub mod arch;
pub mod controller;
pub mod data;
pub mod costmodel;
pub mod network;
pub mod numerics;
pub mod search;

pub use arch::{ArchChoice, LayerOptions, SearchSpace};
pub use numerics::{NumericFormat, QuantConfig};
