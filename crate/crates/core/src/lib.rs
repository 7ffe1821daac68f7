//! Outlier-free attention laboratory.
//!
//! Softmax₁ attention and its diagnostics, simulated post-training
//! quantization, low-rank adapter algebra with an exact-representation
//! construction, BPE tokenization of DNA, and a small masked-language-model
//! trainer with hand-written gradients.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod linalg;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod quant;
pub mod rng;
pub mod tensor;
pub mod training;

pub use checkpoint::{Checkpoint, CheckpointKind, Dtype};
pub use config::{AttentionVariant, BlockMode, ModelConfig};
pub use error::{Error, Result};
pub use model::{ActivationTrace, Model, ModelOutput, ModelParams};
pub use rng::Rng;
pub use tensor::Tensor;
pub use metrics::{kurtosis, OutlierReport};
pub use quant::{QuantSpec, QuantizedModel};
pub use lora::{AdapterSet, LoraAdapter};
pub use data::{CorpusSpec, Vocab};
