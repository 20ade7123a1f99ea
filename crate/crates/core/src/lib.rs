//! Partial rotary positional embedding laboratory.
//!
//! A small `f64` transformer stack built for studying how the fraction of
//! head channels that receive rotary embeddings affects training:
//!
//! * [`autograd`]: dense tensors with tape-based reverse-mode differentiation.
//! * [`rope`]: rotary dimension rounding, angle tables, partial rotation.
//! * [`attention`]: causal GQA attention with optional QK-Norm.
//! * [`model`]: sequential and parallel decoder blocks, LM forward, checkpoints.
//! * [`train`]: schedule, AdamW, corpora, synthetic tasks, sweeps, spike detection.
//! * [`planner`]: rotary cache memory model across lengths and devices.
//! * [`eval`]: held-out loss, perplexity, task accuracy and loss bands.

pub mod attention;
pub mod autograd;
pub mod checkpoint;
mod error;
pub mod eval;
pub mod gradcheck;
mod init;
pub mod model;
pub mod planner;
pub mod rope;
mod tensor;
pub mod train;

pub use attention::{AttentionConfig, AttentionParams, QkNormParams};
pub use autograd::{AttnMask, Tape, Var};
pub use error::{Error, Result};
pub use model::{BlockTopology, Model, ModelConfig, TokenBatch, TopologyKind};
pub use rope::{RopeCache, RopeConfig};
pub use tensor::Tensor;
