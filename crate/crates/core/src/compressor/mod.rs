//! Structured pruning and int8 quantization.

pub mod prune;
pub mod quant;

pub use prune::{structured_prune, PruneDecision, PruneLog, PruneOutcome, PruneRecord, PruneSettings, DEFAULT_EPSILON};
pub use quant::{dequantize, quantize_aware_init, quantize_model, quantize_tensor, QuantTensor};
