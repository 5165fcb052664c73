//! Configurable transformer family: encoder pair classifier and causal LM.

mod analytics;
pub mod checkpoint;
mod config;
mod forward;
mod state;

pub use analytics::{
    activation_bytes, count_parameters, estimate_flops, estimate_memory, estimate_memory_detail, parameter_bytes,
    total_flops, weight_matrix_params, MemoryEstimate,
};
pub use config::{ArchConfig, ArchKind, Precision};
pub use forward::{argmax, TokenBatch, TraceCache, PAD_TOKEN};
pub use state::{build_model, param_layout, ModelState, NamedParam, ParamKind, ParamValue, INIT_STD};
