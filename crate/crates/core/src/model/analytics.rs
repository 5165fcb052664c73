//! Closed-form parameter, FLOP and memory models.

use super::config::{ArchConfig, ArchKind, Precision};

const REAL_BYTES: u64 = 4;
const SCALE_BYTES: u64 = 4;

fn per_layer_params(d: usize, f: usize) -> usize {
    4 * (d * d + d) + (d * f + f + f * d + d) + 2 * (2 * d)
}

fn head_params(config: &ArchConfig) -> usize {
    match config.arch_kind {
        ArchKind::EncoderClassifier => config.hidden_dim * config.num_classes + config.num_classes,
        // tied to the token embedding
        ArchKind::DecoderLm => 0,
    }
}

/// Exact count of learnable scalars.
pub fn count_parameters(config: &ArchConfig) -> usize {
    let d = config.hidden_dim;
    (config.vocab_size + config.max_seq_len) * d
        + config.num_layers * per_layer_params(d, config.ffd_size)
        + head_params(config)
}

/// Elements held in weight matrices, the tensors that int8 mode quantizes.
pub fn weight_matrix_params(config: &ArchConfig) -> (usize, usize) {
    let d = config.hidden_dim;
    let f = config.ffd_size;
    let mut elems = config.num_layers * (4 * d * d + 2 * d * f);
    let mut tensors = config.num_layers * 6;
    if config.arch_kind == ArchKind::EncoderClassifier {
        elems += d * config.num_classes;
        tensors += 1;
    }
    (elems, tensors)
}

/// FLOPs of each layer for one sequence of `seq_len` tokens (one
/// multiply-add counts as two FLOPs).
pub fn estimate_flops(config: &ArchConfig, seq_len: usize) -> Vec<f64> {
    let n = seq_len as f64;
    let d = config.hidden_dim as f64;
    let f = config.ffd_size as f64;
    let per_layer = 8.0 * n * d * d + 4.0 * n * n * d + 4.0 * n * d * f;
    vec![per_layer; config.num_layers]
}

pub fn total_flops(config: &ArchConfig, seq_len: usize) -> f64 {
    estimate_flops(config, seq_len).iter().sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryEstimate {
    pub parameter_bytes: u64,
    pub activation_bytes: u64,
}

impl MemoryEstimate {
    pub fn total(&self) -> u64 {
        self.parameter_bytes + self.activation_bytes
    }
}

pub fn parameter_bytes(config: &ArchConfig, precision: Precision) -> u64 {
    let total = count_parameters(config) as u64;
    match precision {
        Precision::Real => total * REAL_BYTES,
        Precision::Int8Weights => {
            let (w, tensors) = weight_matrix_params(config);
            let (w, tensors) = (w as u64, tensors as u64);
            w + tensors * SCALE_BYTES + (total - w) * REAL_BYTES
        }
    }
}

pub fn activation_bytes(config: &ArchConfig, batch: usize, seq_len: usize) -> u64 {
    let (b, n) = (batch as u64, seq_len as u64);
    let d = config.hidden_dim as u64;
    let l = config.num_layers as u64;
    let h = config.num_heads as u64;
    b * n * d * (l + 1) * REAL_BYTES + b * h * n * n * l * REAL_BYTES
}

pub fn estimate_memory_detail(config: &ArchConfig, batch: usize, seq_len: usize, precision: Precision) -> MemoryEstimate {
    MemoryEstimate {
        parameter_bytes: parameter_bytes(config, precision),
        activation_bytes: activation_bytes(config, batch, seq_len),
    }
}

/// Parameter plus activation bytes of one forward pass.
pub fn estimate_memory(config: &ArchConfig, batch: usize, seq_len: usize, precision: Precision) -> u64 {
    estimate_memory_detail(config, batch, seq_len, precision).total()
}
