use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::compressor::quant::{dequantize, QuantTensor};
use crate::error::Result;
use crate::numcore::{Scalar, Tensor};

use super::config::{ArchConfig, ArchKind, Precision};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Embedding,
    Matrix,
    Bias,
    NormGain,
    NormBias,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParamValue<S> {
    Real(Tensor<S>),
    Int8(QuantTensor<S>),
}

impl<S: Scalar> ParamValue<S> {
    pub fn shape(&self) -> &[usize] {
        match self {
            ParamValue::Real(t) => t.shape(),
            ParamValue::Int8(q) => q.shape(),
        }
    }

    pub fn len(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Real values, dequantizing int8 storage.
    pub fn to_real(&self) -> Tensor<S> {
        match self {
            ParamValue::Real(t) => t.clone(),
            ParamValue::Int8(q) => dequantize(q),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedParam<S> {
    pub name: String,
    pub kind: ParamKind,
    pub value: ParamValue<S>,
}

/// Per-layer tensors in storage order.
pub(crate) const LAYER_SLOTS: [(&str, ParamKind); 16] = [
    ("ln1.gain", ParamKind::NormGain),
    ("ln1.bias", ParamKind::NormBias),
    ("attn.wq", ParamKind::Matrix),
    ("attn.bq", ParamKind::Bias),
    ("attn.wk", ParamKind::Matrix),
    ("attn.bk", ParamKind::Bias),
    ("attn.wv", ParamKind::Matrix),
    ("attn.bv", ParamKind::Bias),
    ("attn.wo", ParamKind::Matrix),
    ("attn.bo", ParamKind::Bias),
    ("ln2.gain", ParamKind::NormGain),
    ("ln2.bias", ParamKind::NormBias),
    ("ff.w_in", ParamKind::Matrix),
    ("ff.b_in", ParamKind::Bias),
    ("ff.w_out", ParamKind::Matrix),
    ("ff.b_out", ParamKind::Bias),
];

pub(crate) mod slot {
    pub const LN1_GAIN: usize = 0;
    pub const LN1_BIAS: usize = 1;
    pub const WQ: usize = 2;
    pub const BQ: usize = 3;
    pub const WK: usize = 4;
    pub const BK: usize = 5;
    pub const WV: usize = 6;
    pub const BV: usize = 7;
    pub const WO: usize = 8;
    pub const BO: usize = 9;
    pub const LN2_GAIN: usize = 10;
    pub const LN2_BIAS: usize = 11;
    pub const FF_IN: usize = 12;
    pub const FF_B_IN: usize = 13;
    pub const FF_OUT: usize = 14;
    pub const FF_B_OUT: usize = 15;
}

pub(crate) const TOKEN_EMBEDDING: usize = 0;
pub(crate) const POSITION_EMBEDDING: usize = 1;

pub(crate) fn layer_index(layer: usize, slot: usize) -> usize {
    2 + layer * LAYER_SLOTS.len() + slot
}

/// Name, kind and shape of every tensor implied by `config`, in storage order.
pub fn param_layout(config: &ArchConfig) -> Vec<(String, ParamKind, Vec<usize>)> {
    let d = config.hidden_dim;
    let f = config.ffd_size;
    let mut out = vec![
        ("token_embedding".to_string(), ParamKind::Embedding, vec![config.vocab_size, d]),
        ("position_embedding".to_string(), ParamKind::Embedding, vec![config.max_seq_len, d]),
    ];
    for l in 0..config.num_layers {
        for (i, (name, kind)) in LAYER_SLOTS.iter().enumerate() {
            let shape = match i {
                slot::WQ | slot::WK | slot::WV | slot::WO => vec![d, d],
                slot::FF_IN => vec![d, f],
                slot::FF_OUT => vec![f, d],
                slot::FF_B_IN => vec![f],
                _ => vec![d],
            };
            out.push((format!("layers.{l}.{name}"), *kind, shape));
        }
    }
    if config.arch_kind == ArchKind::EncoderClassifier {
        out.push(("head.weight".to_string(), ParamKind::Matrix, vec![d, config.num_classes]));
        out.push(("head.bias".to_string(), ParamKind::Bias, vec![config.num_classes]));
    }
    out
}

/// All learnable tensors of one transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<S> {
    config: ArchConfig,
    params: Vec<NamedParam<S>>,
    precision: Precision,
    fake_quant: bool,
}

impl<S: Scalar> ModelState<S> {
    pub(crate) fn from_parts(config: ArchConfig, params: Vec<NamedParam<S>>, precision: Precision, fake_quant: bool) -> Self {
        Self { config, params, precision, fake_quant }
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn params(&self) -> &[NamedParam<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedParam<S>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&NamedParam<S>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub(crate) fn set_precision(&mut self, precision: Precision) {
        self.precision = precision;
    }

    /// Whether forwards pass weight matrices through quantize∘dequantize.
    pub fn fake_quant(&self) -> bool {
        self.fake_quant
    }

    pub fn set_fake_quant(&mut self, on: bool) {
        self.fake_quant = on;
    }

    /// Number of scalar learnables actually stored.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Hash over every stored bit, for frozen-weight checks.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.config.hash(&mut h);
        self.precision.hash(&mut h);
        for p in &self.params {
            p.name.hash(&mut h);
            match &p.value {
                ParamValue::Real(t) => {
                    t.shape().hash(&mut h);
                    for v in t.data() {
                        v.to_f64_lossy().to_bits().hash(&mut h);
                    }
                }
                ParamValue::Int8(q) => {
                    q.shape().hash(&mut h);
                    q.values().hash(&mut h);
                    q.scale().to_f64_lossy().to_bits().hash(&mut h);
                }
            }
        }
        h.finish()
    }

    pub fn cast<T: Scalar>(&self) -> ModelState<T> {
        let params = self
            .params
            .iter()
            .map(|p| NamedParam {
                name: p.name.clone(),
                kind: p.kind,
                value: match &p.value {
                    ParamValue::Real(t) => ParamValue::Real(t.cast()),
                    ParamValue::Int8(q) => ParamValue::Int8(
                        QuantTensor::from_parts(q.shape().to_vec(), q.values().to_vec(), T::lit(q.scale().to_f64_lossy()))
                            .expect("valid quant tensor"),
                    ),
                },
            })
            .collect();
        ModelState { config: self.config.clone(), params, precision: self.precision, fake_quant: self.fake_quant }
    }
}

/// Seeded initialization: weights ~ N(0, 0.02²), biases 0, norm gains 1.
pub fn build_model<S: Scalar>(config: &ArchConfig, seed: u64) -> Result<ModelState<S>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let params = param_layout(config)
        .into_iter()
        .map(|(name, kind, shape)| {
            let n: usize = shape.iter().product();
            let data: Vec<S> = match kind {
                ParamKind::Embedding | ParamKind::Matrix => (0..n).map(|_| S::lit(normal.sample(&mut rng))).collect(),
                ParamKind::NormGain => vec![S::one(); n],
                ParamKind::Bias | ParamKind::NormBias => vec![S::zero(); n],
            };
            NamedParam { name, kind, value: ParamValue::Real(Tensor::new(shape, data).expect("layout shape")) }
        })
        .collect();
    Ok(ModelState { config: config.clone(), params, precision: Precision::Real, fake_quant: false })
}
