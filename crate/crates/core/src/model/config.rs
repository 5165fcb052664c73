use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    /// Pair classifier pooled at the first (`[CLS]`) position.
    EncoderClassifier,
    /// Causal language model with output projection tied to the token embedding.
    DecoderLm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Real,
    Int8Weights,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub hidden_dim: usize,
    pub ffd_size: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub arch_kind: ArchKind,
    /// Ignored by decoder models.
    pub num_classes: usize,
}

impl ArchConfig {
    pub fn encoder_classifier(
        num_layers: usize,
        num_heads: usize,
        head_dim: usize,
        ffd_size: usize,
        vocab_size: usize,
        max_seq_len: usize,
        num_classes: usize,
    ) -> Self {
        Self {
            num_layers,
            num_heads,
            head_dim,
            hidden_dim: num_heads * head_dim,
            ffd_size,
            vocab_size,
            max_seq_len,
            arch_kind: ArchKind::EncoderClassifier,
            num_classes,
        }
    }

    pub fn decoder_lm(
        num_layers: usize,
        num_heads: usize,
        head_dim: usize,
        ffd_size: usize,
        vocab_size: usize,
        max_seq_len: usize,
    ) -> Self {
        Self {
            num_layers,
            num_heads,
            head_dim,
            hidden_dim: num_heads * head_dim,
            ffd_size,
            vocab_size,
            max_seq_len,
            arch_kind: ArchKind::DecoderLm,
            num_classes: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.num_heads == 0 || self.head_dim == 0 {
            return fail("num_heads and head_dim must be positive".into());
        }
        if self.hidden_dim != self.num_heads * self.head_dim {
            return fail(format!(
                "hidden_dim {} != num_heads {} x head_dim {}",
                self.hidden_dim, self.num_heads, self.head_dim
            ));
        }
        if self.num_layers == 0 {
            return fail("num_layers must be >= 1".into());
        }
        if self.ffd_size == 0 {
            return fail("ffd_size must be >= 1".into());
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return fail("vocab_size and max_seq_len must be positive".into());
        }
        if self.arch_kind == ArchKind::EncoderClassifier && self.num_classes < 2 {
            return fail("classifier needs at least two classes".into());
        }
        Ok(())
    }

    /// Same task head, new body dimensions.
    pub fn with_body(&self, num_layers: usize, num_heads: usize, head_dim: usize, ffd_size: usize) -> Self {
        Self { num_layers, num_heads, head_dim, hidden_dim: num_heads * head_dim, ffd_size, ..self.clone() }
    }

    pub fn body(&self) -> (usize, usize, usize, usize) {
        (self.num_layers, self.num_heads, self.head_dim, self.ffd_size)
    }
}
