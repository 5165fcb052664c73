//! Deterministic synthetic tasks: code-clone-style pair classification and
//! a context-free expression language.

mod clone;
mod grammar;

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use clone::{
    encode_pair, generate_clone_dataset, is_clone_pair, overlap_baseline_accuracy, token_class, CloneVocab, TokenClass,
    CLS_TOKEN, SEP_TOKEN,
};
pub use grammar::{
    generate_lm_dataset, is_valid_expression, legal_continuations, GrammarVocab, LM_VOCAB_SIZE, MAX_DEPTH, P_ATOM,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ClonePairs,
    GrammarLm,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens_b: Option<Vec<usize>>,
    pub label: usize,
}

impl Example {
    /// Token sequence fed to the model: `[CLS] a [SEP] b` for pairs.
    pub fn model_input(&self) -> Vec<usize> {
        match &self.tokens_b {
            Some(b) => encode_pair(&self.tokens, b),
            None => self.tokens.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub task_kind: TaskKind,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Longest model input in the set.
    pub fn max_input_len(&self) -> usize {
        self.examples.iter().map(|e| e.model_input().len()).max().unwrap_or(0)
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset { examples: self.examples[range].to_vec(), ..self.clone_meta() }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset { examples: Vec::new(), task_kind: self.task_kind, vocab_size: self.vocab_size, seed: self.seed }
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let k = self.examples.iter().map(|e| e.label + 1).max().unwrap_or(0);
        let mut counts = vec![0; k];
        for e in &self.examples {
            counts[e.label] += 1;
        }
        counts
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in &self.examples {
            serde_json::to_writer(&mut f, e)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: impl AsRef<Path>, task_kind: TaskKind, vocab_size: usize) -> Result<Dataset> {
        let f = BufReader::new(std::fs::File::open(path)?);
        let mut examples = Vec::new();
        for line in f.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: Example = serde_json::from_str(&line)?;
            if task_kind == TaskKind::ClonePairs && e.tokens_b.is_none() {
                return Err(Error::Validation("clone record missing tokens_b".into()));
            }
            examples.push(e);
        }
        Ok(Dataset { examples, task_kind, vocab_size, seed: 0 })
    }
}

/// Deterministic shuffled three-way split.
pub fn split(dataset: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let (tr, va, te) = fractions;
    if [tr, va, te].iter().any(|f| !(0.0..=1.0).contains(f)) || ((tr + va + te) - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let n = dataset.len();
    let n_train = (n as f64 * tr).round() as usize;
    let n_val = (n as f64 * va).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::Validation(format!("split {fractions:?} of {n} examples leaves an empty part")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |idx: &[usize]| Dataset {
        examples: idx.iter().map(|&i| dataset.examples[i].clone()).collect(),
        ..dataset.clone_meta()
    };
    Ok((take(&order[..n_train]), take(&order[n_train..n_train + n_val]), take(&order[n_train + n_val..])))
}
