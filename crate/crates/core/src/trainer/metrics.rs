use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax, ArchKind, ModelState};
use crate::numcore::Scalar;
use crate::synthdata::Dataset;

use super::{check_task, make_batch};

const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

/// Binary metrics with class 1 as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    /// No positive predictions; precision reported as 0.
    pub precision_undefined: bool,
    /// No positive labels; recall reported as 0.
    pub recall_undefined: bool,
    pub confusion: Confusion,
}

impl ClassifierMetrics {
    pub fn from_confusion(c: Confusion, correct: usize, total: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { (0.0, true) } else { (num as f64 / den as f64, false) };
        let (precision, precision_undefined) = ratio(c.tp, c.tp + c.fp);
        let (recall, recall_undefined) = ratio(c.tp, c.tp + c.fn_);
        Self {
            accuracy: correct as f64 / total as f64,
            precision,
            recall,
            precision_undefined,
            recall_undefined,
            confusion: c,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmMetrics {
    pub token_accuracy: f64,
    pub perplexity: f64,
    pub predicted_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub n_examples: usize,
    /// Mean cross-entropy: per example for a classifier, per token for an LM.
    pub mean_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier: Option<ClassifierMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lm: Option<LmMetrics>,
}

impl EvalMetrics {
    /// Accuracy for a classifier, token accuracy for an LM.
    pub fn primary(&self) -> f64 {
        match (&self.classifier, &self.lm) {
            (Some(c), _) => c.accuracy,
            (None, Some(l)) => l.token_accuracy,
            (None, None) => 0.0,
        }
    }
}

fn log_softmax_at(row: &[f64], y: usize) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row[y] - lse
}

/// Examples in a canonical order, so that batching, and therefore every
/// floating-point result, is independent of the dataset's order.
fn canonical_order(data: &Dataset) -> Vec<usize> {
    let inputs: Vec<Vec<usize>> = data.examples.iter().map(|e| e.model_input()).collect();
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.sort_by(|&a, &b| {
        (inputs[a].len(), &inputs[a], data.examples[a].label).cmp(&(inputs[b].len(), &inputs[b], data.examples[b].label))
    });
    idx
}

/// Per-example work: argmax predictions and cross-entropy terms, in dataset order.
struct Scored {
    /// Classifier: one prediction per example. LM: one per predicted token.
    predictions: Vec<Vec<usize>>,
    losses: Vec<Vec<f64>>,
}

fn score<S: Scalar>(model: &ModelState<S>, data: &Dataset) -> Result<Scored> {
    check_task(model, data)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let cfg = model.config();
    let mut predictions = vec![Vec::new(); data.len()];
    let mut losses = vec![Vec::new(); data.len()];
    let order = canonical_order(data);
    for chunk in order.chunks(EVAL_BATCH) {
        let batch = make_batch(chunk.iter().map(|&i| &data.examples[i]))?;
        let (logits, _) = model.forward(&batch, false)?;
        let logits: Vec<f64> = logits.data().iter().map(|v| v.to_f64_lossy()).collect();
        for (b, &i) in chunk.iter().enumerate() {
            let e = &data.examples[i];
            match cfg.arch_kind {
                ArchKind::EncoderClassifier => {
                    let c = cfg.num_classes;
                    let row = &logits[b * c..(b + 1) * c];
                    if e.label >= c {
                        return Err(Error::LabelOutOfRange { label: e.label, classes: c });
                    }
                    predictions[i].push(argmax(row));
                    losses[i].push(-log_softmax_at(row, e.label));
                }
                ArchKind::DecoderLm => {
                    let (n, v) = (batch.seq_len(), cfg.vocab_size);
                    let toks = batch.row(b);
                    for t in 0..toks.len().saturating_sub(1) {
                        let row = &logits[(b * n + t) * v..(b * n + t + 1) * v];
                        predictions[i].push(argmax(row));
                        losses[i].push(-log_softmax_at(row, toks[t + 1]));
                    }
                }
            }
        }
    }
    Ok(Scored { predictions, losses })
}

/// Argmax predictions in dataset order (one per example, or one per
/// predicted token for an LM).
pub fn predictions<S: Scalar>(model: &ModelState<S>, data: &Dataset) -> Result<Vec<Vec<usize>>> {
    Ok(score(model, data)?.predictions)
}

/// Sum that does not depend on the order of `values`.
fn sorted_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.into_iter().sum()
}

pub fn evaluate<S: Scalar>(model: &ModelState<S>, data: &Dataset) -> Result<EvalMetrics> {
    let scored = score(model, data)?;
    let all_losses: Vec<f64> = scored.losses.iter().flatten().copied().collect();
    let count = all_losses.len();
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    let mean_loss = sorted_sum(all_losses) / count as f64;
    if !mean_loss.is_finite() {
        return Err(Error::NonFinite("evaluation loss".into()));
    }
    match model.config().arch_kind {
        ArchKind::EncoderClassifier => {
            let mut c = Confusion::default();
            let mut correct = 0;
            for (e, p) in data.examples.iter().zip(&scored.predictions) {
                let pred = p[0];
                correct += usize::from(pred == e.label);
                match (e.label == 1, pred == 1) {
                    (true, true) => c.tp += 1,
                    (false, true) => c.fp += 1,
                    (true, false) => c.fn_ += 1,
                    (false, false) => c.tn += 1,
                }
            }
            Ok(EvalMetrics {
                n_examples: data.len(),
                mean_loss,
                classifier: Some(ClassifierMetrics::from_confusion(c, correct, data.len())),
                lm: None,
            })
        }
        ArchKind::DecoderLm => {
            let mut correct = 0;
            for (e, p) in data.examples.iter().zip(&scored.predictions) {
                let toks = e.model_input();
                correct += p.iter().zip(&toks[1..]).filter(|(a, b)| a == b).count();
            }
            Ok(EvalMetrics {
                n_examples: data.len(),
                mean_loss,
                classifier: None,
                lm: Some(LmMetrics {
                    token_accuracy: correct as f64 / count as f64,
                    perplexity: mean_loss.exp(),
                    predicted_tokens: count,
                }),
            })
        }
    }
}
