//! AdamW, the shared training loop, and evaluation metrics.

mod metrics;
mod optim;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ArchKind, ModelState, ParamValue, TokenBatch};
use crate::numcore::{Graph, Scalar, Tensor, Var};
use crate::synthdata::{Dataset, Example, TaskKind};

pub use metrics::{evaluate, predictions, ClassifierMetrics, Confusion, EvalMetrics, LmMetrics};
pub use optim::{optimizer_step, AdamWConfig, OptimState};

pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_PROXY_STEPS: usize = 300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpec {
    HardLabel,
    KdOnly { temperature: f64 },
    Hybrid { alpha: f64, temperature: f64 },
}

impl LossSpec {
    pub fn needs_teacher(&self) -> bool {
        !matches!(self, LossSpec::HardLabel)
    }

    fn validate(&self) -> Result<()> {
        let (alpha, t) = match *self {
            LossSpec::HardLabel => return Ok(()),
            LossSpec::KdOnly { temperature } => (1.0, temperature),
            LossSpec::Hybrid { alpha, temperature } => (alpha, temperature),
        };
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::InvalidConfig(format!("temperature {t} must be positive")));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidConfig(format!("alpha {alpha} outside [0, 1]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optim: AdamWConfig,
    /// Drop the τ² factor on the distillation term.
    #[serde(default)]
    pub raw_kl: bool,
}

impl TrainOptions {
    pub fn new(steps: usize, seed: u64) -> Self {
        Self {
            steps,
            batch_size: DEFAULT_BATCH_SIZE,
            seed,
            optim: AdamWConfig::default(),
            raw_kl: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub losses: Vec<f64>,
}

impl LossHistory {
    pub fn first(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn last(&self) -> Option<f64> {
        self.losses.last().copied()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "step,loss")?;
        for (i, l) in self.losses.iter().enumerate() {
            writeln!(f, "{i},{l}")?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Frozen teacher logits, one tensor per dataset example: `[classes]` for a
/// classifier, `[len, vocab]` for a language model.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTargets<S> {
    logits: Vec<Tensor<S>>,
}

impl<S: Scalar> SoftTargets<S> {
    pub fn from_teacher(teacher: &ModelState<S>, data: &Dataset, batch_size: usize) -> Result<Self> {
        check_task(teacher, data)?;
        let mut logits = Vec::with_capacity(data.len());
        let cfg = teacher.config();
        for chunk in data.examples.chunks(batch_size.max(1)) {
            let batch = make_batch(chunk.iter())?;
            let (out, _) = teacher.forward(&batch, false)?;
            for (b, e) in chunk.iter().enumerate() {
                logits.push(match cfg.arch_kind {
                    ArchKind::EncoderClassifier => {
                        let c = cfg.num_classes;
                        Tensor::new(vec![c], out.data()[b * c..(b + 1) * c].to_vec())?
                    }
                    ArchKind::DecoderLm => {
                        let (n, v) = (batch.seq_len(), cfg.vocab_size);
                        let len = e.model_input().len();
                        Tensor::new(vec![len, v], out.data()[b * n * v..(b * n + len) * v].to_vec())?
                    }
                });
            }
        }
        Ok(Self { logits })
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor<S> {
        &self.logits[i]
    }
}

pub(crate) fn check_task<S: Scalar>(model: &ModelState<S>, data: &Dataset) -> Result<()> {
    let ok = matches!(
        (model.config().arch_kind, data.task_kind),
        (ArchKind::EncoderClassifier, TaskKind::ClonePairs) | (ArchKind::DecoderLm, TaskKind::GrammarLm)
    );
    if !ok {
        return Err(Error::TaskMismatch(format!("{:?} model on {:?} data", model.config().arch_kind, data.task_kind)));
    }
    Ok(())
}

pub(crate) fn make_batch<'a>(examples: impl Iterator<Item = &'a Example>) -> Result<TokenBatch> {
    let seqs: Vec<Vec<usize>> = examples.map(|e| e.model_input()).collect();
    TokenBatch::from_sequences(&seqs)
}

/// Per-row labels matching the logits layout: one per example for a
/// classifier, next-token targets for a language model.
fn row_labels(kind: ArchKind, batch: &TokenBatch, labels: &[usize]) -> Vec<Option<usize>> {
    match kind {
        ArchKind::EncoderClassifier => labels.iter().map(|&y| Some(y)).collect(),
        ArchKind::DecoderLm => {
            let n = batch.seq_len();
            let mut out = vec![None; batch.batch() * n];
            for b in 0..batch.batch() {
                let row = batch.row(b);
                for t in 0..row.len().saturating_sub(1) {
                    out[b * n + t] = Some(row[t + 1]);
                }
            }
            out
        }
    }
}

/// Teacher logits laid out like the student logits.
fn teacher_rows<S: Scalar>(
    kind: ArchKind,
    batch: &TokenBatch,
    idx: &[usize],
    targets: &SoftTargets<S>,
    width: usize,
    rows: usize,
) -> Result<Tensor<S>> {
    let mut out = vec![S::zero(); rows * width];
    let n = batch.seq_len();
    for (b, &i) in idx.iter().enumerate() {
        let z = targets.get(i);
        if z.last_dim() != width {
            return Err(Error::TaskMismatch(format!("teacher width {} vs student {width}", z.last_dim())));
        }
        match kind {
            ArchKind::EncoderClassifier => out[b * width..(b + 1) * width].copy_from_slice(z.data()),
            ArchKind::DecoderLm => out[b * n * width..(b * n + z.rows()) * width].copy_from_slice(z.data()),
        }
    }
    Tensor::new(vec![rows, width], out)
}

/// Scalar loss node for one batch.
pub(crate) fn batch_loss<S: Scalar>(
    g: &mut Graph<S>,
    logits: Var,
    kind: ArchKind,
    batch: &TokenBatch,
    idx: &[usize],
    labels: &[usize],
    spec: &LossSpec,
    targets: Option<&SoftTargets<S>>,
    raw_kl: bool,
) -> Result<Var> {
    let rows = row_labels(kind, batch, labels);
    let (alpha, t) = match *spec {
        LossSpec::HardLabel => return g.cross_entropy(logits, &rows),
        LossSpec::KdOnly { temperature } => (1.0, temperature),
        LossSpec::Hybrid { alpha, temperature } => (alpha, temperature),
    };
    let targets = targets.ok_or_else(|| Error::Validation("distillation loss needs teacher targets".into()))?;
    let width = g.value(logits).last_dim();
    let tau = S::lit(t);
    let teacher = teacher_rows(kind, batch, idx, targets, width, rows.len())?;
    let factor = if raw_kl { S::one() } else { tau * tau };
    let mask: Vec<bool> = rows.iter().map(Option::is_some).collect();
    let kd = g.kl_divergence(logits, &teacher, &mask, tau, factor)?;
    if alpha == 1.0 {
        return Ok(kd);
    }
    let ce = g.cross_entropy(logits, &rows)?;
    g.weighted_sum(kd, S::lit(alpha), ce, S::lit(1.0 - alpha))
}

/// Fixed-step minibatch training. Batches follow a seeded shuffle that is
/// redrawn at each pass over the data.
pub fn train<S: Scalar>(
    model: &mut ModelState<S>,
    data: &Dataset,
    spec: &LossSpec,
    targets: Option<&SoftTargets<S>>,
    opts: &TrainOptions,
) -> Result<LossHistory> {
    spec.validate()?;
    check_task(model, data)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if opts.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    if let Some(t) = targets {
        if t.len() != data.len() {
            return Err(Error::Validation(format!("{} teacher targets for {} examples", t.len(), data.len())));
        }
    }
    let kind = model.config().arch_kind;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut state = OptimState::new(opts.optim);
    let mut history = LossHistory::default();
    let bs = opts.batch_size.min(data.len());

    for _ in 0..opts.steps {
        if cursor + bs > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + bs];
        cursor += bs;
        let batch = make_batch(idx.iter().map(|&i| &data.examples[i]))?;
        let labels: Vec<usize> = idx.iter().map(|&i| data.examples[i].label).collect();

        let mut g = Graph::new();
        let out = model.forward_graph(&mut g, &batch, false)?;
        let loss = batch_loss(&mut g, out.logits, kind, &batch, idx, &labels, spec, targets, opts.raw_kl)?;
        let value = g.value(loss).data()[0];
        let grads = g.backward(loss)?;

        let grad_tensors: Vec<Tensor<S>> = model
            .params()
            .iter()
            .zip(&out.params)
            .filter_map(|(p, v)| match (&p.value, v) {
                (ParamValue::Real(t), Some(v)) => Some(grads.get_or_zeros(*v, t)),
                _ => None,
            })
            .collect();
        let mut params: Vec<&mut Tensor<S>> = model
            .params_mut()
            .iter_mut()
            .filter_map(|p| match &mut p.value {
                ParamValue::Real(t) => Some(t),
                ParamValue::Int8(_) => None,
            })
            .collect();
        let grad_refs: Vec<&Tensor<S>> = grad_tensors.iter().collect();
        optimizer_step(&mut params, &grad_refs, &mut state)?;
        history.losses.push(value.to_f64_lossy());
    }
    Ok(history)
}
