use crate::compressor::quant::dequantize;
use crate::error::{shape_err, Error, Result};
use crate::numcore::{AttentionMask, Graph, Scalar, Tensor, Var};

use super::config::ArchKind;
use super::state::{layer_index, slot, ModelState, ParamKind, ParamValue, POSITION_EMBEDDING, TOKEN_EMBEDDING};

pub const PAD_TOKEN: usize = 0;
const LN_EPS: f64 = 1e-5;

/// Right-padded batch of token sequences, `[batch x seq_len]` row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    ids: Vec<usize>,
    batch: usize,
    seq_len: usize,
    lengths: Vec<usize>,
}

impl TokenBatch {
    /// Full-length rows, no padding.
    pub fn new(ids: Vec<usize>, batch: usize, seq_len: usize) -> Result<Self> {
        if ids.len() != batch * seq_len || seq_len == 0 {
            return shape_err("token_batch", format!("{} ids for {batch}x{seq_len}", ids.len()));
        }
        Ok(Self { ids, batch, seq_len, lengths: vec![seq_len; batch] })
    }

    pub fn from_sequences<T: AsRef<[usize]>>(seqs: &[T]) -> Result<Self> {
        let seq_len = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        if seqs.is_empty() || seq_len == 0 || seqs.iter().any(|s| s.as_ref().is_empty()) {
            return Err(Error::Validation("token batch needs non-empty sequences".into()));
        }
        let mut ids = Vec::with_capacity(seqs.len() * seq_len);
        let mut lengths = Vec::with_capacity(seqs.len());
        for s in seqs {
            let s = s.as_ref();
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(PAD_TOKEN, seq_len - s.len()));
            lengths.push(s.len());
        }
        Ok(Self { ids, batch: seqs.len(), seq_len, lengths })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Unpadded length of each row.
    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.seq_len..b * self.seq_len + self.lengths[b]]
    }
}

/// Internals captured during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceCache<S> {
    /// Post-block hidden states, `[batch, seq, hidden]` per layer.
    pub hidden: Vec<Tensor<S>>,
    /// Feedforward sub-block outputs (before the residual add), same shape.
    pub ff_out: Vec<Tensor<S>>,
    /// Attention probabilities, `[batch, heads, seq, seq]` per layer.
    pub attention: Vec<Tensor<S>>,
    /// Valid length of each batch row; positions past it are padding.
    pub lengths: Vec<usize>,
}

impl<S: Scalar> TraceCache<S> {
    pub fn num_layers(&self) -> usize {
        self.hidden.len()
    }
}

pub(crate) struct TraceVars {
    hidden: Vec<Var>,
    ff_out: Vec<Var>,
    attention: Vec<Var>,
}

pub(crate) struct GraphForward {
    pub logits: Var,
    /// Trainable leaf per stored tensor; `None` for int8 storage.
    pub params: Vec<Option<Var>>,
    pub trace: Option<TraceVars>,
}

impl<S: Scalar> ModelState<S> {
    fn check_batch(&self, batch: &TokenBatch) -> Result<()> {
        let c = self.config();
        if batch.seq_len > c.max_seq_len {
            return Err(Error::SequenceTooLong { len: batch.seq_len, max: c.max_seq_len });
        }
        if let Some(&t) = batch.ids.iter().find(|&&t| t >= c.vocab_size) {
            return Err(Error::TokenOutOfVocab { token: t, vocab: c.vocab_size });
        }
        Ok(())
    }

    pub(crate) fn forward_graph(&self, g: &mut Graph<S>, batch: &TokenBatch, capture: bool) -> Result<GraphForward> {
        self.check_batch(batch)?;
        let cfg = self.config().clone();
        let (b, n) = (batch.batch, batch.seq_len);
        let heads = cfg.num_heads;

        let mut train = Vec::with_capacity(self.params().len());
        let mut w = Vec::with_capacity(self.params().len());
        for p in self.params() {
            match &p.value {
                ParamValue::Real(t) => {
                    let v = g.leaf(t.clone());
                    train.push(Some(v));
                    w.push(if self.fake_quant() && p.kind == ParamKind::Matrix { g.fake_quant(v) } else { v });
                }
                ParamValue::Int8(q) => {
                    train.push(None);
                    w.push(g.leaf(dequantize(q)));
                }
            }
        }

        let tok = g.gather(w[TOKEN_EMBEDDING], &batch.ids)?;
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();
        let pos = g.gather(w[POSITION_EMBEDDING], &positions)?;
        let mut x = g.add(tok, pos)?;

        let mask = AttentionMask {
            causal: cfg.arch_kind == ArchKind::DecoderLm,
            key_lens: batch.lengths.iter().flat_map(|&l| std::iter::repeat_n(l, heads)).collect(),
        };
        let attn_temp = S::lit((cfg.head_dim as f64).sqrt());
        let eps = S::lit(LN_EPS);
        let mut trace = capture.then(|| TraceVars { hidden: vec![], ff_out: vec![], attention: vec![] });

        for l in 0..cfg.num_layers {
            let p = |s: usize| w[layer_index(l, s)];
            let a = g.layer_norm(x, p(slot::LN1_GAIN), p(slot::LN1_BIAS), eps)?;
            let proj = |wi: usize, bi: usize, g: &mut Graph<S>| -> Result<Var> {
                let y = g.matmul(a, p(wi))?;
                g.add_bias(y, p(bi))
            };
            let q = proj(slot::WQ, slot::BQ, g)?;
            let k = proj(slot::WK, slot::BK, g)?;
            let v = proj(slot::WV, slot::BV, g)?;
            let qh = g.split_heads(q, b, n, heads)?;
            let kh = g.split_heads(k, b, n, heads)?;
            let vh = g.split_heads(v, b, n, heads)?;
            let scores = g.batch_matmul(qh, kh, true)?;
            let probs = g.softmax_masked(scores, attn_temp, mask.clone())?;
            let ctx = g.batch_matmul(probs, vh, false)?;
            let merged = g.merge_heads(ctx, b, n, heads)?;
            let o = g.matmul(merged, p(slot::WO))?;
            let o = g.add_bias(o, p(slot::BO))?;
            x = g.add(x, o)?;

            let a2 = g.layer_norm(x, p(slot::LN2_GAIN), p(slot::LN2_BIAS), eps)?;
            let h = g.matmul(a2, p(slot::FF_IN))?;
            let h = g.add_bias(h, p(slot::FF_B_IN))?;
            let h = g.gelu(h);
            let f = g.matmul(h, p(slot::FF_OUT))?;
            let f = g.add_bias(f, p(slot::FF_B_OUT))?;
            x = g.add(x, f)?;

            if let Some(t) = trace.as_mut() {
                t.hidden.push(x);
                t.ff_out.push(f);
                t.attention.push(probs);
            }
        }

        let logits = match cfg.arch_kind {
            ArchKind::EncoderClassifier => {
                let cls: Vec<usize> = (0..b).map(|i| i * n).collect();
                let pooled = g.select_rows(x, &cls)?;
                let head_w = w[w.len() - 2];
                let head_b = w[w.len() - 1];
                let y = g.matmul(pooled, head_w)?;
                g.add_bias(y, head_b)?
            }
            ArchKind::DecoderLm => g.matmul_ex(x, w[TOKEN_EMBEDDING], true)?,
        };
        Ok(GraphForward { logits, params: train, trace })
    }

    /// Classifier logits `[batch, classes]`, or LM logits `[batch, seq, vocab]`.
    pub fn forward(&self, batch: &TokenBatch, capture: bool) -> Result<(Tensor<S>, Option<TraceCache<S>>)> {
        let mut g = Graph::new();
        let out = self.forward_graph(&mut g, batch, capture)?;
        let (b, n) = (batch.batch, batch.seq_len);
        let cfg = self.config();
        let logits = g.value(out.logits).clone();
        let logits = match cfg.arch_kind {
            ArchKind::EncoderClassifier => logits,
            ArchKind::DecoderLm => logits.reshape(&[b, n, cfg.vocab_size])?,
        };
        let trace = match out.trace {
            None => None,
            Some(t) => {
                let d = cfg.hidden_dim;
                let h = cfg.num_heads;
                let grab = |vars: &[Var], shape: &[usize]| -> Result<Vec<Tensor<S>>> {
                    vars.iter().map(|&v| g.value(v).clone().reshape(shape)).collect()
                };
                Some(TraceCache {
                    hidden: grab(&t.hidden, &[b, n, d])?,
                    ff_out: grab(&t.ff_out, &[b, n, d])?,
                    attention: grab(&t.attention, &[b, h, n, n])?,
                    lengths: batch.lengths.clone(),
                })
            }
        };
        Ok((logits, trace))
    }

    /// Greedy decoding: appends the argmax token until `max_new` tokens,
    /// `end_token`, or the context window is reached.
    pub fn generate(&self, prompt: &[usize], max_new: usize, end_token: Option<usize>) -> Result<Vec<usize>> {
        if self.config().arch_kind != ArchKind::DecoderLm {
            return Err(Error::TaskMismatch("generate requires a decoder model".into()));
        }
        let mut seq = prompt.to_vec();
        if max_new == 0 {
            return Ok(seq);
        }
        if prompt.is_empty() {
            return Err(Error::Validation("generate needs a non-empty prompt".into()));
        }
        let v = self.config().vocab_size;
        for _ in 0..max_new {
            if seq.len() >= self.config().max_seq_len {
                break;
            }
            let batch = TokenBatch::new(seq.clone(), 1, seq.len())?;
            let (logits, _) = self.forward(&batch, false)?;
            let last = &logits.data()[(seq.len() - 1) * v..seq.len() * v];
            let next = argmax(last);
            seq.push(next);
            if Some(next) == end_token {
                break;
            }
        }
        Ok(seq)
    }
}

/// Index of the largest value; the first one on ties.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
