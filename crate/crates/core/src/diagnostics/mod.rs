//! Per-layer redundancy metrics: activation norms, attention concentration,
//! a depth prior, and per-layer FLOPs.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{estimate_flops, ModelState, TraceCache};
use crate::numcore::{Scalar, Tensor};
use crate::synthdata::Dataset;
use crate::trainer::check_task;

/// Relative per-layer growth of the hidden norm below which depth is
/// considered to have plateaued.
pub const PLATEAU_GAIN: f64 = 0.05;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScaling {
    /// `‖h‖ / √d`: unit-variance activations score ≈ 1 at any width.
    #[default]
    SqrtDim,
    /// `‖h‖ / d`.
    Dim,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    pub layer_index: usize,
    pub hidden_norm: f64,
    pub ff_norm: f64,
    pub attn_score: f64,
    pub depth_prior: f64,
    pub flops: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub layers: Vec<LayerDiagnostics>,
    /// Smallest layer after which every further layer grows the hidden norm
    /// by less than [`PLATEAU_GAIN`].
    pub plateau_index: usize,
    pub seq_len: usize,
    pub calibration_examples: usize,
}

impl LayerProfile {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.to_csv().as_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,hidden_norm,ff_norm,attn_score,depth_prior,flops\n");
        for l in &self.layers {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                l.layer_index, l.hidden_norm, l.ff_norm, l.attn_score, l.depth_prior, l.flops
            ));
        }
        s
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "num_layers": self.layers.len(),
            "plateau_index": self.plateau_index,
            "plateau_gain_threshold": PLATEAU_GAIN,
            "seq_len": self.seq_len,
            "calibration_examples": self.calibration_examples,
        })
    }
}

/// Mean of `values` as `x₀ + mean(xᵢ − x₀)`, which is exact whenever all
/// values are equal.
fn shifted_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut it = values.peekable();
    let Some(&x0) = it.peek() else { return 0.0 };
    let (mut acc, mut n) = (0.0, 0usize);
    for x in it {
        acc += x - x0;
        n += 1;
    }
    x0 + acc / n as f64
}

fn layer_err(layer: usize, layers: usize) -> Error {
    Error::Validation(format!("layer {layer} out of range for {layers} layers"))
}

/// Mean scaled L2 norm of the valid token rows of a `[batch, seq, d]` tensor.
pub fn activation_norm<S: Scalar>(h: &Tensor<S>, lengths: &[usize], scaling: NormScaling) -> Result<f64> {
    let &[b, n, d] = h.shape() else {
        return Err(Error::Validation(format!("activation tensor must be [batch, seq, d], got {:?}", h.shape())));
    };
    if lengths.len() != b || lengths.iter().any(|&l| l > n) {
        return Err(Error::Validation(format!("lengths {lengths:?} do not fit shape {:?}", h.shape())));
    }
    let div = match scaling {
        NormScaling::SqrtDim => (d as f64).sqrt(),
        NormScaling::Dim => d as f64,
    };
    let data = h.data();
    let norms = (0..b).flat_map(|i| (0..lengths[i]).map(move |t| (i, t))).map(|(i, t)| {
        let row = &data[(i * n + t) * d..(i * n + t + 1) * d];
        row.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt() / div
    });
    Ok(shifted_mean(norms))
}

pub fn hidden_state_norm<S: Scalar>(trace: &TraceCache<S>, layer: usize, scaling: NormScaling) -> Result<f64> {
    let h = trace.hidden.get(layer).ok_or_else(|| layer_err(layer, trace.num_layers()))?;
    activation_norm(h, &trace.lengths, scaling)
}

pub fn feedforward_norm<S: Scalar>(trace: &TraceCache<S>, layer: usize, scaling: NormScaling) -> Result<f64> {
    let h = trace.ff_out.get(layer).ok_or_else(|| layer_err(layer, trace.num_layers()))?;
    activation_norm(h, &trace.lengths, scaling)
}

/// Mean over heads, batch rows and valid queries of the row maximum of a
/// `[batch, heads, seq, seq]` attention tensor.
pub fn attention_concentration<S: Scalar>(maps: &Tensor<S>, lengths: &[usize]) -> Result<f64> {
    let &[b, h, n, m] = maps.shape() else {
        return Err(Error::Validation(format!("attention maps must be [batch, heads, seq, seq], got {:?}", maps.shape())));
    };
    if n != m || lengths.len() != b || lengths.iter().any(|&l| l > n) {
        return Err(Error::Validation(format!("lengths {lengths:?} do not fit shape {:?}", maps.shape())));
    }
    let data = maps.data();
    let maxima = (0..b)
        .flat_map(|i| (0..h).flat_map(move |k| (0..lengths[i]).map(move |q| ((i * h + k) * n + q) * n)))
        .map(|start| data[start..start + n].iter().map(|v| v.to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max));
    Ok(shifted_mean(maxima))
}

pub fn attention_head_score<S: Scalar>(trace: &TraceCache<S>, layer: usize) -> Result<f64> {
    let a = trace.attention.get(layer).ok_or_else(|| layer_err(layer, trace.num_layers()))?;
    attention_concentration(a, &trace.lengths)
}

/// `1 / (l + 1)` for zero-based layer `l`.
pub fn depth_prior(layer: usize) -> f64 {
    1.0 / (layer as f64 + 1.0)
}

pub fn plateau_index(hidden_norms: &[f64]) -> usize {
    let mut idx = hidden_norms.len().saturating_sub(1);
    while idx > 0 {
        let (prev, next) = (hidden_norms[idx - 1], hidden_norms[idx]);
        let gain = if prev > 0.0 { (next - prev) / prev } else { f64::INFINITY };
        if gain >= PLATEAU_GAIN {
            break;
        }
        idx -= 1;
    }
    idx
}

/// Forward the calibration examples as one batch with capture on and
/// tabulate every metric per layer.
pub fn profile_layers<S: Scalar>(model: &ModelState<S>, calibration: &Dataset, scaling: NormScaling) -> Result<LayerProfile> {
    check_task(model, calibration)?;
    if calibration.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let batch = crate::trainer::make_batch(calibration.examples.iter())?;
    let (_, trace) = model.forward(&batch, true)?;
    let trace = trace.expect("capture requested");
    let flops = estimate_flops(model.config(), batch.seq_len());
    let layers = (0..trace.num_layers())
        .map(|l| {
            Ok(LayerDiagnostics {
                layer_index: l,
                hidden_norm: hidden_state_norm(&trace, l, scaling)?,
                ff_norm: feedforward_norm(&trace, l, scaling)?,
                attn_score: attention_head_score(&trace, l)?,
                depth_prior: depth_prior(l),
                flops: flops[l],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let norms: Vec<f64> = layers.iter().map(|l| l.hidden_norm).collect();
    Ok(LayerProfile {
        plateau_index: plateau_index(&norms),
        layers,
        seq_len: batch.seq_len(),
        calibration_examples: calibration.len(),
    })
}
