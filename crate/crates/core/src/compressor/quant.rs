//! Symmetric per-tensor int8 quantization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelState, ParamKind, ParamValue, Precision};
use crate::numcore::{Scalar, Tensor};

pub const QMAX: i8 = 127;

/// int8 codes with one positive scale; `value ≈ code * scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantTensor<S> {
    shape: Vec<usize>,
    values: Vec<i8>,
    scale: S,
}

impl<S: Scalar> QuantTensor<S> {
    pub fn from_parts(shape: Vec<usize>, values: Vec<i8>, scale: S) -> Result<Self> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::Shape { op: "quant_tensor", detail: format!("{shape:?} vs {} codes", values.len()) });
        }
        if !(scale > S::zero()) || values.iter().any(|&v| v < -QMAX) {
            return Err(Error::Validation("quantized tensor needs positive scale and codes in [-127, 127]".into()));
        }
        Ok(Self { shape, values, scale })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn scale(&self) -> S {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `max|w| / 127`, or the smallest positive value for an all-zero tensor.
pub fn symmetric_scale<S: Scalar>(w: &Tensor<S>) -> S {
    let m = w.max_abs();
    if m > S::zero() {
        m / S::lit(127.0)
    } else {
        S::min_positive_value()
    }
}

fn code<S: Scalar>(x: S, scale: S) -> i8 {
    // Float::round rounds half away from zero
    let q = (x / scale).round();
    let q = q.max(S::lit(-127.0)).min(S::lit(127.0));
    q.to_i8().unwrap_or(0)
}

/// Quantize∘dequantize of one value at `scale`.
pub fn fake_quant_value<S: Scalar>(x: S, scale: S) -> S {
    S::lit(code(x, scale) as f64) * scale
}

pub fn quantize_tensor<S: Scalar>(w: &Tensor<S>) -> Result<QuantTensor<S>> {
    w.ensure_finite("quantize_tensor input")?;
    let scale = symmetric_scale(w);
    Ok(quantize_with_scale(w, scale))
}

fn quantize_with_scale<S: Scalar>(w: &Tensor<S>, scale: S) -> QuantTensor<S> {
    QuantTensor {
        shape: w.shape().to_vec(),
        values: w.data().iter().map(|&x| code(x, scale)).collect(),
        scale,
    }
}

pub fn dequantize<S: Scalar>(q: &QuantTensor<S>) -> Tensor<S> {
    let data = q.values.iter().map(|&v| S::lit(v as f64) * q.scale).collect();
    Tensor::new(q.shape.clone(), data).expect("quant tensor shape is consistent")
}

/// Quantizes like [`quantize_tensor`] but with the scale rounded to the
/// nearest 32-bit float, the precision checkpoints store.
pub fn quantize_tensor_storable<S: Scalar>(w: &Tensor<S>) -> Result<QuantTensor<S>> {
    w.ensure_finite("quantize_tensor input")?;
    let exact = symmetric_scale(w).to_f64_lossy();
    let mut scale = exact as f32;
    if !(scale > 0.0) {
        scale = f32::MIN_POSITIVE;
    }
    Ok(quantize_with_scale(w, S::lit(scale as f64)))
}

/// Weight matrices become int8 per tensor; embeddings, biases and
/// layer-norm parameters stay real.
pub fn quantize_model<S: Scalar>(model: &ModelState<S>) -> Result<ModelState<S>> {
    if model.precision() != Precision::Real {
        return Err(Error::Validation("model is already quantized".into()));
    }
    let mut out = model.clone();
    for p in out.params_mut() {
        if p.kind != ParamKind::Matrix {
            continue;
        }
        if let ParamValue::Real(t) = &p.value {
            p.value = ParamValue::Int8(quantize_tensor_storable(t)?);
        }
    }
    out.set_precision(Precision::Int8Weights);
    out.set_fake_quant(false);
    Ok(out)
}

/// Snaps every weight matrix onto its own int8 grid and keeps the model
/// real-valued, flagged for fake-quant training.
pub fn quantize_aware_init<S: Scalar>(model: &ModelState<S>) -> Result<ModelState<S>> {
    let mut out = model.clone();
    for p in out.params_mut() {
        if p.kind != ParamKind::Matrix {
            continue;
        }
        if let ParamValue::Real(t) = &mut p.value {
            // a second pass settles the scale when 127*s/127 != s in floating point
            for _ in 0..4 {
                let s = symmetric_scale(t);
                let snapped = t.map(|x| fake_quant_value(x, s));
                if snapped == *t {
                    break;
                }
                *t = snapped;
            }
        }
    }
    out.set_fake_quant(true);
    Ok(out)
}
