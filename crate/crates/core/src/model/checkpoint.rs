//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes  "SLMFCKPT"
//! version  u32 LE
//! hlen     u64 LE   length of the JSON header
//! header   hlen bytes of UTF-8 JSON (format_version, config, precision, tensor directory)
//! payload  raw little-endian tensors; offsets in the directory are relative to here
//! ```
//!
//! Real tensors are stored as `f32`. Int8 tensors are stored as their codes
//! followed by one `f32` scale.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compressor::quant::QuantTensor;
use crate::error::{Error, Result};
use crate::numcore::{Scalar, Tensor};

use super::config::{ArchConfig, Precision};
use super::state::{param_layout, ModelState, NamedParam, ParamValue};

pub const MAGIC: &[u8; 8] = b"SLMFCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DType {
    F32,
    I8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ArchConfig,
    pub precision: Precision,
    #[serde(default)]
    pub fake_quant: bool,
    pub tensors: Vec<TensorEntry>,
}

fn ckpt_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Checkpoint(msg.into()))
}

pub fn to_bytes<S: Scalar>(model: &ModelState<S>) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(model.params().len());
    for p in model.params() {
        let offset = payload.len() as u64;
        let dtype = match &p.value {
            ParamValue::Real(t) => {
                for v in t.data() {
                    payload.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
                }
                DType::F32
            }
            ParamValue::Int8(q) => {
                payload.extend(q.values().iter().map(|&v| v as u8));
                payload.extend_from_slice(&(q.scale().to_f64_lossy() as f32).to_le_bytes());
                DType::I8
            }
        };
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            dtype,
            offset,
            nbytes: payload.len() as u64 - offset,
        });
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        precision: model.precision(),
        fake_quant: model.fake_quant(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize)> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return ckpt_err("bad magic");
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return ckpt_err(format!("unsupported format version {version}"));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let Some(json) = bytes.get(20..20 + hlen) else {
        return ckpt_err("truncated header");
    };
    let header: CheckpointHeader = serde_json::from_slice(json)?;
    Ok((header, 20 + hlen))
}

pub fn from_bytes<S: Scalar>(bytes: &[u8]) -> Result<ModelState<S>> {
    let (header, start) = read_header(bytes)?;
    header.config.validate()?;
    let payload = &bytes[start..];
    let layout = param_layout(&header.config);
    if layout.len() != header.tensors.len() {
        return ckpt_err(format!("expected {} tensors, found {}", layout.len(), header.tensors.len()));
    }
    let mut params = Vec::with_capacity(layout.len());
    for ((name, kind, shape), e) in layout.into_iter().zip(&header.tensors) {
        if name != e.name || shape != e.shape {
            return ckpt_err(format!("tensor {} {:?} does not match layout {name} {shape:?}", e.name, e.shape));
        }
        let Some(raw) = payload.get(e.offset as usize..(e.offset + e.nbytes) as usize) else {
            return ckpt_err(format!("tensor {} out of bounds", e.name));
        };
        let n: usize = shape.iter().product();
        let value = match e.dtype {
            DType::F32 => {
                if raw.len() != 4 * n {
                    return ckpt_err(format!("tensor {} has {} bytes, expected {}", e.name, raw.len(), 4 * n));
                }
                let data = raw.chunks_exact(4).map(|c| S::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect();
                ParamValue::Real(Tensor::new(shape, data)?)
            }
            DType::I8 => {
                if raw.len() != n + 4 {
                    return ckpt_err(format!("tensor {} has {} bytes, expected {}", e.name, raw.len(), n + 4));
                }
                let values = raw[..n].iter().map(|&b| b as i8).collect();
                let scale = f32::from_le_bytes(raw[n..].try_into().unwrap());
                ParamValue::Int8(QuantTensor::from_parts(shape, values, S::lit(scale as f64))?)
            }
        };
        params.push(NamedParam { name, kind, value });
    }
    Ok(ModelState::from_parts(header.config, params, header.precision, header.fake_quant))
}

pub fn save<S: Scalar>(model: &ModelState<S>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = to_bytes(model)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load<S: Scalar>(path: impl AsRef<Path>) -> Result<ModelState<S>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compressor::quant::quantize_model;
    use crate::model::build_model;

    #[test]
    fn real_roundtrip_is_stable_after_f32_rounding() {
        let c = ArchConfig::encoder_classifier(2, 2, 4, 8, 20, 10, 2);
        let m = build_model::<f64>(&c, 5).unwrap();
        let bytes = to_bytes(&m).unwrap();
        let back: ModelState<f64> = from_bytes(&bytes).unwrap();
        assert_eq!(to_bytes(&back).unwrap(), bytes);
        let m32 = build_model::<f32>(&c, 5).unwrap();
        let back32: ModelState<f32> = from_bytes(&to_bytes(&m32).unwrap()).unwrap();
        assert_eq!(back32, m32);
    }

    #[test]
    fn int8_roundtrip_is_exact() {
        let c = ArchConfig::decoder_lm(1, 2, 4, 8, 20, 10);
        let q = quantize_model(&build_model::<f64>(&c, 9).unwrap()).unwrap();
        let back: ModelState<f64> = from_bytes(&to_bytes(&q).unwrap()).unwrap();
        for (a, b) in q.params().iter().zip(back.params()) {
            match (&a.value, &b.value) {
                (ParamValue::Int8(x), ParamValue::Int8(y)) => assert_eq!(x, y),
                (ParamValue::Real(x), ParamValue::Real(y)) => {
                    for (u, v) in x.data().iter().zip(y.data()) {
                        assert_eq!((*u as f32) as f64, *v);
                    }
                }
                _ => panic!("precision changed"),
            }
        }
    }

    #[test]
    fn corrupt_input_rejected() {
        assert!(from_bytes::<f64>(b"nope").is_err());
        let c = ArchConfig::decoder_lm(1, 2, 2, 4, 8, 8);
        let mut bytes = to_bytes(&build_model::<f64>(&c, 0).unwrap()).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(from_bytes::<f64>(&bytes).is_err());
    }
}
