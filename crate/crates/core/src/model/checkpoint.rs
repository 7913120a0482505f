//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"TPCK"
//! version u32
//! hlen    u64                 length of the JSON header in bytes
//! header  JSON { config, dtype, tensors: [{ name, shape, offset }] }
//! data    row-major tensor payloads, `offset` counted from the start of data
//! ```
//!
//! Tensors appear in the order of [`TinyModel::tensors`]. Layer widths are
//! taken from the stored shapes, so compacted models round-trip as well.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{LayerWeights, ModelConfig, TinyModel};
use crate::error::{Error, Result};
use crate::fingerprint::fingerprint;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    dtype: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

impl<F: Scalar> TinyModel<F> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut data = Vec::with_capacity(self.param_count() * F::BYTES);
        let mut entries = Vec::new();
        for (name, t) in self.tensors() {
            entries.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                offset: data.len(),
            });
            for &v in t.iter() {
                v.write_le(&mut data);
            }
        }
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            dtype: F::DTYPE.to_string(),
            tensors: entries,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + data.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Format(format!("checkpoint: {m}"));
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(fmt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(fmt(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header_end = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| fmt("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])?;
        let data = &bytes[header_end..];
        let width = match header.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(fmt(&format!("unknown dtype {other}"))),
        };
        let read = |entry: &TensorEntry| -> Result<Vec<F>> {
            let n: usize = entry.shape.iter().product();
            let end = entry.offset + n * width;
            if end > data.len() {
                return Err(fmt(&format!("tensor {} is truncated", entry.name)));
            }
            Ok(data[entry.offset..end]
                .chunks_exact(width)
                .map(|c| match width {
                    4 => F::of(f32::read_le(c) as f64),
                    _ => F::of(f64::read_le(c)),
                })
                .collect())
        };

        let mut entries = header.tensors.iter();
        let mut next = |expected: &str| -> Result<(&TensorEntry, Vec<F>)> {
            let entry = entries
                .next()
                .ok_or_else(|| fmt(&format!("missing tensor {expected}")))?;
            if entry.name != expected {
                return Err(fmt(&format!("expected tensor {expected}, found {}", entry.name)));
            }
            Ok((entry, read(entry)?))
        };
        let matrix = |(e, v): (&TensorEntry, Vec<F>)| -> Result<Array2<F>> {
            match e.shape.as_slice() {
                &[r, c] => Ok(Array2::from_shape_vec((r, c), v).expect("length checked")),
                _ => Err(fmt(&format!("tensor {} is not a matrix", e.name))),
            }
        };
        let vector = |(e, v): (&TensorEntry, Vec<F>)| -> Result<Array1<F>> {
            match e.shape.as_slice() {
                &[_] => Ok(Array1::from(v)),
                _ => Err(fmt(&format!("tensor {} is not a vector", e.name))),
            }
        };

        let config = header.config;
        let embed = matrix(next("embed")?)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = |n: &str| format!("layers.{i}.{n}");
            layers.push(LayerWeights {
                attn_norm: vector(next(&p("attn_norm"))?)?,
                wq: matrix(next(&p("wq"))?)?,
                wk: matrix(next(&p("wk"))?)?,
                wv: matrix(next(&p("wv"))?)?,
                wo: matrix(next(&p("wo"))?)?,
                mlp_norm: vector(next(&p("mlp_norm"))?)?,
                w_gate: matrix(next(&p("w_gate"))?)?,
                w_up: matrix(next(&p("w_up"))?)?,
                w_down: matrix(next(&p("w_down"))?)?,
            });
        }
        let final_norm = vector(next("final_norm")?)?;
        let head = matrix(next("head")?)?;
        let model = Self {
            config,
            embed,
            layers,
            final_norm,
            head,
        };
        model.validate()?;
        Ok(model)
    }

    /// Hash of the serialized checkpoint.
    pub fn fingerprint(&self) -> String {
        fingerprint(&self.to_bytes())
    }
}

pub fn save_checkpoint<F: Scalar>(model: &TinyModel<F>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path.as_ref(), model.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint<F: Scalar>(path: impl AsRef<Path>) -> Result<TinyModel<F>> {
    let path = path.as_ref();
    let bytes = fs::read(path)
        .map_err(|e| Error::Missing(format!("model checkpoint {}: {e}", path.display())))?;
    TinyModel::from_bytes(&bytes)
}
