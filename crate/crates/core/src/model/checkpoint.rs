//! `CKPT` files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CKPT"  u32 version
//! config: layers heads d_model d_ff vocab max_len seed   (7 × u64)
//! u32 tensor count
//! per tensor:
//!   u8 kind (0 = f64, 1 = quantized)
//!   u32 name length, name bytes
//!   u32 ndim, ndim × u64 dims
//!   kind 0: n × f64
//!   kind 1: u8 bits, f64 scale, ⌈n·bits/8⌉ packed code bytes
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::ByteReader;
use crate::model::masked::MaskedModel;
use crate::model::params::EncoderModel;
use crate::model::ModelConfig;
use crate::ndgrad::DiffArray;
use crate::quantize::{dequantize, QuantScheme, QuantizedTensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorRecord {
    Dense(DiffArray),
    Quantized(QuantizedTensor),
}

impl TensorRecord {
    pub fn to_dense(&self) -> Result<DiffArray> {
        match self {
            Self::Dense(a) => Ok(a.clone()),
            Self::Quantized(q) => DiffArray::new(q.shape().to_vec(), dequantize(q)),
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            Self::Dense(a) => a.shape(),
            Self::Quantized(q) => q.shape(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<(String, TensorRecord)>,
}

impl Checkpoint {
    pub fn from_model(model: &EncoderModel) -> Self {
        Self {
            config: *model.config(),
            tensors: model
                .params()
                .iter()
                .map(|p| (p.name.clone(), TensorRecord::Dense(p.value.clone())))
                .collect(),
        }
    }

    /// Frozen base of a masked model; quantized tensors are stored as codes.
    pub fn from_masked(model: &MaskedModel) -> Self {
        let quant = model.quantized_tensors();
        Self {
            config: *model.base().config(),
            tensors: model
                .base()
                .params()
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let rec = match quant.and_then(|q| q[i].as_ref()) {
                        Some(q) => TensorRecord::Quantized(q.clone()),
                        None => TensorRecord::Dense(p.value.clone()),
                    };
                    (p.name.clone(), rec)
                })
                .collect(),
        }
    }

    pub fn to_model(&self) -> Result<EncoderModel> {
        let tensors = self
            .tensors
            .iter()
            .map(|(n, r)| Ok((n.clone(), r.to_dense()?)))
            .collect::<Result<_>>()?;
        EncoderModel::from_tensors(&self.config, tensors)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let c = &self.config;
        for v in [c.layers, c.heads, c.d_model, c.d_ff, c.vocab, c.max_len] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&c.seed.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, rec) in &self.tensors {
            out.push(match rec {
                TensorRecord::Dense(_) => 0,
                TensorRecord::Quantized(_) => 1,
            });
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let shape = rec.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match rec {
                TensorRecord::Dense(a) => {
                    for v in a.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                TensorRecord::Quantized(q) => {
                    out.push(q.bits());
                    out.extend_from_slice(&q.scale().to_le_bytes());
                    out.extend_from_slice(&q.pack_codes());
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut rd = ByteReader::new(bytes);
        if rd.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("missing CKPT magic".into()));
        }
        let version = rd.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = rd.u64()? as usize;
        }
        let config = ModelConfig {
            layers: dims[0],
            heads: dims[1],
            d_model: dims[2],
            d_ff: dims[3],
            vocab: dims[4],
            max_len: dims[5],
            seed: rd.u64()?,
        };
        config.validate()?;
        let count = rd.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let kind = rd.u8()?;
            let name_len = rd.u32()? as usize;
            let name = rd.string(name_len)?;
            let ndim = rd.u32()? as usize;
            let shape = (0..ndim).map(|_| Ok(rd.u64()? as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let rec = match kind {
                0 => {
                    let data = (0..n).map(|_| rd.f64()).collect::<Result<Vec<_>>>()?;
                    TensorRecord::Dense(DiffArray::new(shape, data)?)
                }
                1 => {
                    let scheme = QuantScheme::new(rd.u8()?).map_err(|e| Error::Format(e.to_string()))?;
                    let scale = rd.f64()?;
                    let packed = rd.take((n * scheme.bits() as usize).div_ceil(8))?;
                    let codes = QuantizedTensor::unpack_codes(packed, n, scheme)?;
                    TensorRecord::Quantized(QuantizedTensor::from_parts(shape, codes, scale, scheme)?)
                }
                k => return Err(Error::Format(format!("unknown tensor kind {k}"))),
            };
            tensors.push((name, rec));
        }
        if !rd.is_done() {
            return Err(Error::Format("trailing bytes after last tensor".into()));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// SHA-256 of the encoded bytes.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.encode()).into()
    }
}
