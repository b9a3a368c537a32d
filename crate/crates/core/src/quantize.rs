//! Per-tensor k-bit quantization of frozen weights.
//!
//! For `bits >= 2` the scheme is symmetric uniform: `scale = max|w| / Q`
//! with `Q = 2^(bits-1) - 1`, codes `round(w / scale)` clamped to `[-Q, Q]`.
//! At one bit it degenerates to sign quantization with `scale = mean|w|`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bit width of a per-tensor quantization scheme; one of 1, 2, 4 or 8.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct QuantScheme {
    bits: u8,
}

impl QuantScheme {
    pub const LEVELS: [u8; 4] = [8, 4, 2, 1];

    pub fn new(bits: u8) -> Result<Self> {
        if Self::LEVELS.contains(&bits) {
            Ok(Self { bits })
        } else {
            Err(Error::config("bits", format!("{bits} is not one of 1, 2, 4, 8")))
        }
    }

    pub fn bits(self) -> u8 {
        self.bits
    }

    /// Largest code magnitude for the symmetric schemes.
    pub fn max_code(self) -> i32 {
        (1i32 << (self.bits - 1)) - 1
    }
}

impl TryFrom<u8> for QuantScheme {
    type Error = Error;

    fn try_from(bits: u8) -> Result<Self> {
        Self::new(bits)
    }
}

impl From<QuantScheme> for u8 {
    fn from(s: QuantScheme) -> u8 {
        s.bits
    }
}

/// Integer codes plus a single scale standing in for a real tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    codes: Vec<i8>,
    scale: f64,
    scheme: QuantScheme,
}

impl QuantizedTensor {
    /// Reassembles a quantized tensor, validating codes against the scheme.
    pub fn from_parts(shape: Vec<usize>, codes: Vec<i8>, scale: f64, scheme: QuantScheme) -> Result<Self> {
        if shape.iter().product::<usize>() != codes.len() {
            return Err(Error::Dimension {
                op: "QuantizedTensor::from_parts",
                left: shape,
                right: vec![codes.len()],
            });
        }
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(Error::Data(format!("invalid scale {scale}")));
        }
        let ok = if scheme.bits == 1 {
            codes.iter().all(|&c| c == 1 || c == -1)
        } else {
            let q = scheme.max_code();
            codes.iter().all(|&c| (c as i32).abs() <= q)
        };
        if !ok {
            return Err(Error::Data(format!(
                "codes out of range for {}-bit scheme",
                scheme.bits
            )));
        }
        Ok(Self {
            shape,
            codes,
            scale,
            scheme,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn scheme(&self) -> QuantScheme {
        self.scheme
    }

    pub fn bits(&self) -> u8 {
        self.scheme.bits
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Codes as `bits`-wide two's-complement fields, LSB-first within each
    /// byte. One-bit codes store `+1` as 1 and `-1` as 0.
    pub fn pack_codes(&self) -> Vec<u8> {
        let bits = self.scheme.bits as usize;
        let mut out = vec![0u8; (self.codes.len() * bits).div_ceil(8)];
        let field_mask = ((1u16 << bits) - 1) as u8;
        for (i, &c) in self.codes.iter().enumerate() {
            let field = if bits == 1 {
                u8::from(c > 0)
            } else {
                (c as u8) & field_mask
            };
            let pos = i * bits;
            out[pos / 8] |= field << (pos % 8);
        }
        out
    }

    /// Inverse of [`QuantizedTensor::pack_codes`].
    pub fn unpack_codes(bytes: &[u8], count: usize, scheme: QuantScheme) -> Result<Vec<i8>> {
        let bits = scheme.bits as usize;
        if bytes.len() != (count * bits).div_ceil(8) {
            return Err(Error::Format(format!(
                "{} code bytes for {count} {bits}-bit codes",
                bytes.len()
            )));
        }
        let field_mask = ((1u16 << bits) - 1) as u8;
        Ok((0..count)
            .map(|i| {
                let pos = i * bits;
                let field = (bytes[pos / 8] >> (pos % 8)) & field_mask;
                if bits == 1 {
                    if field == 1 {
                        1
                    } else {
                        -1
                    }
                } else if bits == 8 {
                    field as i8
                } else {
                    // sign-extend the low `bits` bits
                    ((field << (8 - bits)) as i8) >> (8 - bits)
                }
            })
            .collect())
    }
}

pub fn quantize(w: &[f64], shape: &[usize], scheme: QuantScheme) -> Result<QuantizedTensor> {
    if shape.iter().product::<usize>() != w.len() {
        return Err(Error::Dimension {
            op: "quantize",
            left: shape.to_vec(),
            right: vec![w.len()],
        });
    }
    if let Some(bad) = w.iter().find(|v| !v.is_finite()) {
        return Err(Error::Data(format!("cannot quantize non-finite value {bad}")));
    }
    let (codes, scale) = if scheme.bits == 1 {
        let scale = if w.is_empty() {
            0.0
        } else {
            w.iter().map(|v| v.abs()).sum::<f64>() / w.len() as f64
        };
        let codes = w.iter().map(|&v| if v >= 0.0 { 1 } else { -1 }).collect();
        (codes, scale)
    } else {
        let q = scheme.max_code() as f64;
        let max = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = max / q;
        let codes = if scale == 0.0 {
            vec![0; w.len()]
        } else {
            w.iter()
                .map(|&v| (v / scale).round().clamp(-q, q) as i8)
                .collect()
        };
        (codes, scale)
    };
    Ok(QuantizedTensor {
        shape: shape.to_vec(),
        codes,
        scale,
        scheme,
    })
}

pub fn dequantize(q: &QuantizedTensor) -> Vec<f64> {
    q.codes.iter().map(|&c| c as f64 * q.scale).collect()
}

/// Exact storage: one code per element plus a 64-bit scale.
pub fn storage_bits(q: &QuantizedTensor) -> u64 {
    q.codes.len() as u64 * q.scheme.bits as u64 + 64
}
