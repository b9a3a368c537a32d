//! Binary masks over frozen weights.
//!
//! A [`MaskedParameter`] keeps the frozen tensor `theta` together with a
//! real-valued score per element. The layer sees `theta ⊙ m` where
//! `m = binarize(scores)`; on the backward pass the binarizer is treated
//! as the identity, so the score gradient is `upstream ⊙ theta`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ParamRole;
use crate::ndgrad::{DiffArray, Tape, Var};

pub const DEFAULT_INIT_OFFSET: f64 = 0.05;

fn default_offset() -> f64 {
    DEFAULT_INIT_OFFSET
}

/// Rule turning real scores into a {0,1} mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BinarizerConfig {
    /// Keep elements whose score exceeds `tau`.
    Threshold {
        tau: f64,
        #[serde(default = "default_offset")]
        init_offset: f64,
    },
    /// Keep exactly `⌈keep_fraction · n⌉` highest-scoring elements per tensor.
    TopK { keep_fraction: f64 },
}

impl Default for BinarizerConfig {
    fn default() -> Self {
        Self::threshold(0.0)
    }
}

impl BinarizerConfig {
    pub fn threshold(tau: f64) -> Self {
        Self::Threshold {
            tau,
            init_offset: DEFAULT_INIT_OFFSET,
        }
    }

    pub fn top_k(keep_fraction: f64) -> Result<Self> {
        let cfg = Self::TopK { keep_fraction };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Threshold { tau, init_offset } => {
                if !tau.is_finite() {
                    return Err(Error::config("tau", "must be finite"));
                }
                if !(init_offset > 0.0 && init_offset.is_finite()) {
                    return Err(Error::config("init_offset", "must be positive"));
                }
            }
            Self::TopK { keep_fraction } => {
                if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
                    return Err(Error::config(
                        "keep_fraction",
                        format!("{keep_fraction} is outside (0, 1]"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Number of kept elements out of `n` for the top-k rule.
    pub fn kept_count(keep_fraction: f64, n: usize) -> usize {
        // Guard the product against float noise just above an integer.
        let raw = keep_fraction * n as f64;
        let k = (raw - 1e-9).ceil().max(0.0) as usize;
        k.min(n)
    }
}

/// Exactly-binary mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask(Vec<bool>);

impl BinaryMask {
    pub fn ones(n: usize) -> Self {
        Self(vec![true; n])
    }

    pub fn from_bools(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn count_zeros(&self) -> usize {
        self.len() - self.count_ones()
    }

    /// Fraction of zeros; 0 for an empty mask.
    pub fn sparsity(&self) -> f64 {
        if self.0.is_empty() {
            0.0
        } else {
            self.count_zeros() as f64 / self.len() as f64
        }
    }

    /// LSB-first: bit `i` of byte `b` holds element `8b + i`.
    pub fn pack(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.0.len().div_ceil(8)];
        for (i, &on) in self.0.iter().enumerate() {
            if on {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn unpack(bytes: &[u8], n: usize) -> Result<Self> {
        if bytes.len() != n.div_ceil(8) {
            return Err(Error::Format(format!(
                "{} mask bytes for {n} elements",
                bytes.len()
            )));
        }
        Ok(Self((0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()))
    }

    pub fn apply(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .zip(&self.0)
            .map(|(&w, &on)| if on { w } else { 0.0 })
            .collect()
    }
}

pub fn binarize(scores: &[f64], cfg: &BinarizerConfig) -> Result<BinaryMask> {
    cfg.validate()?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Data("non-finite mask score".into()));
    }
    match *cfg {
        BinarizerConfig::Threshold { tau, .. } => {
            Ok(BinaryMask(scores.iter().map(|&s| s > tau).collect()))
        }
        BinarizerConfig::TopK { keep_fraction } => {
            let k = BinarizerConfig::kept_count(keep_fraction, scores.len());
            let mut order: Vec<usize> = (0..scores.len()).collect();
            // Highest score first; equal scores keep the lowest flat index.
            let by_rank = |&a: &usize, &b: &usize| scores[b].total_cmp(&scores[a]).then(a.cmp(&b));
            if k > 0 && k < order.len() {
                order.select_nth_unstable_by(k - 1, by_rank);
            }
            let mut bits = vec![false; scores.len()];
            for &i in &order[..k] {
                bits[i] = true;
            }
            Ok(BinaryMask(bits))
        }
    }
}

/// Score gradient under the straight-through rule.
pub fn straight_through_grad(upstream: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
    if upstream.len() != theta.len() {
        return Err(Error::Dimension {
            op: "straight_through_grad",
            left: vec![upstream.len()],
            right: vec![theta.len()],
        });
    }
    Ok(upstream.iter().zip(theta).map(|(g, t)| g * t).collect())
}

/// Scores proportional to `|theta|`, scaled to mean 1. Threshold rules add
/// `tau + offset` so the initial mask is dense.
pub fn init_scores(theta: &[f64], cfg: &BinarizerConfig) -> Vec<f64> {
    let mean_abs = if theta.is_empty() {
        0.0
    } else {
        theta.iter().map(|v| v.abs()).sum::<f64>() / theta.len() as f64
    };
    let base = theta.iter().map(|v| if mean_abs > 0.0 { v.abs() / mean_abs } else { 0.0 });
    match *cfg {
        BinarizerConfig::Threshold { tau, init_offset } => {
            base.map(|s| s + tau + init_offset).collect()
        }
        BinarizerConfig::TopK { .. } => base.collect(),
    }
}

/// SHA-256 over the raw bits of a tensor.
pub fn tensor_digest(values: &[f64]) -> [u8; 32] {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_bits().to_le_bytes());
    }
    h.finalize().into()
}

/// Frozen weights, trainable scores and the rule that binarizes them.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedParameter {
    name: String,
    shape: Vec<usize>,
    theta: Vec<f64>,
    scores: Vec<f64>,
    binarizer: BinarizerConfig,
    mask: BinaryMask,
}

impl MaskedParameter {
    pub fn new(
        name: impl Into<String>,
        shape: Vec<usize>,
        theta: Vec<f64>,
        binarizer: BinarizerConfig,
    ) -> Result<Self> {
        if shape.iter().product::<usize>() != theta.len() {
            return Err(Error::Dimension {
                op: "MaskedParameter::new",
                left: shape,
                right: vec![theta.len()],
            });
        }
        binarizer.validate()?;
        let scores = init_scores(&theta, &binarizer);
        let mask = binarize(&scores, &binarizer)?;
        Ok(Self {
            name: name.into(),
            shape,
            theta,
            scores,
            binarizer,
            mask,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn binarizer(&self) -> &BinarizerConfig {
        &self.binarizer
    }

    pub fn mask(&self) -> &BinaryMask {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    /// Replaces the scores and re-derives the mask.
    pub fn set_scores(&mut self, scores: Vec<f64>) -> Result<()> {
        if scores.len() != self.theta.len() {
            return Err(Error::Dimension {
                op: "set_scores",
                left: self.shape.clone(),
                right: vec![scores.len()],
            });
        }
        self.mask = binarize(&scores, &self.binarizer)?;
        self.scores = scores;
        Ok(())
    }

    /// Mutable access for optimizers; call [`MaskedParameter::rebinarize`]
    /// afterwards.
    pub fn scores_mut(&mut self) -> &mut [f64] {
        &mut self.scores
    }

    pub fn rebinarize(&mut self) -> Result<()> {
        self.mask = binarize(&self.scores, &self.binarizer)?;
        Ok(())
    }

    /// Swaps in a new frozen tensor (e.g. its quantized version) and
    /// re-initializes scores from it.
    pub fn replace_theta(&mut self, theta: Vec<f64>) -> Result<()> {
        if theta.len() != self.theta.len() {
            return Err(Error::Dimension {
                op: "replace_theta",
                left: self.shape.clone(),
                right: vec![theta.len()],
            });
        }
        self.theta = theta;
        self.scores = init_scores(&self.theta, &self.binarizer);
        self.rebinarize()
    }

    /// `theta ⊙ mask`.
    pub fn effective(&self) -> Vec<f64> {
        self.mask.apply(&self.theta)
    }

    pub fn sparsity(&self) -> f64 {
        self.mask.sparsity()
    }

    pub fn theta_digest(&self) -> [u8; 32] {
        tensor_digest(&self.theta)
    }

    /// Puts the effective weight on `tape`. Returns `(weight, scores)`;
    /// gradients reach only the scores leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<(Var, Var)> {
        let scores = tape.param(DiffArray::new(self.shape.clone(), self.scores.clone())?);
        let value = DiffArray::new(self.shape.clone(), self.effective())?;
        let w = tape.straight_through(scores, value, self.theta.clone())?;
        Ok((w, scores))
    }

    pub fn export_mask(&self) -> MaskRecord {
        MaskRecord {
            name: self.name.clone(),
            len: self.mask.len() as u64,
            packed: self.mask.pack(),
        }
    }

    pub fn import_mask(&mut self, record: &MaskRecord) -> Result<()> {
        if record.len as usize != self.theta.len() {
            return Err(Error::Format(format!(
                "mask `{}` has {} elements, parameter `{}` has {}",
                record.name,
                record.len,
                self.name,
                self.theta.len()
            )));
        }
        self.mask = BinaryMask::unpack(&record.packed, self.theta.len())?;
        Ok(())
    }
}

/// `x · (theta ⊙ m) + bias` for a `[n, in]` input and `[in, out]` weight.
/// Returns the output and the scores leaf.
pub fn masked_forward(tape: &mut Tape, mp: &MaskedParameter, x: Var, bias: Option<Var>) -> Result<(Var, Var)> {
    let (w, scores) = mp.bind(tape)?;
    let mut y = tape.matmul(x, w)?;
    if let Some(b) = bias {
        y = tape.add_row(y, b)?;
    }
    Ok((y, scores))
}

/// One tensor's packed mask inside a mask file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskRecord {
    pub name: String,
    pub len: u64,
    pub packed: Vec<u8>,
}

impl MaskRecord {
    pub fn mask(&self) -> Result<BinaryMask> {
        BinaryMask::unpack(&self.packed, self.len as usize)
    }
}

pub const MASK_MAGIC: &[u8; 4] = b"MSK1";

/// `MSK1`, then per record: name length (u32 LE), UTF-8 name, element count
/// (u64 LE), `⌈n/8⌉` LSB-first packed bytes.
pub fn encode_mask_file(records: &[MaskRecord]) -> Vec<u8> {
    let mut out = MASK_MAGIC.to_vec();
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.extend_from_slice(&r.len.to_le_bytes());
        out.extend_from_slice(&r.packed);
    }
    out
}

pub fn decode_mask_file(bytes: &[u8]) -> Result<Vec<MaskRecord>> {
    let mut rd = crate::io::ByteReader::new(bytes);
    if rd.take(4)? != MASK_MAGIC {
        return Err(Error::Format("missing MSK1 magic".into()));
    }
    let mut records = Vec::new();
    while !rd.is_done() {
        let name_len = rd.u32()? as usize;
        let name = rd.string(name_len)?;
        let len = rd.u64()?;
        let packed = rd.take((len as usize).div_ceil(8))?.to_vec();
        records.push(MaskRecord { name, len, packed });
    }
    Ok(records)
}

/// Which parameter roles carry masks. Everything else is exempt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskingPolicy {
    masked: BTreeSet<ParamRole>,
}

impl Default for MaskingPolicy {
    /// All attention projections and feed-forward matrices.
    fn default() -> Self {
        Self::new(ParamRole::MASKABLE_DEFAULT)
    }
}

impl MaskingPolicy {
    pub fn new(roles: impl IntoIterator<Item = ParamRole>) -> Self {
        Self {
            masked: roles.into_iter().collect(),
        }
    }

    pub fn exempt_all() -> Self {
        Self::new([])
    }

    pub fn is_masked(&self, role: ParamRole) -> bool {
        self.masked.contains(&role)
    }

    pub fn is_exempt(&self, role: ParamRole) -> bool {
        !self.is_masked(role)
    }

    pub fn masked_roles(&self) -> impl Iterator<Item = ParamRole> + '_ {
        self.masked.iter().copied()
    }
}

/// Overall fraction of zeros across a set of masks.
pub fn overall_sparsity<'a>(params: impl IntoIterator<Item = &'a MaskedParameter>) -> f64 {
    let (zeros, total) = params.into_iter().fold((0usize, 0usize), |(z, t), p| {
        (z + p.mask.count_zeros(), t + p.len())
    });
    if total == 0 {
        0.0
    } else {
        zeros as f64 / total as f64
    }
}
