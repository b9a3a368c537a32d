use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{vocab, ModelConfig};
use crate::ndgrad::DiffArray;

pub const INIT_STD: f64 = 0.02;

/// What a parameter tensor does inside the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    TokenEmbedding,
    PositionEmbedding,
    SegmentEmbedding,
    AttentionQuery,
    AttentionKey,
    AttentionValue,
    AttentionOutput,
    FeedForwardUp,
    FeedForwardDown,
    Bias,
    NormGain,
    NormBias,
    MlmHead,
    ClassifierHead,
}

impl ParamRole {
    pub const ALL: [ParamRole; 14] = [
        Self::TokenEmbedding,
        Self::PositionEmbedding,
        Self::SegmentEmbedding,
        Self::AttentionQuery,
        Self::AttentionKey,
        Self::AttentionValue,
        Self::AttentionOutput,
        Self::FeedForwardUp,
        Self::FeedForwardDown,
        Self::Bias,
        Self::NormGain,
        Self::NormBias,
        Self::MlmHead,
        Self::ClassifierHead,
    ];

    pub const MASKABLE_DEFAULT: [ParamRole; 6] = [
        Self::AttentionQuery,
        Self::AttentionKey,
        Self::AttentionValue,
        Self::AttentionOutput,
        Self::FeedForwardUp,
        Self::FeedForwardDown,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub role: ParamRole,
    pub value: DiffArray,
}

impl Param {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Index of every tensor inside one encoder layer.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerIds {
    pub attn_norm: (usize, usize),
    pub query: (usize, usize),
    pub key: (usize, usize),
    pub value: (usize, usize),
    pub output: (usize, usize),
    pub ffn_norm: (usize, usize),
    pub up: (usize, usize),
    pub down: (usize, usize),
}

/// Where each tensor lives in [`EncoderModel::params`].
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub token: usize,
    pub position: usize,
    pub segment: usize,
    pub layers: Vec<LayerIds>,
    pub final_norm: (usize, usize),
    pub mlm: (usize, usize),
    pub classifier: (usize, usize),
}

/// Token/position/segment embeddings, pre-norm encoder layers, a masked-token
/// output projection and a 2-way classifier over the first position.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    config: ModelConfig,
    params: Vec<Param>,
}

fn sample_truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Parameter list in canonical order: (name, role, shape, init).
fn blueprint(cfg: &ModelConfig) -> Vec<(String, ParamRole, Vec<usize>, Init)> {
    let (d, f) = (cfg.d_model, cfg.d_ff);
    let mut out = vec![
        ("embeddings.token".to_string(), ParamRole::TokenEmbedding, vec![cfg.vocab, d], Init::Normal),
        ("embeddings.position".to_string(), ParamRole::PositionEmbedding, vec![cfg.max_len, d], Init::Normal),
        ("embeddings.segment".to_string(), ParamRole::SegmentEmbedding, vec![vocab::SEGMENTS, d], Init::Normal),
    ];
    for l in 0..cfg.layers {
        let p = |s: &str| format!("layer{l}.{s}");
        out.push((p("attn_norm.gain"), ParamRole::NormGain, vec![d], Init::Ones));
        out.push((p("attn_norm.bias"), ParamRole::NormBias, vec![d], Init::Zeros));
        for (name, role) in [
            ("attn.query", ParamRole::AttentionQuery),
            ("attn.key", ParamRole::AttentionKey),
            ("attn.value", ParamRole::AttentionValue),
            ("attn.output", ParamRole::AttentionOutput),
        ] {
            out.push((p(&format!("{name}.weight")), role, vec![d, d], Init::Normal));
            out.push((p(&format!("{name}.bias")), ParamRole::Bias, vec![d], Init::Zeros));
        }
        out.push((p("ffn_norm.gain"), ParamRole::NormGain, vec![d], Init::Ones));
        out.push((p("ffn_norm.bias"), ParamRole::NormBias, vec![d], Init::Zeros));
        out.push((p("ffn.up.weight"), ParamRole::FeedForwardUp, vec![d, f], Init::Normal));
        out.push((p("ffn.up.bias"), ParamRole::Bias, vec![f], Init::Zeros));
        out.push((p("ffn.down.weight"), ParamRole::FeedForwardDown, vec![f, d], Init::Normal));
        out.push((p("ffn.down.bias"), ParamRole::Bias, vec![d], Init::Zeros));
    }
    out.push(("final_norm.gain".into(), ParamRole::NormGain, vec![d], Init::Ones));
    out.push(("final_norm.bias".into(), ParamRole::NormBias, vec![d], Init::Zeros));
    out.push(("mlm.weight".into(), ParamRole::MlmHead, vec![d, cfg.vocab], Init::Normal));
    out.push(("mlm.bias".into(), ParamRole::MlmHead, vec![cfg.vocab], Init::Zeros));
    out.push(("classifier.weight".into(), ParamRole::ClassifierHead, vec![d, 2], Init::Normal));
    out.push(("classifier.bias".into(), ParamRole::ClassifierHead, vec![2], Init::Zeros));
    out
}

fn fill(rng: &mut ChaCha8Rng, init: Init, n: usize) -> Vec<f64> {
    match init {
        Init::Normal => (0..n).map(|_| sample_truncated_normal(rng, INIT_STD)).collect(),
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
    }
}

impl EncoderModel {
    /// Deterministic random initialization: truncated normal (±2σ, σ = 0.02)
    /// for matrices and embeddings, zeros for biases, ones for norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = blueprint(config)
            .into_iter()
            .map(|(name, role, shape, init)| {
                let n = shape.iter().product();
                let value = DiffArray::new(shape, fill(&mut rng, init, n))?;
                Ok(Param { name, role, value })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: *config,
            params,
        })
    }

    /// Rebuilds a model from named tensors, checking them against the
    /// blueprint for `config`.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<(String, DiffArray)>) -> Result<Self> {
        config.validate()?;
        let plan = blueprint(config);
        if plan.len() != tensors.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                plan.len(),
                tensors.len()
            )));
        }
        let params = plan
            .into_iter()
            .zip(tensors)
            .map(|((name, role, shape, _), (got_name, value))| {
                if name != got_name || value.shape() != shape.as_slice() {
                    return Err(Error::Format(format!(
                        "tensor `{got_name}` {:?} does not match `{name}` {shape:?}",
                        value.shape()
                    )));
                }
                Ok(Param { name, role, value })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: *config,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn count_params(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    /// Fresh classifier weights drawn from `seed`; used at the start of
    /// every fine-tuning run.
    pub fn reinit_classifier(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c1a5_51f1_e700);
        for p in &mut self.params {
            if p.role == ParamRole::ClassifierHead {
                let normal = p.value.ndim() == 2;
                for v in p.value.data_mut() {
                    *v = if normal {
                        sample_truncated_normal(&mut rng, INIT_STD)
                    } else {
                        0.0
                    };
                }
            }
        }
    }

    /// Zeroes the classifier head so it emits all-zero logits.
    pub fn zero_classifier(&mut self) {
        for p in &mut self.params {
            if p.role == ParamRole::ClassifierHead {
                p.value.data_mut().fill(0.0);
            }
        }
    }

    /// SHA-256 over every parameter name and raw value.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub(crate) fn layout(&self) -> Layout {
        let idx = |name: &str| {
            self.params
                .iter()
                .position(|p| p.name == name)
                .unwrap_or_else(|| panic!("blueprint is missing `{name}`"))
        };
        let pair = |base: &str, a: &str, b: &str| (idx(&format!("{base}.{a}")), idx(&format!("{base}.{b}")));
        let wb = |base: String| pair(&base, "weight", "bias");
        let gb = |base: String| pair(&base, "gain", "bias");
        Layout {
            token: idx("embeddings.token"),
            position: idx("embeddings.position"),
            segment: idx("embeddings.segment"),
            layers: (0..self.config.layers)
                .map(|l| LayerIds {
                    attn_norm: gb(format!("layer{l}.attn_norm")),
                    query: wb(format!("layer{l}.attn.query")),
                    key: wb(format!("layer{l}.attn.key")),
                    value: wb(format!("layer{l}.attn.value")),
                    output: wb(format!("layer{l}.attn.output")),
                    ffn_norm: gb(format!("layer{l}.ffn_norm")),
                    up: wb(format!("layer{l}.ffn.up")),
                    down: wb(format!("layer{l}.ffn.down")),
                })
                .collect(),
            final_norm: gb("final_norm".into()),
            mlm: wb("mlm".into()),
            classifier: wb("classifier".into()),
        }
    }
}

/// Elementwise `λ·random + (1−λ)·pretrained` over every parameter.
pub fn mix_weights(pretrained: &EncoderModel, random: &EncoderModel, lambda: f64) -> Result<EncoderModel> {
    if pretrained.config != random.config {
        return Err(Error::Contract(format!(
            "cannot mix {:?} with {:?}",
            pretrained.config, random.config
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config("lambda", format!("{lambda} is outside [0, 1]")));
    }
    let mut out = pretrained.clone();
    for (p, r) in out.params.iter_mut().zip(&random.params) {
        for (a, &b) in p.value.data_mut().iter_mut().zip(r.value.data()) {
            *a = lambda * b + (1.0 - lambda) * *a;
        }
    }
    Ok(out)
}
