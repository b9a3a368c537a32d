use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::BinarizerConfig;
use crate::model::ModelConfig;
use crate::quantize::QuantScheme;
use crate::tasks::TaskConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    FinetuneWeights,
    FinetuneStructure,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::FinetuneWeights => "finetune_weights",
            Self::FinetuneStructure => "finetune_structure",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const WEIGHTS_LR: f64 = 1e-3;
pub const SCORES_LR: f64 = 0.3;

/// Optimizer settings shared by every fine-tuning run in a cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Learning rate for weights (weights mode) or scores (structure mode);
    /// [`WEIGHTS_LR`] or [`SCORES_LR`] when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    /// Learning rate for the classifier head in both modes.
    pub head_lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Dev-set evaluation interval; the final step is always evaluated.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: None,
            head_lr: 1e-2,
            steps: 800,
            batch_size: 32,
            eval_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn lr_for(&self, mode: Mode) -> f64 {
        self.lr.unwrap_or(match mode {
            Mode::FinetuneWeights => WEIGHTS_LR,
            Mode::FinetuneStructure => SCORES_LR,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("lr", self.lr.unwrap_or(WEIGHTS_LR)), ("head_lr", self.head_lr)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(field, format!("{v} must be positive")));
            }
        }
        for (field, v) in [
            ("steps", self.steps),
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        Ok(())
    }
}

/// One grid cell: a fine-tuning mode plus its knobs, repeated over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bits: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keep_fraction: Option<f64>,
    pub seeds: Vec<u64>,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl ExperimentSpec {
    pub fn new(mode: Mode, seeds: Vec<u64>) -> Self {
        Self {
            mode,
            bits: None,
            lambda: None,
            keep_fraction: None,
            seeds,
            train: TrainConfig::default(),
        }
    }

    pub fn with_bits(mut self, bits: u8) -> Self {
        self.bits = Some(bits);
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = Some(lambda);
        self
    }

    pub fn with_keep(mut self, keep_fraction: f64) -> Self {
        self.keep_fraction = Some(keep_fraction);
        self
    }

    pub fn with_train(mut self, train: TrainConfig) -> Self {
        self.train = train;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if let Some(b) = self.bits {
            QuantScheme::new(b)?;
        }
        if let Some(l) = self.lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::config("lambda", format!("{l} is outside [0, 1]")));
            }
        }
        if let Some(k) = self.keep_fraction {
            BinarizerConfig::top_k(k)?;
        }
        if self.mode == Mode::FinetuneWeights {
            if self.bits.is_some() {
                return Err(Error::config("bits", "quantization applies to structure mode only"));
            }
            if self.keep_fraction.is_some() {
                return Err(Error::config("keep_fraction", "masks apply to structure mode only"));
            }
        }
        self.train.validate()
    }

    pub fn scheme(&self) -> Option<QuantScheme> {
        self.bits.and_then(|b| QuantScheme::new(b).ok())
    }

    pub fn binarizer(&self) -> BinarizerConfig {
        match self.keep_fraction {
            Some(k) => BinarizerConfig::TopK { keep_fraction: k },
            None => BinarizerConfig::default(),
        }
    }
}

/// Masked-token pre-training settings, including the corpus to draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub corpus_seed: u64,
    pub corpus_size: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mask_prob: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            corpus_seed: 0,
            corpus_size: 6000,
            steps: 1500,
            batch_size: 32,
            lr: 2e-3,
            mask_prob: 0.15,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.corpus_size < 2 {
            return Err(Error::config("corpus_size", "needs at least 2 documents"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr", format!("{} must be positive", self.lr)));
        }
        if !(self.mask_prob > 0.0 && self.mask_prob <= 1.0) {
            return Err(Error::config("mask_prob", format!("{} is outside (0, 1]", self.mask_prob)));
        }
        Ok(())
    }
}

/// Where the pre-trained weights of a sweep come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Pretrain(PretrainConfig),
    Checkpoint(PathBuf),
}

/// A full experiment file: model, task, weights source and grid cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub task: TaskConfig,
    pub source: Source,
    pub cells: Vec<ExperimentSpec>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.task.grammar.check_model(&self.model)?;
        if let Source::Pretrain(p) = &self.source {
            p.validate()?;
        }
        if self.cells.is_empty() {
            return Err(Error::config("cells", "the grid is empty"));
        }
        self.cells.iter().try_for_each(ExperimentSpec::validate)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec = Self::from_json(&text)?;
        if let Source::Checkpoint(ck) = &mut spec.source {
            if ck.is_relative() {
                if let Some(dir) = path.parent() {
                    *ck = dir.join(&*ck);
                }
            }
        }
        Ok(spec)
    }
}

/// Mixes a run seed with a stream id so independent draws never share state.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
