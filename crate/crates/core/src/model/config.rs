use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::vocab;

/// Shape of the toy encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Desk-scale encoder: about 110k parameters.
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            d_model: 64,
            d_ff: 256,
            vocab: 64,
            max_len: 32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
        ];
        for (field, v) in dims {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(
                "heads",
                format!("d_model {} is not divisible by {}", self.d_model, self.heads),
            ));
        }
        if self.vocab <= vocab::FIRST_CONTENT {
            return Err(Error::config(
                "vocab",
                format!("needs more than {} ids for special tokens", vocab::FIRST_CONTENT),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Closed-form parameter count of [`crate::model::EncoderModel`].
    pub fn count_params(&self) -> usize {
        let (d, f, v, l) = (self.d_model, self.d_ff, self.vocab, self.max_len);
        let embeddings = v * d + l * d + vocab::SEGMENTS * d;
        let per_layer = 2 * (2 * d) + 4 * (d * d + d) + (d * f + f) + (f * d + d);
        let final_norm = 2 * d;
        let mlm = d * v + v;
        let classifier = d * 2 + 2;
        embeddings + self.layers * per_layer + final_norm + mlm + classifier
    }
}
