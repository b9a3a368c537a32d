use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::spec::{ExperimentSpec, Mode};
use crate::masking::MaskingPolicy;
use crate::model::{apply_masking, EncoderModel, MaskedModel, ParamRole};
use crate::quantize::storage_bits;

pub const FLOAT_BITS: u64 = 64;

/// Bits needed to serve one more task on top of a shared base.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageReport {
    pub total_params: u64,
    pub masked_params: u64,
    pub head_params: u64,
    /// Stored once for all tasks.
    pub shared_base_bits: u64,
    /// Stored per task.
    pub per_task_bits: u64,
}

impl StorageReport {
    pub fn bits_per_param(&self) -> f64 {
        self.per_task_bits as f64 / self.total_params as f64
    }

    /// Total for `tasks` tasks sharing one base.
    pub fn total_bits(&self, tasks: u64) -> u64 {
        self.shared_base_bits + tasks * self.per_task_bits
    }
}

/// Structure mode: the base holds the (quantized) masked tensors plus every
/// exempt tensor except the head at full precision; each task stores one bit
/// per masked weight and its own full-precision head.
pub fn structure_storage(model: &MaskedModel) -> StorageReport {
    let quant = model.quantized_tensors();
    let mut r = StorageReport {
        total_params: 0,
        masked_params: 0,
        head_params: 0,
        shared_base_bits: 0,
        per_task_bits: 0,
    };
    for (i, (slot, p)) in model.slots().iter().zip(model.base().params()).enumerate() {
        let n = p.len() as u64;
        r.total_params += n;
        match slot {
            Some(_) => {
                r.masked_params += n;
                r.per_task_bits += n;
                r.shared_base_bits += match quant.and_then(|q| q[i].as_ref()) {
                    Some(q) => storage_bits(q),
                    None => FLOAT_BITS * n,
                };
            }
            None if p.role == ParamRole::ClassifierHead => {
                r.head_params += n;
                r.per_task_bits += FLOAT_BITS * n;
            }
            None => r.shared_base_bits += FLOAT_BITS * n,
        }
    }
    r
}

/// Weights mode: every task keeps a full-precision copy of the model.
pub fn weights_storage(model: &EncoderModel) -> StorageReport {
    let total = model.count_params() as u64;
    let head = model
        .params()
        .iter()
        .filter(|p| p.role == ParamRole::ClassifierHead)
        .map(|p| p.len() as u64)
        .sum();
    StorageReport {
        total_params: total,
        masked_params: 0,
        head_params: head,
        shared_base_bits: 0,
        per_task_bits: FLOAT_BITS * total,
    }
}

/// Storage breakdown for running `spec` on `model`; depends only on shapes
/// and the bit width, never on trained values.
pub fn storage_report(spec: &ExperimentSpec, model: &EncoderModel) -> Result<StorageReport> {
    spec.validate()?;
    match spec.mode {
        Mode::FinetuneWeights => Ok(weights_storage(model)),
        Mode::FinetuneStructure => {
            let mut masked = apply_masking(model.clone(), &MaskingPolicy::default(), spec.binarizer())?;
            if let Some(s) = spec.scheme() {
                masked.apply_quantization(s)?;
            }
            Ok(structure_storage(&masked))
        }
    }
}
