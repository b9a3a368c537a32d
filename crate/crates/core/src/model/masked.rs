use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::masking::{overall_sparsity, BinarizerConfig, MaskRecord, MaskedParameter, MaskingPolicy};
use crate::model::encoder::Bindings;
use crate::model::params::{EncoderModel, ParamRole};
use crate::ndgrad::Tape;
use crate::quantize::{dequantize, quantize, QuantScheme, QuantizedTensor};

/// An encoder whose policy-selected weights are frozen behind masks.
///
/// Masking consumes the dense model, so a model cannot be masked twice.
#[derive(Debug, Clone)]
pub struct MaskedModel {
    base: EncoderModel,
    policy: MaskingPolicy,
    slots: Vec<Option<MaskedParameter>>,
    quantized: Option<Vec<Option<QuantizedTensor>>>,
}

pub fn apply_masking(model: EncoderModel, policy: &MaskingPolicy, binarizer: BinarizerConfig) -> Result<MaskedModel> {
    binarizer.validate()?;
    let slots = model
        .params()
        .iter()
        .map(|p| {
            policy
                .is_masked(p.role)
                .then(|| MaskedParameter::new(p.name.clone(), p.value.shape().to_vec(), p.value.data().to_vec(), binarizer))
                .transpose()
        })
        .collect::<Result<_>>()?;
    Ok(MaskedModel {
        base: model,
        policy: policy.clone(),
        slots,
        quantized: None,
    })
}

impl MaskedModel {
    /// Replaces every masked `theta` by `dequantize(quantize(theta))` and
    /// re-initializes its scores from the quantized values.
    pub fn apply_quantization(&mut self, scheme: QuantScheme) -> Result<()> {
        if self.quantized.is_some() {
            return Err(Error::Contract("quantization already applied".into()));
        }
        let mut quantized = Vec::with_capacity(self.slots.len());
        for (slot, param) in self.slots.iter_mut().zip(self.base.params_mut()) {
            match slot {
                Some(mp) => {
                    let q = quantize(mp.theta(), mp.shape(), scheme)?;
                    let deq = dequantize(&q);
                    param.value.data_mut().copy_from_slice(&deq);
                    mp.replace_theta(deq)?;
                    quantized.push(Some(q));
                }
                None => quantized.push(None),
            }
        }
        self.quantized = Some(quantized);
        Ok(())
    }

    pub fn base(&self) -> &EncoderModel {
        &self.base
    }

    pub fn policy(&self) -> &MaskingPolicy {
        &self.policy
    }

    pub fn quantization(&self) -> Option<QuantScheme> {
        self.quantized
            .as_ref()
            .and_then(|qs| qs.iter().flatten().next().map(QuantizedTensor::scheme))
    }

    /// Quantized form of each masked tensor, aligned with the parameter list.
    pub fn quantized_tensors(&self) -> Option<&[Option<QuantizedTensor>]> {
        self.quantized.as_deref()
    }

    pub fn slots(&self) -> &[Option<MaskedParameter>] {
        &self.slots
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut [Option<MaskedParameter>], &mut [crate::model::Param]) {
        (&mut self.slots, self.base.params_mut())
    }

    pub fn masked_params(&self) -> impl Iterator<Item = &MaskedParameter> {
        self.slots.iter().flatten()
    }

    pub fn masked_params_mut(&mut self) -> impl Iterator<Item = &mut MaskedParameter> {
        self.slots.iter_mut().flatten()
    }

    pub fn masked_count(&self) -> usize {
        self.masked_params().map(MaskedParameter::len).sum()
    }

    pub fn sparsity(&self) -> f64 {
        overall_sparsity(self.masked_params())
    }

    /// Digest of all frozen tensors, in parameter order.
    pub fn theta_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for mp in self.masked_params() {
            h.update(mp.name().as_bytes());
            h.update(mp.theta_digest());
        }
        h.finalize().into()
    }

    /// Classifier parameters, which stay trainable in structure mode.
    pub fn head_mut(&mut self) -> impl Iterator<Item = (usize, &mut crate::model::Param)> {
        self.base
            .params_mut()
            .iter_mut()
            .enumerate()
            .filter(|(_, p)| p.role == ParamRole::ClassifierHead)
    }

    /// Puts the model on `tape`: masked tensors through the straight-through
    /// path, the classifier as trainable leaves when `train_head`, everything
    /// else as constants.
    pub fn bind(&self, tape: &mut Tape, train_head: bool) -> Result<Bindings> {
        let mut weights = Vec::with_capacity(self.slots.len());
        let mut leaves = Vec::with_capacity(self.slots.len());
        for (slot, p) in self.slots.iter().zip(self.base.params()) {
            match slot {
                Some(mp) => {
                    let (w, scores) = mp.bind(tape)?;
                    weights.push(w);
                    leaves.push(Some(scores));
                }
                None => {
                    let train = train_head && p.role == ParamRole::ClassifierHead;
                    let v = tape.leaf(p.value.clone().with_requires_grad(train));
                    weights.push(v);
                    leaves.push(train.then_some(v));
                }
            }
        }
        Ok(Bindings::new(weights, leaves))
    }

    /// Dense copy of the model with `theta ⊙ mask` baked in.
    pub fn to_dense(&self) -> EncoderModel {
        let mut out = self.base.clone();
        for (slot, p) in self.slots.iter().zip(out.params_mut()) {
            if let Some(mp) = slot {
                p.value.data_mut().copy_from_slice(&mp.effective());
            }
        }
        out
    }

    pub fn export_masks(&self) -> Vec<MaskRecord> {
        self.masked_params().map(MaskedParameter::export_mask).collect()
    }

    pub fn import_masks(&mut self, records: &[MaskRecord]) -> Result<()> {
        for mp in self.masked_params_mut() {
            let rec = records
                .iter()
                .find(|r| r.name == mp.name())
                .ok_or_else(|| Error::Format(format!("no mask record for `{}`", mp.name())))?;
            mp.import_mask(rec)?;
        }
        Ok(())
    }
}
