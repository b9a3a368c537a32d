//! Fine-tuning by sparsification at desk scale.
//!
//! A small transformer encoder is pre-trained with a masked-token
//! objective, then adapted to a pair-classification task either by
//! training its weights or by learning binary masks over its frozen
//! (optionally quantized, optionally randomized) weights.

pub mod error;
pub mod harness;
mod io;
pub mod masking;
pub mod model;
pub mod ndgrad;
pub mod quantize;
pub mod tasks;

pub use error::{Error, Result};
pub use masking::{BinarizerConfig, BinaryMask, MaskedParameter, MaskingPolicy};
pub use model::{EncoderModel, MaskedModel, ModelConfig, ParamRole};
pub use quantize::{QuantScheme, QuantizedTensor};
