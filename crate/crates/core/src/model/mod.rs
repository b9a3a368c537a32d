//! The transformer encoder, its parameters and its masked variant.

mod batch;
mod checkpoint;
mod config;
mod encoder;
mod masked;
mod params;
pub mod vocab;


pub use batch::{pack_pair, segment_ids, MlmBatch, TokenBatch};
pub use checkpoint::{Checkpoint, TensorRecord, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use encoder::{Bindings, Encoded};
pub use masked::{apply_masking, MaskedModel};
pub use params::{mix_weights, EncoderModel, Param, ParamRole, INIT_STD};
