//! Masked image modeling: block-wise masking, prediction of tokenizer codes
//! at masked patches, and the CLS patch-aggregation objective.

mod mask;
mod model;
mod train;

pub use mask::{blockwise_mask, MaskBlock, MaskConfig, MaskSpec, MIN_ASPECT};
pub use model::{
    mim_forward, mim_loss, AggregationConfig, MimConfig, MimForward, MimLossBreakdown, MimModel, MimNet,
};
pub use train::{check_tokenizer, load_mim, MimStepRecord, MimTrainer, PretrainConfig, CHECKPOINT_KIND};
