//! Vector-quantized knowledge distillation tokenizer.
//!
//! The encoder ViT's patch outputs are layer-normalized and projected to
//! the code dimension, quantized against the codebook with a straight-through
//! gradient, projected back up and decoded by a shallow Transformer that
//! regresses a frozen teacher's per-patch features under a cosine loss.

mod model;
mod teacher;
mod train;

pub use model::{
    vqkd_forward, CodebookConfig, CodebookUpdate, DecoderConfig, TokenGrid, TokenizerConfig, TokenizerModel,
    TokenizerNet, VqkdForward, VqkdLossBreakdown, VqkdOptions,
};
pub use teacher::{
    make_frozen_teacher, parse_teacher_id, resolve_teacher, FrozenVitTeacher, TeacherOracle, TEACHER_INIT_STD,
    TEACHER_LAYERS,
};
pub use train::{
    check_geometry, evaluate_tokenizer, TokenizerEvalRecord, TokenizerStepRecord, TokenizerTrainConfig,
    TokenizerTrainer, CHECKPOINT_KIND,
};
pub(crate) use train::as_divergence;

use crate::checkpoint::Checkpoint;
use crate::tensor::Scalar;
use crate::{Error, Result};

/// Loads the model half of a tokenizer checkpoint (optimizer state ignored).
pub fn load_tokenizer<T: Scalar>(ckpt: &Checkpoint) -> Result<TokenizerModel<T>> {
    ckpt.expect_kind(CHECKPOINT_KIND)?;
    let model_cfg = ckpt
        .config
        .get("model")
        .ok_or_else(|| Error::Checkpoint("config snapshot lacks a model section".into()))?;
    let config: TokenizerConfig =
        serde_json::from_value(model_cfg.clone()).map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut model = TokenizerModel::<T>::new(&config, &mut rng)?;
    ckpt.load_params(&mut model.store)?;
    model.codebook = ckpt.load_codebook(config.codebook.decay)?;
    Ok(model)
}
