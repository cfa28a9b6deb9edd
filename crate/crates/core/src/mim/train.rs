//! Masked image modeling pretraining loop against a frozen tokenizer.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mask::blockwise_mask;
use super::model::{mim_forward, MimConfig, MimModel};
use crate::checkpoint::{Checkpoint, RngState};
use crate::config::DataConfig;
use crate::data::{random_resized_crop, Corpus, CROP_RATIO, CROP_SCALE};
use crate::metrics::MetricsLog;
use crate::optim::{AdamW, OptimConfig};
use crate::tensor::{Graph, Tensor};
use crate::tokenizer::{as_divergence, check_geometry, TokenizerModel};
use crate::vit::patchify_batch;
use crate::{Error, Result};

pub const CHECKPOINT_KIND: &str = "mim";

fn default_batch() -> usize {
    16
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub seed: u64,
    pub steps: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
    #[serde(default = "default_true")]
    pub augment: bool,
    pub data: DataConfig,
    #[serde(default)]
    pub model: MimConfig,
    #[serde(default = "OptimConfig::pretrain_desk")]
    pub optim: OptimConfig,
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        self.data.validate()?;
        self.model.validate()?;
        self.optim.validate()
    }
}

/// One line of the per-step log. `aggregation_loss` is omitted when the
/// aggregation branch is disabled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MimStepRecord {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub main_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregation_loss: Option<f64>,
    pub mask_fraction: f64,
    pub grad_norm: f64,
}

/// Checks that a tokenizer can supply targets for this model and corpus.
pub fn check_tokenizer(config: &MimConfig, tokenizer: &TokenizerModel<f32>) -> Result<()> {
    let tp = tokenizer.config().patch;
    if tp != config.patch {
        return Err(Error::Geometry(format!(
            "tokenizer geometry {}x{}x{} with patch size {} does not match model geometry {}x{}x{} with patch size {}",
            tp.image_height,
            tp.image_width,
            tp.channels,
            tp.patch_size,
            config.patch.image_height,
            config.patch.image_width,
            config.patch.channels,
            config.patch.patch_size
        )));
    }
    let k = tokenizer.codebook.size();
    if k != config.codebook_size {
        return Err(Error::Geometry(format!(
            "tokenizer has {k} codes, model predicts {}",
            config.codebook_size
        )));
    }
    Ok(())
}

/// Single owner of the model, optimizer and run generator.
pub struct MimTrainer {
    pub config: PretrainConfig,
    pub model: MimModel<f32>,
    pub optimizer: AdamW<f32>,
    rng: ChaCha8Rng,
    step: u64,
}

impl MimTrainer {
    pub fn new(config: PretrainConfig) -> Result<Self> {
        config.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        let model = MimModel::new(&config.model, &mut init)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            optimizer: AdamW::new(config.optim),
            config,
            model,
            rng,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(CHECKPOINT_KIND)?;
        let config: PretrainConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| Error::Checkpoint(format!("config snapshot: {e}")))?;
        let mut t = Self::new(config)?;
        ckpt.load_params(&mut t.model.store)?;
        ckpt.load_optimizer(&mut t.optimizer)?;
        t.rng = ckpt
            .rng
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("missing rng state".into()))?
            .restore()?;
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(CHECKPOINT_KIND, self.step, serde_json::to_value(&self.config)?);
        c.rng = Some(RngState::capture(&self.rng));
        c.put_params(&self.model.store);
        c.put_optimizer(&self.optimizer);
        Ok(c)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn train_step(&mut self, train: &Corpus, tokenizer: &TokenizerModel<f32>) -> Result<MimStepRecord> {
        let step = self.step;
        self.train_step_inner(train, tokenizer)
            .map_err(|e| as_divergence(step + 1, e))
    }

    fn train_step_inner(&mut self, train: &Corpus, tokenizer: &TokenizerModel<f32>) -> Result<MimStepRecord> {
        let cfg = &self.config;
        let n_img = train.len();
        let b = cfg.batch_size.min(n_img);
        let idx = sample(&mut self.rng, n_img, b).into_vec();
        let mut images = Vec::with_capacity(b);
        for &i in &idx {
            let img: Tensor<f32> = train.image(i);
            images.push(if cfg.augment {
                random_resized_crop(&img, CROP_SCALE, CROP_RATIO, &mut self.rng)?
            } else {
                img
            });
        }
        let targets = tokenizer.assign(&images)?.indices;
        let grid = cfg.model.patch.grid();
        let mut mask = Vec::with_capacity(b * grid.0 * grid.1);
        for _ in 0..b {
            mask.extend(blockwise_mask(grid, &cfg.model.mask, &mut self.rng)?.mask);
        }
        let mask_fraction = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;

        let model = &mut self.model;
        let mut g = Graph::new();
        let patches = g.constant(patchify_batch(&images, &cfg.model.patch)?);
        let fwd = mim_forward(
            &mut g,
            &model.net,
            &model.store,
            patches,
            b,
            &mask,
            &targets,
            Some(&mut self.rng),
        )?;
        if !fwd.breakdown.total.is_finite() {
            return Err(Error::NonFinite("pretraining loss"));
        }
        let grads = g.backward(fwd.total)?;
        model.store.zero_grad();
        grads.accumulate_into(&mut model.store);
        let lr = cfg.optim.lr_at(self.step, cfg.steps);
        let grad_norm = self.optimizer.step(&mut model.store, &mut [], lr);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite("gradient norm"));
        }
        self.step += 1;
        Ok(MimStepRecord {
            step: self.step,
            lr,
            total: fwd.breakdown.total,
            main_loss: fwd.breakdown.main_loss,
            aggregation_loss: fwd.breakdown.aggregation_loss,
            mask_fraction,
            grad_norm,
        })
    }

    /// Trains up to `config.steps`; the tokenizer is only read.
    pub fn run(
        &mut self,
        train: &Corpus,
        tokenizer: &TokenizerModel<f32>,
        steps_log: &mut MetricsLog<MimStepRecord>,
        on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
    ) -> Result<()> {
        check_geometry(train, &self.config.model.patch)?;
        check_tokenizer(&self.config.model, tokenizer)?;
        if train.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        while self.step < self.config.steps {
            let rec = self.train_step(train, tokenizer)?;
            log::debug!("step {} loss {:.5}", rec.step, rec.total);
            if rec.step % 50 == 0 {
                log::info!("step {} total {:.4} main {:.4}", rec.step, rec.total, rec.main_loss);
            }
            steps_log.push(rec)?;
            if let Some(every) = self.config.checkpoint_every {
                if self.step % every == 0 {
                    on_checkpoint(&self.checkpoint()?)?;
                }
            }
        }
        steps_log.flush()
    }
}

/// Loads the model half of a pretraining checkpoint.
pub fn load_mim<T: crate::Scalar>(ckpt: &Checkpoint) -> Result<MimModel<T>> {
    ckpt.expect_kind(CHECKPOINT_KIND)?;
    let model_cfg = ckpt
        .config
        .get("model")
        .ok_or_else(|| Error::Checkpoint("config snapshot lacks a model section".into()))?;
    let config: MimConfig =
        serde_json::from_value(model_cfg.clone()).map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = MimModel::<T>::new(&config, &mut rng)?;
    ckpt.load_params(&mut model.store)?;
    Ok(model)
}
