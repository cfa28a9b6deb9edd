//! Tokenizer training loop with checkpoint and resume.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{vqkd_forward, CodebookUpdate, TokenizerConfig, TokenizerModel, VqkdOptions};
use super::teacher::TeacherOracle;
use crate::checkpoint::{Checkpoint, RngState};
use crate::codebook::{usage_stats, CodeAssignment};
use crate::config::DataConfig;
use crate::data::{random_resized_crop, Corpus, CROP_RATIO, CROP_SCALE};
use crate::metrics::MetricsLog;
use crate::optim::{AdamW, ExtraParam, OptimConfig};
use crate::tensor::{Graph, Tensor};
use crate::vit::{patchify_batch, PatchifyConfig};
use crate::{Error, Result};

pub const CHECKPOINT_KIND: &str = "tokenizer";

fn default_batch() -> usize {
    16
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerTrainConfig {
    pub seed: u64,
    pub steps: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Steps between validation passes; one epoch when absent.
    #[serde(default)]
    pub eval_every: Option<u64>,
    /// Steps between periodic checkpoints; none when absent.
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
    /// Random resized crops on training images.
    #[serde(default = "default_true")]
    pub augment: bool,
    pub data: DataConfig,
    #[serde(default)]
    pub model: TokenizerConfig,
    #[serde(default = "OptimConfig::tokenizer_desk")]
    pub optim: OptimConfig,
}

impl TokenizerTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.eval_every == Some(0) || self.checkpoint_every == Some(0) {
            return Err(Error::Config("eval_every and checkpoint_every must be at least 1".into()));
        }
        self.data.validate()?;
        self.model.validate()?;
        self.optim.validate()
    }
}

/// One line of the per-step log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerStepRecord {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub cosine: f64,
    pub commitment: f64,
    pub codebook: f64,
    pub usage_batch: f64,
    pub grad_norm: f64,
}

/// One line of the validation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerEvalRecord {
    pub step: u64,
    pub epoch: u64,
    pub val_cosine: f64,
    pub val_usage: f64,
    pub val_used_codes: usize,
    pub val_perplexity: f64,
}

/// Checks that corpus images match the model geometry.
pub fn check_geometry(corpus: &Corpus, patch: &PatchifyConfig) -> Result<()> {
    let want = patch.image_shape();
    let got = [corpus.height, corpus.width, corpus.channels];
    if got != want {
        return Err(Error::Geometry(format!(
            "corpus images are {}x{}x{}, model expects {}x{}x{} (patch size {})",
            got[0], got[1], got[2], want[0], want[1], want[2], patch.patch_size
        )));
    }
    Ok(())
}

/// Maps numerical failures inside a step to a divergence diagnostic.
pub(crate) fn as_divergence(step: u64, e: Error) -> Error {
    match e {
        Error::NonFinite(_) | Error::DegenerateVector { .. } => Error::Divergence {
            step,
            detail: e.to_string(),
        },
        other => other,
    }
}

/// Single owner of the tokenizer, optimizer and run generator.
pub struct TokenizerTrainer {
    pub config: TokenizerTrainConfig,
    pub model: TokenizerModel<f32>,
    pub optimizer: AdamW<f32>,
    rng: ChaCha8Rng,
    step: u64,
}

impl TokenizerTrainer {
    /// Model weights come from `seed`; data order, crops and dropout from a
    /// separate stream of the same seed.
    pub fn new(config: TokenizerTrainConfig) -> Result<Self> {
        config.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        let model = TokenizerModel::new(&config.model, &mut init)?;
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
        let config: TokenizerTrainConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| Error::Checkpoint(format!("config snapshot: {e}")))?;
        let mut t = Self::new(config)?;
        ckpt.load_params(&mut t.model.store)?;
        t.model.codebook = ckpt.load_codebook(t.config.model.codebook.decay)?;
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
        c.put_codebook(&self.model.codebook);
        c.put_optimizer(&self.optimizer);
        Ok(c)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self, train_len: usize) -> u64 {
        (train_len.div_ceil(self.config.batch_size)).max(1) as u64
    }

    pub fn train_step(&mut self, train: &Corpus, teacher: &dyn TeacherOracle<f32>) -> Result<TokenizerStepRecord> {
        let step = self.step;
        self.train_step_inner(train, teacher)
            .map_err(|e| as_divergence(step + 1, e))
    }

    fn train_step_inner(&mut self, train: &Corpus, teacher: &dyn TeacherOracle<f32>) -> Result<TokenizerStepRecord> {
        let cfg = &self.config;
        let n = train.len();
        let b = cfg.batch_size.min(n);
        let idx = sample(&mut self.rng, n, b).into_vec();
        let mut images = Vec::with_capacity(b);
        for &i in &idx {
            let img: Tensor<f32> = train.image(i);
            images.push(if cfg.augment {
                random_resized_crop(&img, CROP_SCALE, CROP_RATIO, &mut self.rng)?
            } else {
                img
            });
        }
        let targets = teacher.evaluate(&images)?;
        let model = &mut self.model;
        let mut g = Graph::new();
        let patches = g.constant(patchify_batch(&images, &model.net.config.patch)?);
        let gradient_codebook = model.net.config.codebook.update == CodebookUpdate::Gradient;
        let table = gradient_codebook.then(|| g.input(model.codebook.embeddings().clone(), true));
        let options = VqkdOptions {
            frozen_assignment: None,
            codebook_table: table,
        };
        let fwd = vqkd_forward(
            &mut g,
            &model.net,
            &model.store,
            &model.codebook,
            patches,
            b,
            &targets,
            options,
            Some(&mut self.rng),
        )?;
        if !fwd.breakdown.total.is_finite() {
            return Err(Error::NonFinite("tokenizer loss"));
        }
        let grads = g.backward(fwd.loss)?;
        model.store.zero_grad();
        grads.accumulate_into(&mut model.store);
        let lr = cfg.optim.lr_at(self.step, cfg.steps);
        let grad_norm = match table {
            Some(v) => {
                let grad = grads.wrt(v);
                let mut emb = model.codebook.embeddings().clone();
                let mut extra = [ExtraParam {
                    name: "codebook.embeddings",
                    value: &mut emb,
                    grad: &grad,
                    decay: false,
                }];
                let norm = self.optimizer.step(&mut model.store, &mut extra, lr);
                model.codebook.set_embeddings(emb)?;
                model.codebook.record_usage(&fwd.assignment);
                norm
            }
            None => {
                let norm = self.optimizer.step(&mut model.store, &mut [], lr);
                model.codebook.ema_update(g.value(fwd.h_proj), &fwd.assignment)?;
                norm
            }
        };
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite("gradient norm"));
        }
        model
            .codebook
            .reinit_dead_codes(g.value(fwd.h_proj), model.net.config.codebook.dead_code_threshold, &mut self.rng)?;
        self.step += 1;
        let br = fwd.breakdown;
        Ok(TokenizerStepRecord {
            step: self.step,
            lr,
            total: br.total,
            cosine: br.cosine_term,
            commitment: br.commitment_term,
            codebook: br.codebook_term,
            usage_batch: br.codebook_usage_batch,
            grad_norm,
        })
    }

    /// Reconstruction loss and codebook usage on `val`; mutates nothing.
    pub fn evaluate(&self, val: &Corpus, teacher: &dyn TeacherOracle<f32>, epoch: u64) -> Result<TokenizerEvalRecord> {
        let (cosine, assignments) = evaluate_tokenizer(&self.model, val, teacher, self.config.batch_size)?;
        let usage = usage_stats(&self.model.codebook, &assignments)?;
        Ok(TokenizerEvalRecord {
            step: self.step,
            epoch,
            val_cosine: cosine,
            val_usage: usage.fraction,
            val_used_codes: usage.used_codes,
            val_perplexity: usage.perplexity,
        })
    }

    /// Trains up to `config.steps`, logging every step, evaluating every
    /// `eval_every` steps and handing periodic checkpoints to `on_checkpoint`.
    pub fn run(
        &mut self,
        train: &Corpus,
        val: &Corpus,
        teacher: &dyn TeacherOracle<f32>,
        steps_log: &mut MetricsLog<TokenizerStepRecord>,
        eval_log: &mut MetricsLog<TokenizerEvalRecord>,
        on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
    ) -> Result<()> {
        check_geometry(train, &self.config.model.patch)?;
        check_geometry(val, &self.config.model.patch)?;
        if train.is_empty() || val.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        if teacher.feature_dim() != self.config.model.teacher_dim {
            return Err(Error::Config(format!(
                "teacher produces {} features, decoder emits {}",
                teacher.feature_dim(),
                self.config.model.teacher_dim
            )));
        }
        let spe = self.steps_per_epoch(train.len());
        let eval_every = self.config.eval_every.unwrap_or(spe);
        while self.step < self.config.steps {
            let rec = self.train_step(train, teacher)?;
            log::debug!("step {} loss {:.5} cos {:.5}", rec.step, rec.total, rec.cosine);
            steps_log.push(rec)?;
            if self.step % eval_every == 0 {
                let ev = self.evaluate(val, teacher, self.step / spe)?;
                log::info!(
                    "step {} val cosine {:.4} usage {:.3}",
                    ev.step,
                    ev.val_cosine,
                    ev.val_usage
                );
                eval_log.push(ev)?;
            }
            if let Some(every) = self.config.checkpoint_every {
                if self.step % every == 0 {
                    on_checkpoint(&self.checkpoint()?)?;
                }
            }
        }
        steps_log.flush()?;
        eval_log.flush()
    }
}

/// Mean cosine term and the code assignments over `corpus`, in eval mode.
pub fn evaluate_tokenizer(
    model: &TokenizerModel<f32>,
    corpus: &Corpus,
    teacher: &dyn TeacherOracle<f32>,
    batch_size: usize,
) -> Result<(f64, Vec<CodeAssignment>)> {
    let mut weighted = 0.0;
    let mut rows = 0usize;
    let mut assignments = Vec::new();
    let all: Vec<usize> = (0..corpus.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let images: Vec<Tensor<f32>> = chunk.iter().map(|&i| corpus.image(i)).collect();
        let targets = teacher.evaluate(&images)?;
        let mut g = Graph::new();
        let patches = g.constant(patchify_batch(&images, &model.net.config.patch)?);
        let fwd = vqkd_forward(
            &mut g,
            &model.net,
            &model.store,
            &model.codebook,
            patches,
            images.len(),
            &targets,
            VqkdOptions::default(),
            None,
        )?;
        let m = fwd.assignment.len();
        weighted += fwd.breakdown.cosine_term * m as f64;
        rows += m;
        assignments.push(fwd.assignment);
    }
    if rows == 0 {
        return Err(Error::Empty("evaluation corpus"));
    }
    Ok((weighted / rows as f64, assignments))
}
