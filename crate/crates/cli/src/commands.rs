//! Subcommand implementations. Each reads its inputs, validates them before
//! writing anything, then drives one core routine.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use semtok_core::checkpoint::{file_digest, Checkpoint};
use semtok_core::config::{load_toml, DataConfig};
use semtok_core::data::{make_synthetic_corpus, Corpus, SyntheticSpec};
use semtok_core::eval::{self, probe_model, tokenize_corpus, ProbeConfig};
use semtok_core::metrics::MetricsLog;
use semtok_core::mim::{check_tokenizer, load_mim, MimTrainer, PretrainConfig};
use semtok_core::tokenizer::{load_tokenizer, resolve_teacher, TokenizerModel, TokenizerTrainConfig, TokenizerTrainer};
use semtok_core::tokens::TokenFile;
use semtok_core::Error;
use serde::Serialize;

use crate::{MakeCorpusArgs, PretrainArgs, ProbeArgs, ReportArgs, TokenizeArgs, TrainArgs};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const TOKENIZER_FILE: &str = "tokenizer.safetensors";
pub const MIM_FILE: &str = "mim.safetensors";
pub const CHECKPOINT_DIR: &str = "checkpoints";
const SHARD: usize = 32;

fn checkpoint_path(out: &Path, step: u64) -> PathBuf {
    out.join(CHECKPOINT_DIR).join(format!("step-{step:08}.safetensors"))
}

fn save_periodic(out: &Path, ckpt: &Checkpoint) -> semtok_core::Result<()> {
    fs::create_dir_all(out.join(CHECKPOINT_DIR))?;
    ckpt.save(&checkpoint_path(out, ckpt.step))
}

/// Makes a relative corpus path absolute against the config file's
/// directory so the snapshot stored in checkpoints stays valid elsewhere.
fn anchor_data(data: &mut DataConfig, config_path: &Path) -> anyhow::Result<()> {
    if let Some(p) = data.path.as_mut() {
        if p.is_relative() {
            let dir = config_path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
            *p = dir
                .canonicalize()
                .with_context(|| format!("resolving {}", dir.display()))?
                .join(&*p);
        }
    }
    Ok(())
}

fn require_config(config: &Option<PathBuf>) -> anyhow::Result<&Path> {
    config
        .as_deref()
        .ok_or_else(|| Error::Config("--config is required unless --resume is given".into()).into())
}

/// Rejects a resumed run whose requested config differs from the snapshot.
fn check_resume_config<C: PartialEq>(requested: Option<&C>, snapshot: &C) -> anyhow::Result<()> {
    if requested.is_some_and(|c| c != snapshot) {
        return Err(Error::Config("configuration differs from the checkpoint being resumed".into()).into());
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_corpus(dir: &Path) -> anyhow::Result<Corpus> {
    Corpus::load(dir).with_context(|| format!("loading corpus {}", dir.display()))
}

fn load_tokenizer_file(path: &Path) -> anyhow::Result<TokenizerModel<f32>> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(load_tokenizer(&ckpt)?)
}

pub fn make_corpus(a: MakeCorpusArgs) -> anyhow::Result<()> {
    let mut spec = match &a.config {
        Some(p) => load_toml::<SyntheticSpec>(p)?,
        None => SyntheticSpec {
            count: a.count.ok_or_else(|| Error::Config("--count is required without --config".into()))?,
            height: 32,
            width: 32,
            classes: 4,
            seed: 0,
        },
    };
    spec.count = a.count.unwrap_or(spec.count);
    spec.height = a.height.unwrap_or(spec.height);
    spec.width = a.width.unwrap_or(spec.width);
    spec.classes = a.classes.unwrap_or(spec.classes);
    spec.seed = a.seed.unwrap_or(spec.seed);
    spec.validate()?;
    let corpus = make_synthetic_corpus(&spec)?;
    corpus.save(&a.out)?;
    log::info!("wrote {} images to {}", corpus.len(), a.out.display());
    Ok(())
}

pub fn train_tokenizer(a: TrainArgs) -> anyhow::Result<()> {
    let requested = match &a.config {
        Some(p) => {
            let mut cfg: TokenizerTrainConfig = load_toml(p)?;
            anchor_data(&mut cfg.data, p)?;
            Some(cfg)
        }
        None => None,
    };
    let apply = |mut cfg: TokenizerTrainConfig| {
        if let Some(s) = a.seed {
            cfg.seed = s;
        }
        if let Some(t) = &a.teacher {
            cfg.model.teacher = t.clone();
        }
        cfg
    };
    let metrics = a.out.join(METRICS_FILE);
    let evals = a.out.join(EVAL_FILE);
    let (mut trainer, resume_step) = match &a.resume {
        Some(r) => {
            let ckpt = Checkpoint::load(r).with_context(|| format!("loading {}", r.display()))?;
            let trainer = TokenizerTrainer::from_checkpoint(&ckpt)?;
            let requested = requested.map(apply).or_else(|| Some(apply(trainer.config.clone())));
            check_resume_config(requested.as_ref(), &trainer.config)?;
            (trainer, Some(ckpt.step))
        }
        None => {
            require_config(&a.config)?;
            (TokenizerTrainer::new(apply(requested.expect("config checked")))?, None)
        }
    };
    let cfg = trainer.config.clone();
    cfg.validate()?;
    let corpus = cfg.data.load(Path::new("."))?;
    let (train, val) = cfg.data.split(&corpus)?;
    let teacher = resolve_teacher::<f32>(&cfg.model.teacher, cfg.model.teacher_dim, cfg.model.patch)?;
    semtok_core::tokenizer::check_geometry(&corpus, &cfg.model.patch)?;

    fs::create_dir_all(&a.out)?;
    let (mut steps_log, mut eval_log) = match resume_step {
        Some(s) => (MetricsLog::resume_file(&metrics, s)?, MetricsLog::resume_file(&evals, s)?),
        None => (MetricsLog::to_file(&metrics)?, MetricsLog::to_file(&evals)?),
    };
    let out = a.out.clone();
    trainer.run(&train, &val, teacher.as_ref(), &mut steps_log, &mut eval_log, &mut |c| {
        save_periodic(&out, c)
    })?;
    trainer.checkpoint()?.save(&a.out.join(TOKENIZER_FILE))?;
    log::info!("tokenizer trained for {} steps", trainer.step());
    Ok(())
}

pub fn pretrain(a: PretrainArgs) -> anyhow::Result<()> {
    let requested = match &a.config {
        Some(p) => {
            let mut cfg: PretrainConfig = load_toml(p)?;
            anchor_data(&mut cfg.data, p)?;
            Some(cfg)
        }
        None => None,
    };
    let apply = |mut cfg: PretrainConfig| {
        if let Some(s) = a.seed {
            cfg.seed = s;
        }
        cfg
    };
    let (mut trainer, resume_step) = match &a.resume {
        Some(r) => {
            let ckpt = Checkpoint::load(r).with_context(|| format!("loading {}", r.display()))?;
            let trainer = MimTrainer::from_checkpoint(&ckpt)?;
            let requested = requested.map(apply).or_else(|| Some(apply(trainer.config.clone())));
            check_resume_config(requested.as_ref(), &trainer.config)?;
            (trainer, Some(ckpt.step))
        }
        None => {
            require_config(&a.config)?;
            (MimTrainer::new(apply(requested.expect("config checked")))?, None)
        }
    };
    let cfg = trainer.config.clone();
    let tokenizer = load_tokenizer_file(&a.tokenizer)?;
    check_tokenizer(&cfg.model, &tokenizer)?;
    let corpus = cfg.data.load(Path::new("."))?;
    semtok_core::tokenizer::check_geometry(&corpus, &cfg.model.patch)?;
    let (train, _) = cfg.data.split(&corpus)?;

    fs::create_dir_all(&a.out)?;
    let metrics = a.out.join(METRICS_FILE);
    let mut steps_log = match resume_step {
        Some(s) => MetricsLog::resume_file(&metrics, s)?,
        None => MetricsLog::to_file(&metrics)?,
    };
    let out = a.out.clone();
    trainer.run(&train, &tokenizer, &mut steps_log, &mut |c| save_periodic(&out, c))?;
    trainer.checkpoint()?.save(&a.out.join(MIM_FILE))?;
    log::info!("pretrained for {} steps", trainer.step());
    Ok(())
}

pub fn tokenize(a: TokenizeArgs) -> anyhow::Result<()> {
    let tokenizer = load_tokenizer_file(&a.tokenizer)?;
    let digest = file_digest(&a.tokenizer)?;
    let corpus = load_corpus(&a.corpus)?;
    let patch = tokenizer.config().patch;
    semtok_core::tokenizer::check_geometry(&corpus, &patch)?;
    let grids = tokenize_corpus(&tokenizer, &corpus, SHARD)?;
    let file = TokenFile::new(tokenizer.codebook.size(), patch.grid(), digest, grids)?;
    file.save(&a.out)?;
    log::info!(
        "tokenized {} images with checkpoint {}",
        file.grids.len(),
        hex::encode(&digest[..8])
    );
    Ok(())
}

pub fn probe(a: ProbeArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => load_toml::<ProbeConfig>(p)?,
        None => ProbeConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let ckpt = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let model = load_mim::<f32>(&ckpt)?;
    let corpus = load_corpus(&a.corpus)?;
    semtok_core::tokenizer::check_geometry(&corpus, &model.net.config.patch)?;
    let result = probe_model(&model, &corpus, a.mode, &cfg)?;
    write_json(&a.out, &result)?;
    log::info!(
        "probe accuracy {:.4} (majority {:.4}, {} mode)",
        result.accuracy,
        result.majority_baseline,
        result.representation_mode
    );
    Ok(())
}

pub fn codebook_report(a: ReportArgs) -> anyhow::Result<()> {
    let tokenizer = load_tokenizer_file(&a.tokenizer)?;
    let corpus = load_corpus(&a.corpus)?;
    semtok_core::tokenizer::check_geometry(&corpus, &tokenizer.config().patch)?;
    let report = eval::codebook_report(&tokenizer, &corpus, a.top_n)?;
    write_json(&a.out, &report)?;
    log::info!(
        "{} of {} codes used, perplexity {:.2}",
        report.used_codes,
        report.codebook_size,
        report.perplexity
    );
    Ok(())
}
