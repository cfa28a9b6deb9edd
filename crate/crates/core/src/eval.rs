//! Global representations, linear probing and codebook reports.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codebook::{CodeAssignment, UsageStats};
use crate::data::Corpus;
use crate::mim::MimModel;
use crate::optim::{AdamW, OptimConfig};
use crate::tensor::{Graph, ParamStore, Scalar, Tensor};
use crate::tokenizer::{TokenGrid, TokenizerModel};
use crate::vit::{LayerActivations, Vit};
use crate::{Error, Result};

/// How an image-level vector is read from the final layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReprMode {
    /// The final-layer CLS token.
    Cls,
    /// The mean of the final-layer patch tokens.
    MeanPatch,
}

impl fmt::Display for ReprMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cls => "cls",
            Self::MeanPatch => "mean-patch",
        })
    }
}

impl FromStr for ReprMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(Self::Cls),
            "mean-patch" => Ok(Self::MeanPatch),
            other => Err(Error::Config(format!("representation mode must be cls or mean-patch, got {other:?}"))),
        }
    }
}

/// One row per image from the last entry of `acts`.
pub fn global_repr_from_activations<T: Scalar>(
    g: &Graph<T>,
    acts: &LayerActivations,
    mode: ReprMode,
) -> Result<Tensor<T>> {
    let last = g.value(acts.last());
    let d = last.cols();
    let mut out = Vec::with_capacity(acts.batch * d);
    match mode {
        ReprMode::Cls => {
            let rows = acts
                .cls_rows()
                .ok_or_else(|| Error::Config("cls representation requested from a model without a CLS token".into()))?;
            for r in rows {
                out.extend_from_slice(last.row(r));
            }
        }
        ReprMode::MeanPatch => {
            let n = acts.patches_per_image();
            for b in 0..acts.batch {
                let mut acc = vec![0.0f64; d];
                for i in 0..n {
                    for (a, &v) in acc.iter_mut().zip(last.row(acts.patch_row(b, i))) {
                        *a += v.as_f64();
                    }
                }
                out.extend(acc.into_iter().map(|a| T::of(a / n as f64)));
            }
        }
    }
    Tensor::new([acts.batch, d], out)
}

/// Image-level vectors for `images`, eval mode.
pub fn extract_global_repr<T: Scalar>(
    vit: &Vit,
    store: &ParamStore<T>,
    images: &[Tensor<T>],
    mode: ReprMode,
) -> Result<Tensor<T>> {
    if mode == ReprMode::Cls && !vit.config.use_cls_token {
        return Err(Error::Config("cls representation requested from a model without a CLS token".into()));
    }
    let mut g = Graph::new();
    let acts = vit.encode_images(&mut g, store, images)?;
    global_repr_from_activations(&g, &acts, mode)
}

/// Representations of every corpus image, computed in fixed-size shards.
pub fn corpus_features(model: &MimModel<f32>, corpus: &Corpus, mode: ReprMode, batch: usize) -> Result<Tensor<f64>> {
    let idx: Vec<usize> = (0..corpus.len()).collect();
    let parts: Vec<Tensor<f32>> = idx
        .par_chunks(batch.max(1))
        .map(|chunk| {
            let images: Vec<Tensor<f32>> = chunk.iter().map(|&i| corpus.image(i)).collect();
            extract_global_repr(&model.net.backbone, &model.store, &images, mode)
        })
        .collect::<Result<_>>()?;
    let d = model.net.config.backbone.hidden_dim;
    let data: Vec<f64> = parts.iter().flat_map(|t| t.data().iter().map(|v| v.as_f64())).collect();
    Tensor::new([corpus.len(), d], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: u64,
    pub lr: f64,
    pub weight_decay: f64,
    /// Fraction of examples used for training; the rest is evaluated.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.05,
            weight_decay: 0.0,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub class_count: usize,
    pub representation_mode: ReprMode,
    pub train_size: usize,
    pub eval_size: usize,
    /// Accuracy of always predicting the most frequent training class.
    pub majority_baseline: f64,
}

/// Full-batch softmax regression on fixed features, cosine-decayed AdamW.
/// Returns eval-split accuracy.
pub fn linear_probe(
    features: &Tensor<f64>,
    labels: &[u32],
    mode: ReprMode,
    config: &ProbeConfig,
) -> Result<ProbeResult> {
    let (n, d) = features.dims2()?;
    if labels.len() != n {
        return Err(Error::shape("linear_probe labels", &[labels.len()], &[n]));
    }
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let distinct = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
    if distinct < 2 {
        return Err(Error::Config("linear probe needs at least two classes".into()));
    }
    if !(config.train_fraction > 0.0 && config.train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must lie in (0, 1), got {}",
            config.train_fraction
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let n_train = ((n as f64 * config.train_fraction).round() as usize).clamp(1, n - 1);
    let (train_idx, eval_idx) = order.split_at(n_train);
    let x_train = features.gather_rows(train_idx)?;
    let y_train: Vec<usize> = train_idx.iter().map(|&i| labels[i] as usize).collect();

    let mut store = ParamStore::<f64>::new();
    let w = store.add("probe.weight", Tensor::zeros([d, classes]));
    let b = store.add_no_decay("probe.bias", Tensor::zeros([classes]));
    let optim = OptimConfig {
        lr: config.lr,
        min_lr: 0.0,
        warmup_steps: 0,
        weight_decay: config.weight_decay,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        grad_clip: None,
    };
    optim.validate()?;
    let mut opt = AdamW::new(optim);
    for epoch in 0..config.epochs {
        let mut g = Graph::new();
        let x = g.constant(x_train.clone());
        let wv = g.param(&store, w);
        let bv = g.param(&store, b);
        let z = g.matmul(x, wv)?;
        let logits = g.add_rows(z, bv)?;
        let loss = g.cross_entropy(logits, &y_train)?;
        let grads = g.backward(loss)?;
        store.zero_grad();
        grads.accumulate_into(&mut store);
        opt.step(&mut store, &mut [], optim.lr_at(epoch, config.epochs));
    }

    let x_eval = features.gather_rows(eval_idx)?;
    let logits = x_eval.matmul(store.value(w))?;
    let bias = store.value(b).data();
    let mut correct = 0usize;
    for (r, &i) in eval_idx.iter().enumerate() {
        let row = logits.row(r);
        let mut best = 0;
        for c in 1..classes {
            if row[c] + bias[c] > row[best] + bias[best] {
                best = c;
            }
        }
        correct += usize::from(best == labels[i] as usize);
    }
    let mut counts = vec![0usize; classes];
    for &y in &y_train {
        counts[y] += 1;
    }
    let majority = (0..classes).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap_or(0);
    let majority_hits = eval_idx.iter().filter(|&&i| labels[i] as usize == majority).count();
    Ok(ProbeResult {
        accuracy: correct as f64 / eval_idx.len() as f64,
        class_count: classes,
        representation_mode: mode,
        train_size: train_idx.len(),
        eval_size: eval_idx.len(),
        majority_baseline: majority_hits as f64 / eval_idx.len() as f64,
    })
}

/// Probes a frozen pretrained backbone on a labeled corpus.
pub fn probe_model(model: &MimModel<f32>, corpus: &Corpus, mode: ReprMode, config: &ProbeConfig) -> Result<ProbeResult> {
    let before = model.backbone_digest();
    let features = corpus_features(model, corpus, mode, 32)?;
    if model.backbone_digest() != before {
        return Err(Error::Config("backbone parameters changed during feature extraction".into()));
    }
    linear_probe(&features, &corpus.labels, mode, config)
}

/// Code assignments for every patch of `corpus`, in corpus order, computed
/// in fixed shards of `batch` images.
pub fn assign_corpus(tokenizer: &TokenizerModel<f32>, corpus: &Corpus, batch: usize) -> Result<Vec<CodeAssignment>> {
    let idx: Vec<usize> = (0..corpus.len()).collect();
    idx.par_chunks(batch.max(1))
        .map(|chunk| {
            let images: Vec<Tensor<f32>> = chunk.iter().map(|&i| corpus.image(i)).collect();
            tokenizer.assign(&images)
        })
        .collect()
}

pub fn tokenize_corpus(tokenizer: &TokenizerModel<f32>, corpus: &Corpus, batch: usize) -> Result<Vec<TokenGrid>> {
    let (gh, gw) = tokenizer.config().patch.grid();
    let assignments = assign_corpus(tokenizer, corpus, batch)?;
    Ok(assignments
        .iter()
        .flat_map(|a| a.indices.chunks(gh * gw))
        .map(|c| TokenGrid {
            height: gh,
            width: gw,
            codes: c.iter().map(|&z| z as u32).collect(),
        })
        .collect())
}

/// A patch assigned to a code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRef {
    pub image: usize,
    pub row: usize,
    pub col: usize,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookReport {
    pub codebook_size: usize,
    pub images: usize,
    pub patch_size: usize,
    pub usage_fraction: f64,
    pub used_codes: usize,
    pub perplexity: f64,
    pub histogram: Vec<u64>,
    /// Used codes to their most similar patches, at most `top_n` each.
    pub grouping: BTreeMap<usize, Vec<PatchRef>>,
}

pub const DEFAULT_TOP_N: usize = 16;

/// Tokenizes `corpus` and groups patches by code. Each group keeps the
/// `top_n` most similar patches, earlier patches first on ties.
pub fn codebook_report(tokenizer: &TokenizerModel<f32>, corpus: &Corpus, top_n: usize) -> Result<CodebookReport> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let patch = tokenizer.config().patch;
    let (gh, gw) = patch.grid();
    let n = gh * gw;
    let assignments = assign_corpus(tokenizer, corpus, 32)?;
    let k = tokenizer.codebook.size();
    let mut groups: BTreeMap<usize, Vec<PatchRef>> = BTreeMap::new();
    let mut flat = 0usize;
    for a in &assignments {
        for (&z, &s) in a.indices.iter().zip(&a.similarities) {
            let (image, p) = (flat / n, flat % n);
            groups.entry(z).or_default().push(PatchRef {
                image,
                row: p / gw,
                col: p % gw,
                similarity: s,
            });
            flat += 1;
        }
    }
    for refs in groups.values_mut() {
        // Stable sort keeps corpus order among equal similarities.
        refs.sort_by(|a, b| b.similarity.total_cmp(&a.similarity));
        refs.truncate(top_n);
    }
    let usage = UsageStats::from_indices(k, assignments.iter().flat_map(|a| a.indices.iter().copied()))?;
    Ok(CodebookReport {
        codebook_size: k,
        images: corpus.len(),
        patch_size: patch.patch_size,
        usage_fraction: usage.fraction,
        used_codes: usage.used_codes,
        perplexity: usage.perplexity,
        histogram: usage.histogram,
        grouping: groups,
    })
}
