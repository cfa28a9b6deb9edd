//! Acceptance suite: one pass/fail line per criterion, each with pinned
//! tolerances and a wall-clock budget. Training criteria share their
//! artifacts (the smoke tokenizer feeds pretraining, whose backbone feeds
//! the probe), so the whole suite runs as a single test.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use semtok_core::checkpoint::Checkpoint;
use semtok_core::codebook::{CodeAssignment, Codebook};
use semtok_core::config::DataConfig;
use semtok_core::data::{make_synthetic_corpus, SyntheticSpec};
use semtok_core::eval::{corpus_features, linear_probe, ProbeConfig, ReprMode};
use semtok_core::metrics::MetricsLog;
use semtok_core::mim::{
    blockwise_mask, mim_forward, AggregationConfig, MaskConfig, MaskSpec, MimConfig, MimModel, MimTrainer,
    PretrainConfig,
};
use semtok_core::optim::OptimConfig;
use semtok_core::tensor::finite_diff_check;
use semtok_core::tokenizer::{
    resolve_teacher, vqkd_forward, CodebookConfig, DecoderConfig, TokenizerConfig, TokenizerModel, TokenizerNet,
    TokenizerTrainConfig, TokenizerTrainer, VqkdOptions,
};
use semtok_core::vit::{patchify_batch, PatchifyConfig, VitConfig};
use semtok_core::{Error, Graph, ParamStore, Result, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

struct Report {
    failures: Vec<String>,
}

impl Report {
    fn run(&mut self, id: u32, name: &str, budget_s: u64, f: impl FnOnce() -> Result<Outcome>) {
        let start = Instant::now();
        let result = f();
        let elapsed = start.elapsed();
        let budget = Duration::from_secs(budget_s);
        let (pass, detail) = match result {
            Ok(o) => (o.pass && elapsed <= budget, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let tag = if pass { "PASS" } else { "FAIL" };
        println!(
            "[{tag}] {id:>2} {name}: {detail} ({:.2} s, budget {budget_s} s)",
            elapsed.as_secs_f64()
        );
        if !pass {
            self.failures.push(format!("{id} {name}"));
        }
    }
}

fn normal_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.sample::<f64, _>(StandardNormal))
}

/// Exhaustive cosine argmax, smallest index on ties.
fn brute_force_nearest(codes: &Tensor<f64>, q: &[f64]) -> usize {
    let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut best = (0, f64::NEG_INFINITY);
    for j in 0..codes.rows() {
        let c = codes.row(j);
        let cn = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        let cos = c.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() / (cn * qn);
        if cos > best.1 {
            best = (j, cos);
        }
    }
    best.0
}

fn quantizer_oracle() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let codebook = Codebook::<f64>::new(64, 8, 0.99, &mut rng)?;
    let queries = normal_tensor(&[1000, 8], &mut rng);
    let got = codebook.lookup_nearest(&queries)?;
    let matches = (0..1000)
        .filter(|&i| got.indices[i] == brute_force_nearest(codebook.embeddings(), queries.row(i)))
        .count();
    Ok(outcome(matches == 1000, format!("{matches}/1000 queries match brute force")))
}

fn scale_invariance() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let cb64 = Codebook::<f64>::new(64, 8, 0.99, &mut rng)?;
    let cb32 = Codebook::<f32>::from_embeddings(cb64.embeddings().cast(), 0.99)?;
    let queries = normal_tensor(&[1000, 8], &mut rng);
    let base64 = cb64.lookup_nearest(&queries)?.indices;
    let base32 = cb32.lookup_nearest(&queries.cast())?.indices;
    let mut mismatches = 0;
    for alpha in [0.1, 1.0, 10.0] {
        let scaled = queries.scale(alpha);
        mismatches += diff_count(&cb64.lookup_nearest(&scaled)?.indices, &base64);
        mismatches += diff_count(&cb32.lookup_nearest(&scaled.cast())?.indices, &base32);
    }
    Ok(outcome(
        mismatches == 0,
        format!("{mismatches} changed assignments over 3 scales x 1000 queries in f32 and f64"),
    ))
}

fn diff_count(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

fn straight_through_contract() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut bad = 0;
    for _ in 0..100 {
        let rows = rng.gen_range(1..9);
        let cols = rng.gen_range(1..9);
        let mut g = Graph::<f64>::new();
        let q = g.input(normal_tensor(&[rows, cols], &mut rng), true);
        let c = g.input(normal_tensor(&[rows, cols], &mut rng), true);
        let upstream = normal_tensor(&[rows, cols], &mut rng);
        let st = g.straight_through(q, c)?;
        let forward_exact = g.value(st).data() == g.value(q).data();
        let w = g.constant(upstream.clone());
        let prod = g.mul(st, w)?;
        let loss = g.sum(prod)?;
        let grads = g.backward(loss)?;
        let to_continuous = grads.wrt(c);
        let to_quantized = grads.wrt(q);
        let exact = to_continuous.data() == upstream.data() && to_quantized.data().iter().all(|&v| v == 0.0);
        if !(exact && forward_exact) {
            bad += 1;
        }
    }
    Ok(outcome(bad == 0, format!("{bad}/100 cases violate the contract")))
}

fn tiny_tokenizer_config() -> TokenizerConfig {
    TokenizerConfig {
        patch: PatchifyConfig {
            image_height: 8,
            image_width: 8,
            channels: 3,
            patch_size: 4,
        },
        encoder: VitConfig {
            layers: 2,
            hidden_dim: 8,
            heads: 2,
            mlp_ratio: 2.0,
            use_cls_token: false,
            dropout: 0.0,
        },
        decoder: DecoderConfig {
            layers: 2,
            hidden_dim: 8,
            heads: 2,
            mlp_ratio: 2.0,
        },
        codebook: CodebookConfig {
            size: 4,
            dim: 8,
            ..CodebookConfig::default()
        },
        teacher: "frozen-vit:0".into(),
        teacher_dim: 8,
    }
}

/// The tokenizer objective with the straight-through node written as
/// `ℓ2(h) + offset`, where `offset = ℓ2(v_z) − ℓ2(h)` is taken at the base
/// parameters. Its forward value matches the quantized path at the base
/// point and finite differences see the gradient the estimator routes to
/// `ℓ2(h)`.
#[allow(clippy::too_many_arguments)]
fn surrogate_tokenizer_loss(
    g: &mut Graph<f64>,
    net: &TokenizerNet,
    store: &ParamStore<f64>,
    patches: &Tensor<f64>,
    targets: &Tensor<f64>,
    codes: &Tensor<f64>,
    offset: &Tensor<f64>,
) -> Result<semtok_core::Var> {
    let p = g.constant(patches.clone());
    let h = net.encode(g, store, p, 1, None)?;
    let hn = g.l2_normalize(h, 1)?;
    let off = g.constant(offset.clone());
    let zq = g.add(hn, off)?;
    let o = net.decode(g, store, zq, 1, None)?;
    let on = g.l2_normalize(o, 1)?;
    let tn = g.constant(targets.l2_normalize(1)?);
    let prod = g.mul(on, tn)?;
    let cos = g.sum_rows(prod)?;
    let mean_cos = g.mean(cos)?;
    let cosine = g.affine(mean_cos, -1.0, 1.0)?;
    let v = g.constant(codes.clone());
    let diff = g.sub(hn, v)?;
    let sq = g.mul(diff, diff)?;
    let per_row = g.sum_rows(sq)?;
    let commitment = g.mean(per_row)?;
    let weighted = g.scale(commitment, net.config.codebook.beta)?;
    g.add(cosine, weighted)
}

fn tokenizer_gradcheck() -> Result<Outcome> {
    let cfg = tiny_tokenizer_config();
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut store = ParamStore::<f64>::new();
    let net = TokenizerNet::new(&mut store, &cfg, 0.5, &mut rng)?;
    let codebook = Codebook::<f64>::new(4, 8, 0.99, &mut rng)?;
    let image = normal_tensor(&cfg.patch.image_shape(), &mut rng);
    let patches = patchify_batch(&[image], &cfg.patch)?;
    let targets = normal_tensor(&[4, 8], &mut rng);

    // Analytic gradients of the production objective at the base point.
    let mut g = Graph::new();
    let p = g.constant(patches.clone());
    let fwd = vqkd_forward(&mut g, &net, &store, &codebook, p, 1, &targets, VqkdOptions::default(), None)?;
    let assignment = fwd.assignment.indices.clone();
    let hn0 = g.value(fwd.h_proj).l2_normalize(1)?;
    let production_loss = g.value(fwd.loss).data()[0];
    let production = g.backward(fwd.loss)?;

    let codes = codebook.code_rows(&assignment)?;
    let offset = Tensor::new(
        [4, 8],
        codes.data().iter().zip(hn0.data()).map(|(v, h)| v - h).collect(),
    )?;
    let mut g = Graph::new();
    let loss = surrogate_tokenizer_loss(&mut g, &net, &store, &patches, &targets, &codes, &offset)?;
    let value_gap = (g.value(loss).data()[0] - production_loss).abs();
    let surrogate = g.backward(loss)?;
    let mut analytic_gap = 0.0f64;
    for (id, p) in store.iter().filter(|(_, p)| p.trainable) {
        let zero = Tensor::zeros(p.value().shape().to_vec());
        let a = production.param(id).unwrap_or(&zero);
        let b = surrogate.param(id).unwrap_or(&zero);
        for (x, y) in a.data().iter().zip(b.data()) {
            analytic_gap = analytic_gap.max((x - y).abs());
        }
    }

    let params = store.iter().filter(|(_, p)| p.trainable).count();
    let report = finite_diff_check(&mut store, 1e-5, |g, store| {
        surrogate_tokenizer_loss(g, &net, store, &patches, &targets, &codes, &offset)
    })?;
    let err = report.max_relative_error;
    Ok(outcome(
        err < 1e-4 && analytic_gap <= 1e-12 && value_gap <= 1e-12,
        format!(
            "max relative error {err:.2e} < 1e-4 over {params} parameters (worst {}); \
             straight-through gradients match the frozen-offset objective to {analytic_gap:.1e}",
            report.worst_parameter
        ),
    ))
}

fn ema_closed_form() -> Result<Outcome> {
    let lambda = 0.9;
    let init = Tensor::from_f64([2, 2], &[1.0, 0.0, 0.0, 1.0])?;
    let mut cb = Codebook::<f64>::from_embeddings(init, lambda)?;
    let batches: [(&[f64], &[usize]); 2] = [
        (&[3.0, 4.0, 2.0, 0.0, -1.0, 3.0], &[0, 0, 1]),
        (&[0.0, 5.0, 1.0, 1.0], &[1, 1]),
    ];
    // Hand recurrence on plain arrays.
    let mut size = [0.0f64; 2];
    let mut sum = [[1.0, 0.0], [0.0, 1.0]];
    let mut code = [[1.0, 0.0], [0.0, 1.0]];
    let mut worst = 0.0f64;
    for (rows, idx) in batches {
        let n = idx.len();
        let h = Tensor::from_f64([n, 2], rows)?;
        let assignment = CodeAssignment {
            indices: idx.to_vec(),
            similarities: vec![0.0; n],
        };
        cb.ema_update(&h, &assignment)?;
        for j in 0..2 {
            let mut count = 0.0;
            let mut batch_sum = [0.0, 0.0];
            for (i, &z) in idx.iter().enumerate() {
                if z == j {
                    let (x, y) = (rows[2 * i], rows[2 * i + 1]);
                    let r = (x * x + y * y).sqrt();
                    batch_sum[0] += x / r;
                    batch_sum[1] += y / r;
                    count += 1.0;
                }
            }
            size[j] = lambda * size[j] + (1.0 - lambda) * count;
            for d in 0..2 {
                sum[j][d] = lambda * sum[j][d] + (1.0 - lambda) * batch_sum[d];
            }
            let c = [sum[j][0] / size[j].max(1e-5), sum[j][1] / size[j].max(1e-5)];
            let cn = (c[0] * c[0] + c[1] * c[1]).sqrt();
            code[j] = [c[0] / cn, c[1] / cn];
        }
        for j in 0..2 {
            worst = worst.max((cb.ema_cluster_size()[j] - size[j]).abs());
            for d in 0..2 {
                worst = worst.max((cb.ema_embed_sum().row(j)[d] - sum[j][d]).abs());
                worst = worst.max((cb.embeddings().row(j)[d] - code[j][d]).abs());
            }
        }
    }
    Ok(outcome(worst <= 1e-12, format!("max deviation {worst:.2e} <= 1e-12 after two batches")))
}

/// Cells of a block reached by 4-connected flood fill from its first cell,
/// restricted to the block's own cell set.
fn flood_fill_count(cells: &BTreeSet<(usize, usize)>) -> usize {
    let Some(&start) = cells.iter().next() else {
        return 0;
    };
    let mut seen = BTreeSet::from([start]);
    let mut stack = vec![start];
    while let Some((r, c)) = stack.pop() {
        let mut next = vec![(r + 1, c), (r, c + 1)];
        if r > 0 {
            next.push((r - 1, c));
        }
        if c > 0 {
            next.push((r, c - 1));
        }
        for p in next {
            if cells.contains(&p) && seen.insert(p) {
                stack.push(p);
            }
        }
    }
    seen.len()
}

fn block_is_rectangle(cells: &BTreeSet<(usize, usize)>) -> bool {
    let r0 = cells.iter().map(|p| p.0).min().unwrap_or(0);
    let r1 = cells.iter().map(|p| p.0).max().unwrap_or(0);
    let c0 = cells.iter().map(|p| p.1).min().unwrap_or(0);
    let c1 = cells.iter().map(|p| p.1).max().unwrap_or(0);
    !cells.is_empty() && flood_fill_count(cells) == cells.len() && (r1 - r0 + 1) * (c1 - c0 + 1) == cells.len()
}

fn mask_statistics() -> Result<Outcome> {
    let cfg = MaskConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let (mut lo, mut hi) = (1.0f64, 0.0f64);
    let mut bad_fraction = 0;
    let mut bad_blocks = 0;
    for _ in 0..1000 {
        let m = blockwise_mask((8, 8), &cfg, &mut rng)?;
        let f = m.fraction();
        lo = lo.min(f);
        hi = hi.max(f);
        if !(0.40..=0.47).contains(&f) {
            bad_fraction += 1;
        }
        let mut union = MaskSpec::empty((8, 8));
        for b in &m.blocks {
            let cells: BTreeSet<(usize, usize)> = (b.top..b.top + b.height)
                .flat_map(|r| (b.left..b.left + b.width).map(move |c| (r, c)))
                .filter(|&(r, c)| m.mask[r * 8 + c])
                .collect();
            if cells.len() != b.area() || !block_is_rectangle(&cells) {
                bad_blocks += 1;
            }
            for (r, c) in cells {
                union.mask[r * 8 + c] = true;
            }
        }
        if union.mask != m.mask {
            bad_blocks += 1;
        }
    }
    let mut paper_total = 0;
    for _ in 0..200 {
        paper_total += blockwise_mask((14, 14), &cfg, &mut rng)?.count();
    }
    let paper_mean = paper_total as f64 / 200.0;
    Ok(outcome(
        bad_fraction == 0 && bad_blocks == 0 && (75.0..=95.0).contains(&paper_mean),
        format!(
            "fraction range [{lo:.3}, {hi:.3}] within [0.40, 0.47], {bad_blocks} non-rectangular blocks, \
             14x14 mean {paper_mean:.1} patches"
        ),
    ))
}

fn small_mim_config(depth: usize) -> MimConfig {
    MimConfig {
        patch: PatchifyConfig {
            image_height: 16,
            image_width: 16,
            channels: 3,
            patch_size: 4,
        },
        backbone: VitConfig {
            layers: 2,
            hidden_dim: 16,
            heads: 2,
            mlp_ratio: 2.0,
            use_cls_token: true,
            dropout: 0.0,
        },
        codebook_size: 8,
        mask: MaskConfig::default(),
        aggregation: AggregationConfig {
            depth,
            ..AggregationConfig::default()
        },
    }
}

fn random_batch<T: semtok_core::Scalar>(
    cfg: &MimConfig,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<T>, Vec<bool>, Vec<usize>)> {
    let images: Vec<Tensor<T>> = (0..batch)
        .map(|_| normal_tensor(&cfg.patch.image_shape(), rng).cast())
        .collect();
    let patches = patchify_batch(&images, &cfg.patch)?;
    let grid = cfg.patch.grid();
    let mut mask = Vec::new();
    for _ in 0..batch {
        mask.extend(blockwise_mask(grid, &cfg.mask, rng)?.mask);
    }
    let targets = (0..mask.len()).map(|_| rng.gen_range(0..cfg.codebook_size)).collect();
    Ok((patches, mask, targets))
}

fn loss_locality() -> Result<Outcome> {
    let cfg = small_mim_config(1);
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let model = MimModel::<f32>::new(&cfg, &mut rng)?;
    let mut changed = 0;
    for _ in 0..100 {
        let (patches, mask, targets) = random_batch::<f32>(&cfg, 2, &mut rng)?;
        let mut perturbed = targets.clone();
        for (t, &m) in perturbed.iter_mut().zip(&mask) {
            if !m {
                *t = (*t + rng.gen_range(1..cfg.codebook_size)) % cfg.codebook_size;
            }
        }
        let loss_bits = |t: &[usize]| -> Result<(u64, u64)> {
            let mut g = Graph::new();
            let p = g.constant(patches.clone());
            let f = mim_forward(&mut g, &model.net, &model.store, p, 2, &mask, t, None)?;
            Ok((f.breakdown.main_loss.to_bits(), f.breakdown.total.to_bits()))
        };
        if loss_bits(&targets)? != loss_bits(&perturbed)? {
            changed += 1;
        }
    }
    Ok(outcome(changed == 0, format!("{changed}/100 cases changed the loss bits")))
}

fn shared_head_additivity() -> Result<Outcome> {
    let cfg = small_mim_config(1);
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let model = MimModel::<f64>::new(&cfg, &mut rng)?;
    let heads = model.store.iter().filter(|(_, p)| p.name.contains("head")).count();
    let (patches, mask, targets) = random_batch::<f64>(&cfg, 2, &mut rng)?;
    let head_grads = |pick: usize| -> Result<Vec<Tensor<f64>>> {
        let mut g = Graph::new();
        let p = g.constant(patches.clone());
        let f = mim_forward(&mut g, &model.net, &model.store, p, 2, &mask, &targets, None)?;
        let loss = match pick {
            0 => f.total,
            1 => f.main,
            _ => f.aggregation.ok_or(Error::Empty("aggregation loss"))?,
        };
        let grads = g.backward(loss)?;
        Ok([model.net.head.weight, model.net.head.bias.expect("head bias")]
            .iter()
            .map(|&id| {
                grads
                    .param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(model.store.value(id).shape().to_vec()))
            })
            .collect())
    };
    let (total, main, agg) = (head_grads(0)?, head_grads(1)?, head_grads(2)?);
    let mut worst = 0.0f64;
    for ((t, m), a) in total.iter().zip(&main).zip(&agg) {
        for ((x, y), z) in t.data().iter().zip(m.data()).zip(a.data()) {
            worst = worst.max((x - (y + z)).abs());
        }
    }
    Ok(outcome(
        heads == 2 && worst <= 1e-12,
        format!("{heads} head parameters, max |g_total - (g_main + g_agg)| = {worst:.2e} <= 1e-12"),
    ))
}

fn smoke_spec() -> SyntheticSpec {
    SyntheticSpec {
        count: 256,
        height: 32,
        width: 32,
        classes: 4,
        seed: 1,
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn smoke_tokenizer_config() -> TokenizerTrainConfig {
    let mut model = TokenizerConfig::default();
    model.codebook.size = 64;
    model.codebook.dead_code_threshold = Some(50);
    TokenizerTrainConfig {
        seed: 0,
        steps: 200,
        batch_size: 16,
        eval_every: None,
        checkpoint_every: None,
        augment: true,
        data: DataConfig::synthetic(smoke_spec(), 32),
        model,
        optim: OptimConfig::tokenizer_desk(),
    }
}

fn tokenizer_smoke(out: &mut Option<TokenizerModel<f32>>) -> Result<Outcome> {
    let cfg = smoke_tokenizer_config();
    let corpus = cfg.data.load(Path::new("."))?;
    let (train, val) = cfg.data.split(&corpus)?;
    let teacher = resolve_teacher::<f32>(&cfg.model.teacher, cfg.model.teacher_dim, cfg.model.patch)?;
    let mut trainer = TokenizerTrainer::new(cfg)?;
    let mut steps = MetricsLog::in_memory();
    let mut evals = MetricsLog::in_memory();
    trainer.run(&train, &val, teacher.as_ref(), &mut steps, &mut evals, &mut |_| Ok(()))?;
    let r = steps.records();
    let first = mean(r[..10].iter().map(|x| x.cosine));
    let last = mean(r[190..200].iter().map(|x| x.cosine));
    let usage = r[199].usage_batch;
    *out = Some(trainer.model);
    Ok(outcome(
        last <= 0.7 * first && usage >= 0.25,
        format!(
            "cosine term {first:.4} -> {last:.4} (ratio {:.3} <= 0.7), final batch usage {:.1}% >= 25% of K=64",
            last / first,
            usage * 100.0
        ),
    ))
}

fn smoke_pretrain_config() -> PretrainConfig {
    PretrainConfig {
        seed: 0,
        steps: 300,
        batch_size: 32,
        checkpoint_every: None,
        augment: false,
        data: DataConfig::synthetic(smoke_spec(), 32),
        model: MimConfig {
            codebook_size: 64,
            ..MimConfig::default()
        },
        optim: OptimConfig::pretrain_desk(),
    }
}

fn mim_smoke(tokenizer: Option<&TokenizerModel<f32>>, out: &mut Option<MimModel<f32>>) -> Result<Outcome> {
    let tokenizer = tokenizer.ok_or(Error::Empty("smoke tokenizer"))?;
    let cfg = smoke_pretrain_config();
    let corpus = cfg.data.load(Path::new("."))?;
    let (train, _) = cfg.data.split(&corpus)?;
    let mut trainer = MimTrainer::new(cfg)?;
    let mut steps = MetricsLog::in_memory();
    trainer.run(&train, tokenizer, &mut steps, &mut |_| Ok(()))?;
    let r = steps.records();
    let first = mean(r[..10].iter().map(|x| x.total));
    let last = mean(r[290..300].iter().map(|x| x.total));
    let ln_k = 64f64.ln();
    *out = Some(trainer.model);
    Ok(outcome(
        last < ln_k && last <= 0.8 * first,
        format!(
            "total loss {first:.4} -> {last:.4}, below ln 64 = {ln_k:.4} and ratio {:.3} <= 0.8",
            last / first
        ),
    ))
}

fn probe_sanity(model: Option<&MimModel<f32>>) -> Result<Outcome> {
    let model = model.ok_or(Error::Empty("pretrained backbone"))?;
    let corpus = make_synthetic_corpus(&SyntheticSpec {
        count: 640,
        seed: 9,
        ..smoke_spec()
    })?;
    let digest = model.backbone_digest();
    let features = corpus_features(model, &corpus, ReprMode::Cls, 32)?;
    let cfg = ProbeConfig::default();
    let real = linear_probe(&features, &corpus.labels, ReprMode::Cls, &cfg)?;
    let mut shuffled: Vec<u32> = (0..corpus.len()).map(|i| (i % 2) as u32).collect();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(111));
    let null = linear_probe(&features, &shuffled, ReprMode::Cls, &cfg)?;
    let frozen = model.backbone_digest() == digest;
    let margin = real.accuracy - real.majority_baseline;
    Ok(outcome(
        frozen && margin >= 0.10 && (0.35..=0.65).contains(&null.accuracy),
        format!(
            "accuracy {:.3} vs majority {:.3} (margin {:.1} points >= 10), shuffled 2-class control {:.3} in [0.35, 0.65]",
            real.accuracy,
            real.majority_baseline,
            margin * 100.0,
            null.accuracy
        ),
    ))
}

/// Pretraining run writing its metrics to `metrics`. With `interrupt_at`,
/// the run saves a checkpoint at that step, stops, and a fresh trainer
/// resumes from the file on disk.
fn pretrain_to_file(
    dir: &Path,
    tokenizer: &TokenizerModel<f32>,
    metrics: &Path,
    interrupt_at: Option<u64>,
) -> Result<()> {
    let cfg = PretrainConfig {
        seed: 5,
        steps: 16,
        batch_size: 4,
        checkpoint_every: interrupt_at,
        augment: true,
        data: DataConfig::synthetic(
            SyntheticSpec {
                count: 24,
                seed: 5,
                ..smoke_spec()
            },
            4,
        ),
        model: MimConfig {
            codebook_size: 64,
            ..MimConfig::default()
        },
        optim: OptimConfig::pretrain_desk(),
    };
    let corpus = cfg.data.load(dir)?;
    let (train, _) = cfg.data.split(&corpus)?;
    let ckpt_path = dir.join("mim.safetensors");
    let mut trainer = MimTrainer::new(cfg)?;
    let mut log = MetricsLog::to_file(metrics)?;
    let stop = trainer.run(&train, tokenizer, &mut log, &mut |c| {
        c.save(&ckpt_path)?;
        Err(Error::Config("interrupted".into()))
    });
    drop(log);
    match (stop, interrupt_at) {
        (Ok(()), None) => Ok(()),
        (Err(Error::Config(m)), Some(at)) if m == "interrupted" => {
            let ckpt = Checkpoint::load(&ckpt_path)?;
            let mut resumed = MimTrainer::from_checkpoint(&ckpt)?;
            resumed.config.checkpoint_every = None;
            let mut log = MetricsLog::resume_file(metrics, at)?;
            resumed.run(&train, tokenizer, &mut log, &mut |_| Ok(()))
        }
        (Err(e), _) => Err(e),
        (Ok(()), Some(_)) => Err(Error::Config("run finished without interruption".into())),
    }
}

fn tokenizer_to_file(dir: &Path, metrics: &Path, evals: &Path, interrupt_at: Option<u64>) -> Result<TokenizerModel<f32>> {
    let mut model = tiny_tokenizer_config();
    model.patch = PatchifyConfig::default();
    model.codebook.size = 64;
    model.codebook.dead_code_threshold = Some(3);
    let cfg = TokenizerTrainConfig {
        seed: 5,
        steps: 16,
        batch_size: 4,
        eval_every: Some(4),
        checkpoint_every: interrupt_at,
        augment: true,
        data: DataConfig::synthetic(
            SyntheticSpec {
                count: 24,
                seed: 5,
                ..smoke_spec()
            },
            4,
        ),
        model,
        optim: OptimConfig::tokenizer_desk(),
    };
    let corpus = cfg.data.load(dir)?;
    let (train, val) = cfg.data.split(&corpus)?;
    let teacher = resolve_teacher::<f32>(&cfg.model.teacher, cfg.model.teacher_dim, cfg.model.patch)?;
    let ckpt_path = dir.join("tok.safetensors");
    let mut trainer = TokenizerTrainer::new(cfg)?;
    let mut steps = MetricsLog::to_file(metrics)?;
    let mut ev = MetricsLog::to_file(evals)?;
    let stop = trainer.run(&train, &val, teacher.as_ref(), &mut steps, &mut ev, &mut |c| {
        c.save(&ckpt_path)?;
        Err(Error::Config("interrupted".into()))
    });
    drop((steps, ev));
    match (stop, interrupt_at) {
        (Ok(()), None) => Ok(trainer.model),
        (Err(Error::Config(m)), Some(at)) if m == "interrupted" => {
            let ckpt = Checkpoint::load(&ckpt_path)?;
            let mut resumed = TokenizerTrainer::from_checkpoint(&ckpt)?;
            resumed.config.checkpoint_every = None;
            let mut steps = MetricsLog::resume_file(metrics, at)?;
            let mut ev = MetricsLog::resume_file(evals, at)?;
            resumed.run(&train, &val, teacher.as_ref(), &mut steps, &mut ev, &mut |_| Ok(()))?;
            Ok(resumed.model)
        }
        (Err(e), _) => Err(e),
        (Ok(()), Some(_)) => Err(Error::Config("run finished without interruption".into())),
    }
}

fn determinism_and_resume() -> Result<Outcome> {
    let tmp = tempfile::tempdir()?;
    let dir = tmp.path();
    let read = |name: &str| fs::read(dir.join(name));
    let mut checks = Vec::new();

    let tok_a = tokenizer_to_file(dir, &dir.join("tok_a.jsonl"), &dir.join("tok_eval_a.jsonl"), None)?;
    tokenizer_to_file(dir, &dir.join("tok_b.jsonl"), &dir.join("tok_eval_b.jsonl"), None)?;
    tokenizer_to_file(dir, &dir.join("tok_r.jsonl"), &dir.join("tok_eval_r.jsonl"), Some(7))?;
    let lines = read("tok_a.jsonl")?.iter().filter(|&&b| b == b'\n').count();
    checks.push(("tokenizer repeat", read("tok_a.jsonl")? == read("tok_b.jsonl")? && lines == 16));
    checks.push(("tokenizer eval repeat", read("tok_eval_a.jsonl")? == read("tok_eval_b.jsonl")?));
    checks.push(("tokenizer resume", read("tok_a.jsonl")? == read("tok_r.jsonl")?));
    checks.push(("tokenizer eval resume", read("tok_eval_a.jsonl")? == read("tok_eval_r.jsonl")?));

    pretrain_to_file(dir, &tok_a, &dir.join("mim_a.jsonl"), None)?;
    pretrain_to_file(dir, &tok_a, &dir.join("mim_b.jsonl"), None)?;
    pretrain_to_file(dir, &tok_a, &dir.join("mim_r.jsonl"), Some(9))?;
    checks.push(("pretrain repeat", read("mim_a.jsonl")? == read("mim_b.jsonl")?));
    checks.push(("pretrain resume", read("mim_a.jsonl")? == read("mim_r.jsonl")?));

    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    Ok(outcome(
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} metrics files byte-identical across repeats and resumes", checks.len())
        } else {
            format!("mismatch in {}", failed.join(", "))
        },
    ))
}

fn main() {
    let mut report = Report { failures: Vec::new() };
    report.run(1, "quantizer-oracle equivalence", 1, quantizer_oracle);
    report.run(2, "lookup scale invariance", 1, scale_invariance);
    report.run(3, "straight-through contract", 1, straight_through_contract);
    report.run(4, "tokenizer gradient check", 30, tokenizer_gradcheck);
    report.run(5, "EMA closed form", 1, ema_closed_form);
    report.run(6, "mask statistics", 5, mask_statistics);
    report.run(7, "masked-loss locality", 1, loss_locality);
    report.run(8, "shared-head additivity", 5, shared_head_additivity);
    let mut tokenizer = None;
    report.run(9, "tokenizer smoke training", 300, || tokenizer_smoke(&mut tokenizer));
    let mut backbone = None;
    report.run(10, "pretraining smoke training", 300, || {
        mim_smoke(tokenizer.as_ref(), &mut backbone)
    });
    report.run(11, "probe sanity", 120, || probe_sanity(backbone.as_ref()));
    report.run(12, "determinism and resume", 180, determinism_and_resume);
    if !report.failures.is_empty() {
        eprintln!("failed criteria: {:?}", report.failures);
        std::process::exit(1);
    }
    println!("all criteria passed");
}
