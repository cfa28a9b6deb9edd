use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use semtok_core::checkpoint::{file_digest, Checkpoint};
use semtok_core::data::Corpus;
use semtok_core::eval::tokenize_corpus;
use semtok_core::tokenizer::load_tokenizer;
use semtok_core::tokens::TokenFile;

fn semtok(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semtok"))
        .args(args)
        .env("SEMTOK_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn semtok")
}

fn ok(args: &[&str]) {
    let out = semtok(args);
    assert!(
        out.status.success(),
        "semtok {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TOKENIZER_TOML: &str = r#"
seed = 3
steps = 6
batch_size = 4
eval_every = 3
checkpoint_every = 3

[data]
path = "corpus"
validation_images = 4

[model]
teacher = "frozen-vit:1"
teacher_dim = 8

[model.encoder]
layers = 1
hidden_dim = 8
heads = 2
mlp_ratio = 2.0
use_cls_token = false

[model.decoder]
layers = 1
hidden_dim = 8
heads = 2
mlp_ratio = 2.0

[model.codebook]
size = 16
dim = 4
"#;

const PRETRAIN_TOML: &str = r#"
seed = 4
steps = 6
batch_size = 4
checkpoint_every = 3
augment = false

[data]
path = "corpus"
validation_images = 4

[model]
codebook_size = 16

[model.backbone]
layers = 2
hidden_dim = 8
heads = 2
mlp_ratio = 2.0
use_cls_token = true

[model.aggregation]
enabled = true
depth = 1
"#;

/// A work directory holding a 24-image corpus and both configs.
struct Workspace {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        ok(&["make-corpus", "--count", "24", "--seed", "2", "--out", p(&root.join("corpus"))]);
        Self { _tmp: tmp, root }
    }

    fn write(&self, name: &str, text: &str) -> PathBuf {
        let path = self.root.join(name);
        fs::write(&path, text).unwrap();
        path
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn tokenizer(&self, toml: &str, out: &str) -> PathBuf {
        let cfg = self.write(&format!("{out}.toml"), toml);
        ok(&["train-tokenizer", "--config", p(&cfg), "--out", p(&self.path(out))]);
        self.path(out).join("tokenizer.safetensors")
    }
}

#[test]
fn make_corpus_empty_and_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    ok(&["make-corpus", "--count", "0", "--out", p(&empty)]);
    let c = Corpus::load(&empty).unwrap();
    assert_eq!(c.len(), 0);
    assert_eq!((c.height, c.width), (32, 32));

    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        ok(&["make-corpus", "--count", "10", "--seed", "11", "--out", p(dir)]);
    }
    for f in ["images.bin", "index.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

/// Welch t statistic of the per-image channel means between two classes.
fn welch_t(x: &[f64], y: &[f64]) -> f64 {
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (n - 1.0);
        (n, m, var)
    };
    let (nx, mx, vx) = stats(x);
    let (ny, my, vy) = stats(y);
    (mx - my) / (vx / nx + vy / ny).sqrt()
}

#[test]
fn make_corpus_classes_differ_in_pixel_statistics() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("c");
    ok(&["make-corpus", "--count", "200", "--classes", "2", "--seed", "7", "--out", p(&dir)]);
    let c = Corpus::load(&dir).unwrap();
    // Two-sided p < 0.01 with a Bonferroni factor of 3 channels needs
    // |t| > 2.94 at these sample sizes.
    let mut best = 0.0f64;
    for ch in 0..c.channels {
        let mut by_class = [Vec::new(), Vec::new()];
        for i in 0..c.len() {
            let px = c.pixels(i);
            let vals: Vec<f64> = px.iter().skip(ch).step_by(c.channels).map(|&v| v as f64).collect();
            by_class[c.labels[i] as usize].push(vals.iter().sum::<f64>() / vals.len() as f64);
        }
        best = best.max(welch_t(&by_class[0], &by_class[1]).abs());
    }
    assert!(best > 2.94, "largest |t| = {best}");
}

#[test]
fn missing_config_key_exits_2_naming_it() {
    let ws = Workspace::new();
    let cfg = ws.write("bad.toml", &TOKENIZER_TOML.replace("steps = 6\n", ""));
    let out = semtok(&["train-tokenizer", "--config", p(&cfg), "--out", p(&ws.path("bad"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("steps"), "{err}");
    assert!(!ws.path("bad").exists());

    let cfg = ws.write("unknown.toml", &format!("bogus = 1\n{TOKENIZER_TOML}"));
    let out = semtok(&["train-tokenizer", "--config", p(&cfg), "--out", p(&ws.path("unknown"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn zero_steps_writes_initial_checkpoint_and_empty_log() {
    let ws = Workspace::new();
    let ckpt = ws.tokenizer(&TOKENIZER_TOML.replace("steps = 6", "steps = 0"), "init");
    let c = Checkpoint::load(&ckpt).unwrap();
    assert_eq!(c.step, 0);
    assert!(fs::read(ws.path("init/metrics.jsonl")).unwrap().is_empty());
}

#[test]
fn tokenizer_runs_are_deterministic_and_resumable() {
    let ws = Workspace::new();
    let a = ws.tokenizer(TOKENIZER_TOML, "a");
    let b = ws.tokenizer(TOKENIZER_TOML, "b");
    for f in ["metrics.jsonl", "eval.jsonl", "tokenizer.safetensors"] {
        assert_eq!(fs::read(ws.path("a").join(f)).unwrap(), fs::read(ws.path("b").join(f)).unwrap(), "{f}");
    }
    assert_eq!(fs::read_to_string(ws.path("a/metrics.jsonl")).unwrap().lines().count(), 6);
    assert_eq!(fs::read_to_string(ws.path("a/eval.jsonl")).unwrap().lines().count(), 2);

    let mid = ws.path("b/checkpoints/step-00000003.safetensors");
    ok(&["train-tokenizer", "--resume", p(&mid), "--out", p(&ws.path("b"))]);
    for f in ["metrics.jsonl", "eval.jsonl", "tokenizer.safetensors"] {
        assert_eq!(fs::read(ws.path("a").join(f)).unwrap(), fs::read(ws.path("b").join(f)).unwrap(), "{f}");
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let out = semtok(&["train-tokenizer", "--resume", p(&mid), "--seed", "99", "--out", p(&ws.path("c"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn teacher_flag_overrides_config() {
    let ws = Workspace::new();
    let cfg = ws.write("t.toml", &TOKENIZER_TOML.replace("steps = 6", "steps = 1"));
    ok(&["train-tokenizer", "--config", p(&cfg), "--teacher", "frozen-vit:5", "--out", p(&ws.path("t"))]);
    let c = Checkpoint::load(&ws.path("t/tokenizer.safetensors")).unwrap();
    assert_eq!(c.config["model"]["teacher"], "frozen-vit:5");

    let out = semtok(&["train-tokenizer", "--config", p(&cfg), "--teacher", "clip:1", "--out", p(&ws.path("u"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pretrain_resume_and_aggregation_column() {
    let ws = Workspace::new();
    let tok = ws.tokenizer(&TOKENIZER_TOML.replace("steps = 6", "steps = 2"), "tok");
    let cfg = ws.write("mim.toml", PRETRAIN_TOML);
    for out in ["m1", "m2"] {
        ok(&["pretrain", "--config", p(&cfg), "--tokenizer", p(&tok), "--out", p(&ws.path(out))]);
    }
    let full = fs::read(ws.path("m1/metrics.jsonl")).unwrap();
    assert_eq!(full, fs::read(ws.path("m2/metrics.jsonl")).unwrap());
    let first: serde_json::Value = serde_json::from_str(std::str::from_utf8(&full).unwrap().lines().next().unwrap()).unwrap();
    assert!(first.get("aggregation_loss").is_some());

    let mid = ws.path("m2/checkpoints/step-00000003.safetensors");
    ok(&["pretrain", "--resume", p(&mid), "--tokenizer", p(&tok), "--out", p(&ws.path("m2"))]);
    assert_eq!(full, fs::read(ws.path("m2/metrics.jsonl")).unwrap());
    assert_eq!(
        fs::read(ws.path("m1/mim.safetensors")).unwrap(),
        fs::read(ws.path("m2/mim.safetensors")).unwrap()
    );

    let cfg = ws.write("noagg.toml", &PRETRAIN_TOML.replace("enabled = true", "enabled = false"));
    ok(&["pretrain", "--config", p(&cfg), "--tokenizer", p(&tok), "--out", p(&ws.path("noagg"))]);
    for line in fs::read_to_string(ws.path("noagg/metrics.jsonl")).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("aggregation_loss").is_none(), "{line}");
        assert!(v.get("main_loss").is_some());
    }
}

#[test]
fn pretrain_geometry_mismatch_exits_2_naming_both() {
    let ws = Workspace::new();
    let tok = ws.tokenizer(&TOKENIZER_TOML.replace("steps = 6", "steps = 0"), "tok");
    let cfg = ws.write(
        "mim8.toml",
        &PRETRAIN_TOML.replace("[model]\n", "[model]\npatch = { patch_size = 8 }\n"),
    );
    let out = semtok(&["pretrain", "--config", p(&cfg), "--tokenizer", p(&tok), "--out", p(&ws.path("m"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("patch size 4") && err.contains("patch size 8"), "{err}");
}

#[test]
fn tokenize_single_image_matches_in_process() {
    let ws = Workspace::new();
    let tok = ws.tokenizer(&TOKENIZER_TOML.replace("steps = 6", "steps = 2"), "tok");
    let one = ws.path("one");
    ok(&["make-corpus", "--count", "1", "--seed", "3", "--out", p(&one)]);
    let (f1, f2) = (ws.path("one.tokens"), ws.path("one2.tokens"));
    for f in [&f1, &f2] {
        ok(&["tokenize", "--tokenizer", p(&tok), "--corpus", p(&one), "--out", p(f)]);
    }
    assert_eq!(fs::read(&f1).unwrap(), fs::read(&f2).unwrap());
    let file = TokenFile::load(&f1).unwrap();
    assert_eq!(file.grids.len(), 1);
    assert_eq!(file.grid, (8, 8));
    assert_eq!(file.codebook_size, 16);
    assert_eq!(file.checkpoint_sha256, file_digest(&tok).unwrap());

    let model = load_tokenizer::<f32>(&Checkpoint::load(&tok).unwrap()).unwrap();
    let expected = tokenize_corpus(&model, &Corpus::load(&one).unwrap(), 32).unwrap();
    assert_eq!(file.grids, expected);
}

#[test]
fn codebook_report_conserves_counts() {
    let ws = Workspace::new();
    let tok = ws.tokenizer(&TOKENIZER_TOML.replace("steps = 6", "steps = 2"), "tok");
    let one = ws.path("one");
    ok(&["make-corpus", "--count", "1", "--out", p(&one)]);
    let out = ws.path("report.json");
    ok(&["codebook-report", "--tokenizer", p(&tok), "--corpus", p(&one), "--out", p(&out)]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let hist: Vec<u64> = serde_json::from_value(v["histogram"].clone()).unwrap();
    assert_eq!(hist.len(), 16);
    assert_eq!(hist.iter().sum::<u64>(), 64);
    let used = hist.iter().filter(|&&h| h > 0).count();
    assert_eq!(v["used_codes"], used);
    assert_eq!(v["grouping"].as_object().unwrap().len(), used);
}

/// Dark images in class 0, bright ones in class 1.
fn separable_corpus(dir: &Path) {
    let mut c = Corpus::new(32, 32, 3, 2);
    for i in 0..60u32 {
        let label = i % 2;
        let base = if label == 0 { 50u32 } else { 200 };
        let pixels = (0..32 * 32 * 3u32).map(|j| (base + (j * 7 + i * 13) % 20) as u8).collect();
        c.push(pixels, label).unwrap();
    }
    c.save(dir).unwrap();
}

#[test]
fn probe_on_frozen_stub_separates_and_echoes_mode() {
    let ws = Workspace::new();
    let tok = ws.tokenizer(&TOKENIZER_TOML.replace("steps = 6", "steps = 0"), "tok");
    let cfg = ws.write("stub.toml", &PRETRAIN_TOML.replace("steps = 6", "steps = 0"));
    ok(&["pretrain", "--config", p(&cfg), "--tokenizer", p(&tok), "--out", p(&ws.path("stub"))]);
    let stub = ws.path("stub/mim.safetensors");
    let data = ws.path("sep");
    separable_corpus(&data);
    for mode in ["mean-patch", "cls"] {
        let out = ws.path(&format!("probe-{mode}.json"));
        ok(&["probe", "--checkpoint", p(&stub), "--corpus", p(&data), "--mode", mode, "--out", p(&out)]);
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
        assert_eq!(v["representation_mode"], mode);
        assert!(v["accuracy"].as_f64().unwrap() >= 0.95, "{mode}: {v}");
    }
    let out = semtok(&["probe", "--checkpoint", p(&stub), "--corpus", p(&data), "--mode", "pooled", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn corrupt_checkpoint_fails() {
    let ws = Workspace::new();
    let bad = ws.write("bad.safetensors", "not a checkpoint");
    let out = semtok(&["tokenize", "--tokenizer", p(&bad), "--corpus", p(&ws.path("corpus")), "--out", p(&ws.path("t"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!ws.path("t").exists());
}
