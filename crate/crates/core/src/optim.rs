//! AdamW with linear warmup and cosine learning-rate decay.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::tensor::{ParamStore, Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

fn default_eps() -> f64 {
    1e-8
}

impl OptimConfig {
    /// Tokenizer recipe: betas (0.9, 0.99), weight decay 1e-4, cosine to 1e-5.
    /// Peak rate and warmup are raised and shortened for few-hundred-step runs.
    pub fn tokenizer_desk() -> Self {
        Self {
            lr: 2e-3,
            min_lr: 1e-5,
            warmup_steps: 10,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            grad_clip: None,
        }
    }

    /// Tokenizer recipe at full scale (peak 2e-4, 5 warmup epochs in steps).
    pub fn tokenizer_paper(steps_per_epoch: u64) -> Self {
        Self {
            lr: 2e-4,
            warmup_steps: 5 * steps_per_epoch,
            ..Self::tokenizer_desk()
        }
    }

    /// Short pretraining runs on small corpora: a higher peak and no clipping.
    pub fn pretrain_desk() -> Self {
        Self {
            lr: 5e-3,
            grad_clip: None,
            ..Self::pretrain_paper(1)
        }
    }

    /// Pretraining recipe: betas (0.9, 0.98), weight decay 0.05, clip 3.0,
    /// 10 warmup epochs in steps.
    pub fn pretrain_paper(steps_per_epoch: u64) -> Self {
        Self {
            lr: 1.5e-3,
            min_lr: 1e-5,
            warmup_steps: 10 * steps_per_epoch,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            grad_clip: Some(3.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0) || !(self.min_lr >= 0.0) || self.min_lr > self.lr {
            return bad(format!("need 0 <= min_lr <= lr with lr > 0, got {} / {}", self.min_lr, self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas must lie in [0, 1), got ({}, {})", self.beta1, self.beta2));
        }
        if !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return bad("weight_decay must be >= 0 and eps > 0".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }

    /// Learning rate for 0-based `step` of a `total`-step run.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + (PI * progress).cos())
    }
}

/// A tensor optimized alongside the store (e.g. a gradient-trained codebook).
pub struct ExtraParam<'a, T> {
    pub name: &'a str,
    pub value: &'a mut Tensor<T>,
    pub grad: &'a Tensor<T>,
    pub decay: bool,
}

#[derive(Debug, Clone)]
struct Moments<T> {
    m: Tensor<T>,
    v: Tensor<T>,
}

/// Decoupled-weight-decay Adam with per-name moment state.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: OptimConfig,
    step: u64,
    state: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: OptimConfig) -> Self {
        Self {
            config,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter and each extra tensor.
    /// Returns the global gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore<T>, extra: &mut [ExtraParam<'_, T>], lr: f64) -> f64 {
        let mut sq = 0.0;
        for (_, p) in store.iter().filter(|(_, p)| p.trainable) {
            sq += p.grad().data().iter().map(|g| g.as_f64().powi(2)).sum::<f64>();
        }
        for e in extra.iter() {
            sq += e.grad.data().iter().map(|g| g.as_f64().powi(2)).sum::<f64>();
        }
        let grad_norm = sq.sqrt();
        let clip = match self.config.grad_clip {
            Some(c) if grad_norm > c => c / (grad_norm + 1e-6),
            _ => 1.0,
        };
        self.step += 1;
        for p in store.iter_mut().filter(|p| p.trainable) {
            let name = p.name.clone();
            let decay = p.decay;
            let grad = p.grad().clone();
            let mut value = p.value().clone();
            self.update(&name, &mut value, &grad, decay, lr, clip);
            p.set_value(value).expect("shape preserved");
        }
        for e in extra.iter_mut() {
            let grad = e.grad.clone();
            self.update(e.name, e.value, &grad, e.decay, lr, clip);
        }
        grad_norm
    }

    fn update(&mut self, name: &str, value: &mut Tensor<T>, grad: &Tensor<T>, decay: bool, lr: f64, clip: f64) {
        let c = self.config;
        let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: Tensor::zeros(value.shape().to_vec()),
            v: Tensor::zeros(value.shape().to_vec()),
        });
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let wd = if decay { c.weight_decay } else { 0.0 };
        let (m, v) = (st.m.data_mut(), st.v.data_mut());
        for (i, x) in value.data_mut().iter_mut().enumerate() {
            let g = grad.data()[i].as_f64() * clip;
            let mi = c.beta1 * m[i].as_f64() + (1.0 - c.beta1) * g;
            let vi = c.beta2 * v[i].as_f64() + (1.0 - c.beta2) * g * g;
            m[i] = T::of(mi);
            v[i] = T::of(vi);
            let upd = (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
            let xv = x.as_f64();
            *x = T::of(xv - lr * (upd + wd * xv));
        }
    }

    /// Moment tensors keyed `m.<name>` / `v.<name>` for persistence.
    pub fn state_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::with_capacity(2 * self.state.len());
        for (name, st) in &self.state {
            out.push((format!("m.{name}"), st.m.clone()));
            out.push((format!("v.{name}"), st.v.clone()));
        }
        out
    }

    pub fn load_state(&mut self, step: u64, tensors: Vec<(String, Tensor<T>)>) -> Result<()> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (key, t) in tensors {
            if let Some(n) = key.strip_prefix("m.") {
                m.insert(n.to_string(), t);
            } else if let Some(n) = key.strip_prefix("v.") {
                v.insert(n.to_string(), t);
            } else {
                return Err(Error::Checkpoint(format!("unexpected optimizer tensor {key}")));
            }
        }
        let mut state = BTreeMap::new();
        for (name, mt) in m {
            let vt = v
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing second moment for {name}")))?;
            state.insert(name, Moments { m: mt, v: vt });
        }
        if let Some(name) = v.keys().next() {
            return Err(Error::Checkpoint(format!("missing first moment for {name}")));
        }
        self.step = step;
        self.state = state;
        Ok(())
    }
}
