//! Patchification and a pre-norm vision Transformer.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::{Error, Result};

/// Image geometry and the square patch size that tiles it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchifyConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
}

impl Default for PatchifyConfig {
    fn default() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            channels: 3,
            patch_size: 4,
        }
    }
}

impl PatchifyConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.channels == 0 || self.image_height == 0 || self.image_width == 0 {
            return Err(Error::Config(format!("image geometry must be positive: {self:?}")));
        }
        if self.image_height % p != 0 || self.image_width % p != 0 {
            return Err(Error::Config(format!(
                "patch size {p} does not tile a {}x{} image",
                self.image_height, self.image_width
            )));
        }
        Ok(())
    }

    /// Patch grid as (rows, cols).
    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch_size, self.image_width / self.patch_size)
    }

    pub fn num_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    /// Flattened values per patch, `P²·C`.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_height, self.image_width, self.channels]
    }
}

/// Splits an `H × W × C` image into `N × (P²C)` rows in row-major patch
/// order; each row is the patch's pixels in (y, x, channel) order.
pub fn patchify<T: Scalar>(image: &Tensor<T>, cfg: &PatchifyConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    if image.shape() != cfg.image_shape() {
        return Err(Error::shape("patchify", image.shape(), &cfg.image_shape()));
    }
    let (gh, gw) = cfg.grid();
    let (p, c, w) = (cfg.patch_size, cfg.channels, cfg.image_width);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..p {
                let start = ((py * p + y) * w + px * p) * c;
                out.extend_from_slice(&src[start..start + p * c]);
            }
        }
    }
    Tensor::new([gh * gw, cfg.patch_dim()], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(patches: &Tensor<T>, cfg: &PatchifyConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    let expect = [cfg.num_patches(), cfg.patch_dim()];
    if patches.shape() != expect {
        return Err(Error::shape("unpatchify", patches.shape(), &expect));
    }
    let (gh, gw) = cfg.grid();
    let (p, c, w) = (cfg.patch_size, cfg.channels, cfg.image_width);
    let mut out = vec![T::zero(); patches.len()];
    for py in 0..gh {
        for px in 0..gw {
            let row = patches.row(py * gw + px);
            for y in 0..p {
                let start = ((py * p + y) * w + px * p) * c;
                out[start..start + p * c].copy_from_slice(&row[y * p * c..(y + 1) * p * c]);
            }
        }
    }
    Tensor::new(cfg.image_shape().to_vec(), out)
}

/// Stacks the patch rows of several images into one `(B·N) × (P²C)` tensor.
pub fn patchify_batch<T: Scalar>(images: &[Tensor<T>], cfg: &PatchifyConfig) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(images.len() * cfg.num_patches() * cfg.patch_dim());
    for img in images {
        data.extend(patchify(img, cfg)?.into_data());
    }
    Tensor::new([images.len() * cfg.num_patches(), cfg.patch_dim()], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VitConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub use_cls_token: bool,
    pub dropout: f64,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden_dim: 64,
            heads: 4,
            mlp_ratio: 4.0,
            use_cls_token: true,
            dropout: 0.0,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("a transformer needs at least one layer".into()));
        }
        if self.heads == 0 || self.hidden_dim == 0 || self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} must be a positive multiple of heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::Config(format!("mlp_ratio must be positive, got {}", self.mlp_ratio)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    pub fn mlp_dim(&self) -> usize {
        ((self.hidden_dim as f64) * self.mlp_ratio).round() as usize
    }
}

/// Truncated normal (±2σ) initializer.
pub fn trunc_normal<T: Scalar>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut dyn RngCore) -> Tensor<T> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = normal.sample(rng);
        if z.abs() <= 2.0 {
            break T::of(z * std);
        }
    })
}

/// `y = x·W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        std: f64,
        rng: &mut dyn RngCore,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), trunc_normal([fan_in, fan_out], std, rng));
        let bias = bias.then(|| store.add_no_decay(format!("{name}.bias"), Tensor::zeros([fan_out])));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_rows(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add_no_decay(format!("{name}.weight"), Tensor::full([dim], T::one())),
            beta: store.add_no_decay(format!("{name}.bias"), Tensor::zeros([dim])),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Training-time stochasticity for a forward pass.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut dyn RngCore,
}

fn apply_dropout<T: Scalar>(g: &mut Graph<T>, x: Var, dropout: &mut Option<Dropout<'_>>) -> Result<Var> {
    match dropout {
        Some(d) if d.rate > 0.0 => {
            let keep = 1.0 - d.rate;
            let n = g.value(x).len();
            let factor = (0..n)
                .map(|_| if d.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            g.mul_const(x, factor)
        }
        _ => Ok(x),
    }
}

/// Pre-norm Transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: LayerNorm,
    /// Query/key/value projection; only queries and values carry a bias.
    pub qkv: Linear,
    pub q_bias: ParamId,
    pub v_bias: ParamId,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl Block {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_dim: usize,
        std: f64,
        rng: &mut dyn RngCore,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            qkv: Linear::new(store, &format!("{name}.attn.qkv"), dim, 3 * dim, false, std, rng),
            q_bias: store.add_no_decay(format!("{name}.attn.q_bias"), Tensor::zeros([dim])),
            v_bias: store.add_no_decay(format!("{name}.attn.v_bias"), Tensor::zeros([dim])),
            proj: Linear::new(store, &format!("{name}.attn.proj"), dim, dim, true, std, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), dim, mlp_dim, true, std, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), mlp_dim, dim, true, std, rng),
            heads,
        }
    }

    /// `x` is `(batch·T) × dim`; attention runs within each image.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        batch: usize,
        dropout: &mut Option<Dropout<'_>>,
    ) -> Result<Var> {
        let h = self.norm1.forward(g, store, x)?;
        let qkv = self.qkv.forward(g, store, h)?;
        let qkv = self.add_qkv_bias(g, store, qkv)?;
        let a = g.attention(qkv, batch, self.heads)?;
        let a = self.proj.forward(g, store, a)?;
        let a = apply_dropout(g, a, dropout)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, store, x)?;
        let h = self.fc1.forward(g, store, h)?;
        let h = g.gelu(h)?;
        let h = self.fc2.forward(g, store, h)?;
        let h = apply_dropout(g, h, dropout)?;
        g.add(x, h)
    }
}

impl Block {
    fn add_qkv_bias<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, qkv: Var) -> Result<Var> {
        let q = g.param(store, self.q_bias);
        let v = g.param(store, self.v_bias);
        let d = g.value(q).len();
        let k = g.constant(Tensor::zeros([d]));
        let rows = g.concat_rows(&[q, k, v])?;
        let bias = g.reshape(rows, &[3 * d])?;
        g.add_rows(qkv, bias)
    }
}

/// Every block's output for a batch, `(batch·T) × dim` each.
#[derive(Debug, Clone)]
pub struct LayerActivations {
    pub per_layer: Vec<Var>,
    pub batch: usize,
    /// Tokens per image, `N` plus one when a CLS token leads the sequence.
    pub tokens_per_image: usize,
    pub has_cls: bool,
}

impl LayerActivations {
    pub fn last(&self) -> Var {
        *self.per_layer.last().expect("at least one layer")
    }

    /// Row index of patch `i` of image `b` in any layer output.
    pub fn patch_row(&self, b: usize, i: usize) -> usize {
        b * self.tokens_per_image + i + usize::from(self.has_cls)
    }

    /// Rows holding the CLS token of each image.
    pub fn cls_rows(&self) -> Option<Vec<usize>> {
        self.has_cls
            .then(|| (0..self.batch).map(|b| b * self.tokens_per_image).collect())
    }

    pub fn patches_per_image(&self) -> usize {
        self.tokens_per_image - usize::from(self.has_cls)
    }
}

/// Assembles the Transformer input sequence from projected patches.
///
/// Masked rows of `projected` (`(batch·N) × d`) are replaced by the mask
/// embedding first, then the CLS token is prepended per image, then the
/// positional table's leading rows are added, so masked tokens keep their
/// positional identity.
pub fn embed_tokens<T: Scalar>(
    g: &mut Graph<T>,
    projected: Var,
    batch: usize,
    pos: Var,
    cls: Option<Var>,
    mask: Option<(&[bool], Var)>,
) -> Result<Var> {
    let (rows, dim) = g.value(projected).dims2()?;
    if batch == 0 || rows % batch != 0 {
        return Err(Error::InvalidShape {
            shape: g.value(projected).shape().to_vec(),
            msg: format!("not divisible into {batch} images"),
        });
    }
    let n = rows / batch;
    let seq = n + usize::from(cls.is_some());
    let (pos_rows, pos_dim) = g.value(pos).dims2()?;
    if pos_dim != dim {
        return Err(Error::shape("embed_tokens", g.value(projected).shape(), g.value(pos).shape()));
    }
    if pos_rows < seq {
        return Err(Error::InvalidShape {
            shape: g.value(pos).shape().to_vec(),
            msg: format!("positional table has {pos_rows} rows, sequence needs {seq}"),
        });
    }
    let mut x = projected;
    if let Some((m, emb)) = mask {
        x = g.replace_rows(x, emb, m)?;
    }
    if let Some(cls) = cls {
        let cls = if g.value(cls).shape().len() == 1 {
            // A rank-1 token concatenates as a single row.
            g.slice_rows(cls, 0, 1)?
        } else {
            cls
        };
        let mut parts = Vec::with_capacity(2 * batch);
        for b in 0..batch {
            parts.push(cls);
            parts.push(g.slice_rows(x, b * n, n)?);
        }
        x = g.concat_rows(&parts)?;
    }
    let pos = if pos_rows == seq { pos } else { g.slice_rows(pos, 0, seq)? };
    g.add_rows(x, pos)
}

/// Vision Transformer encoder.
#[derive(Debug, Clone)]
pub struct Vit {
    pub patch: PatchifyConfig,
    pub config: VitConfig,
    pub patch_embed: Linear,
    pub pos_embed: ParamId,
    pub cls_token: Option<ParamId>,
    pub blocks: Vec<Block>,
}

impl Vit {
    pub const INIT_STD: f64 = 0.02;

    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        patch: PatchifyConfig,
        config: VitConfig,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        Self::with_init_std(store, prefix, patch, config, Self::INIT_STD, rng)
    }

    pub fn with_init_std<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        patch: PatchifyConfig,
        config: VitConfig,
        std: f64,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        patch.validate()?;
        config.validate()?;
        let d = config.hidden_dim;
        let patch_embed = Linear::new(store, &format!("{prefix}.patch_embed"), patch.patch_dim(), d, true, std, rng);
        let seq = patch.num_patches() + usize::from(config.use_cls_token);
        let pos_embed = store.add_no_decay(format!("{prefix}.pos_embed"), trunc_normal([seq, d], std, rng));
        let cls_token = config
            .use_cls_token
            .then(|| store.add_no_decay(format!("{prefix}.cls_token"), trunc_normal([1, d], std, rng)));
        let blocks = (0..config.layers)
            .map(|l| Block::new(store, &format!("{prefix}.blocks.{l}"), d, config.heads, config.mlp_dim(), std, rng))
            .collect();
        Ok(Self {
            patch,
            config,
            patch_embed,
            pos_embed,
            cls_token,
            blocks,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.patch.num_patches() + usize::from(self.config.use_cls_token)
    }

    /// Projects `(batch·N) × (P²C)` patch rows and assembles the token
    /// sequence, optionally replacing masked patches by `mask`'s embedding.
    pub fn embed_patches<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        patches: Var,
        batch: usize,
        mask: Option<(&[bool], Var)>,
    ) -> Result<Var> {
        let (rows, cols) = g.value(patches).dims2()?;
        if cols != self.patch.patch_dim() || rows != batch * self.patch.num_patches() {
            return Err(Error::shape(
                "embed_patches",
                g.value(patches).shape(),
                &[batch * self.patch.num_patches(), self.patch.patch_dim()],
            ));
        }
        let projected = self.patch_embed.forward(g, store, patches)?;
        let pos = g.param(store, self.pos_embed);
        let cls = self.cls_token.map(|c| g.param(store, c));
        embed_tokens(g, projected, batch, pos, cls, mask)
    }

    /// Runs every block, returning each block's output.
    pub fn forward_collect<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        tokens: Var,
        batch: usize,
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<LayerActivations> {
        let (rows, cols) = g.value(tokens).dims2()?;
        let t = self.seq_len();
        if cols != self.config.hidden_dim || rows != batch * t {
            return Err(Error::shape(
                "forward_collect",
                g.value(tokens).shape(),
                &[batch * t, self.config.hidden_dim],
            ));
        }
        let mut x = tokens;
        let mut per_layer = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            x = block.forward(g, store, x, batch, &mut dropout)?;
            per_layer.push(x);
        }
        Ok(LayerActivations {
            per_layer,
            batch,
            tokens_per_image: t,
            has_cls: self.config.use_cls_token,
        })
    }

    /// Patchify, embed and encode a batch of images in eval mode.
    pub fn encode_images<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: &[Tensor<T>],
    ) -> Result<LayerActivations> {
        let patches = g.constant(patchify_batch(images, &self.patch)?);
        let tokens = self.embed_patches(g, store, patches, images.len(), None)?;
        self.forward_collect(g, store, tokens, images.len(), None)
    }
}
