//! Encoder, quantizer and feature-reconstructing decoder.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::codebook::{straight_through_quantize_with, CodeAssignment, CodeSource, Codebook, UsageStats};
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::vit::{patchify_batch, trunc_normal, Block, Dropout, LayerNorm, Linear, PatchifyConfig, Vit, VitConfig};
use crate::{Error, Result};

/// How the code rows are learned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodebookUpdate {
    /// Exponential moving averages of assigned encoder outputs.
    Ema,
    /// Gradient descent on the codebook-side distance term.
    Gradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodebookConfig {
    /// Number of codes `K`.
    pub size: usize,
    /// Code dimension `D`.
    pub dim: usize,
    /// EMA decay `λ`.
    pub decay: f64,
    /// Commitment weight `β`.
    pub beta: f64,
    pub update: CodebookUpdate,
    /// Reset codes unassigned for this many consecutive steps; off when absent.
    pub dead_code_threshold: Option<u64>,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self {
            size: 512,
            dim: 16,
            decay: 0.99,
            beta: 1.0,
            update: CodebookUpdate::Ema,
            dead_code_threshold: None,
        }
    }
}

impl CodebookConfig {
    /// Full-scale codebook geometry: `K = 8192`, `D = 32`.
    pub fn paper_base() -> Self {
        Self {
            size: 8192,
            dim: 32,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            hidden_dim: 64,
            heads: 4,
            mlp_ratio: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub patch: PatchifyConfig,
    pub encoder: VitConfig,
    pub decoder: DecoderConfig,
    pub codebook: CodebookConfig,
    /// Teacher id, `frozen-vit:<seed>`.
    pub teacher: String,
    pub teacher_dim: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            patch: PatchifyConfig::default(),
            encoder: VitConfig {
                use_cls_token: false,
                ..VitConfig::default()
            },
            decoder: DecoderConfig::default(),
            codebook: CodebookConfig::default(),
            teacher: "frozen-vit:0".into(),
            teacher_dim: 32,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        self.encoder.validate()?;
        self.decoder_vit().validate()?;
        let c = &self.codebook;
        if c.size < 2 || c.dim < 1 {
            return Err(Error::Config(format!(
                "codebook needs size >= 2 and dim >= 1, got {}x{}",
                c.size, c.dim
            )));
        }
        if !(0.0..1.0).contains(&c.decay) {
            return Err(Error::Config(format!("codebook.decay must lie in [0, 1), got {}", c.decay)));
        }
        if !(c.beta >= 0.0) {
            return Err(Error::Config(format!("codebook.beta must be >= 0, got {}", c.beta)));
        }
        if c.dead_code_threshold == Some(0) {
            return Err(Error::Config("codebook.dead_code_threshold must be at least 1".into()));
        }
        if self.teacher_dim == 0 {
            return Err(Error::Config("teacher_dim must be at least 1".into()));
        }
        super::teacher::parse_teacher_id(&self.teacher)?;
        Ok(())
    }

    fn decoder_vit(&self) -> VitConfig {
        VitConfig {
            layers: self.decoder.layers,
            hidden_dim: self.decoder.hidden_dim,
            heads: self.decoder.heads,
            mlp_ratio: self.decoder.mlp_ratio,
            use_cls_token: false,
            dropout: 0.0,
        }
    }
}

/// Parameter handles of the tokenizer; values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct TokenizerNet {
    pub config: TokenizerConfig,
    pub encoder: Vit,
    pub encoder_norm: LayerNorm,
    pub down_proj: Linear,
    pub up_proj: Linear,
    pub decoder_pos: ParamId,
    pub decoder: Vec<Block>,
    pub decoder_norm: LayerNorm,
    pub out_proj: Linear,
}

impl TokenizerNet {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        config: &TokenizerConfig,
        std: f64,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        config.validate()?;
        let enc = config.encoder;
        let dec = config.decoder_vit();
        let d = config.codebook.dim;
        let encoder = Vit::with_init_std(store, "encoder", config.patch, enc, std, rng)?;
        let encoder_norm = LayerNorm::new(store, "encoder.norm", enc.hidden_dim);
        let down_proj = Linear::new(store, "quantize.down_proj", enc.hidden_dim, d, false, std, rng);
        let up_proj = Linear::new(store, "quantize.up_proj", d, dec.hidden_dim, false, std, rng);
        let n = config.patch.num_patches();
        let decoder_pos = store.add_no_decay("decoder.pos_embed", trunc_normal([n, dec.hidden_dim], std, rng));
        let decoder = (0..dec.layers)
            .map(|l| {
                Block::new(
                    store,
                    &format!("decoder.blocks.{l}"),
                    dec.hidden_dim,
                    dec.heads,
                    dec.mlp_dim(),
                    std,
                    rng,
                )
            })
            .collect();
        let decoder_norm = LayerNorm::new(store, "decoder.norm", dec.hidden_dim);
        let out_proj = Linear::new(store, "decoder.out_proj", dec.hidden_dim, config.teacher_dim, true, std, rng);
        Ok(Self {
            config: config.clone(),
            encoder,
            encoder_norm,
            down_proj,
            up_proj,
            decoder_pos,
            decoder,
            decoder_norm,
            out_proj,
        })
    }

    /// `h_proj`, the projected encoder output, `(batch·N) × D`.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        patches: Var,
        batch: usize,
        dropout: Option<Dropout<'_>>,
    ) -> Result<Var> {
        let tokens = self.encoder.embed_patches(g, store, patches, batch, None)?;
        let acts = self.encoder.forward_collect(g, store, tokens, batch, dropout)?;
        let mut h = acts.last();
        if acts.has_cls {
            let rows: Vec<usize> = (0..batch)
                .flat_map(|b| (0..acts.patches_per_image()).map(move |i| (b, i)))
                .map(|(b, i)| acts.patch_row(b, i))
                .collect();
            h = g.gather_rows(h, &rows)?;
        }
        let h = self.encoder_norm.forward(g, store, h)?;
        self.down_proj.forward(g, store, h)
    }

    /// Decoder output `o`, `(batch·N) × teacher_dim`, from quantized codes.
    pub fn decode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        quantized: Var,
        batch: usize,
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<Var> {
        let x = self.up_proj.forward(g, store, quantized)?;
        let pos = g.param(store, self.decoder_pos);
        let mut x = g.add_rows(x, pos)?;
        for block in &self.decoder {
            x = block.forward(g, store, x, batch, &mut dropout)?;
        }
        let x = self.decoder_norm.forward(g, store, x)?;
        self.out_proj.forward(g, store, x)
    }
}

/// Loss terms of one tokenizer forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VqkdLossBreakdown {
    /// Mean of `1 − cos(o_i, t_i)`.
    pub cosine_term: f64,
    /// Mean of `‖ℓ2(h_i) − sg[ℓ2(v_{z_i})]‖²`.
    pub commitment_term: f64,
    /// Mean of `‖sg[ℓ2(h_i)] − ℓ2(v_{z_i})‖²`; zero unless the codebook is gradient-trained.
    pub codebook_term: f64,
    pub total: f64,
    /// Distinct codes in the batch divided by `K`.
    pub codebook_usage_batch: f64,
}

/// Graph handles produced by [`vqkd_forward`].
#[derive(Debug, Clone)]
pub struct VqkdForward {
    pub loss: Var,
    pub h_proj: Var,
    pub output: Var,
    pub assignment: CodeAssignment,
    pub breakdown: VqkdLossBreakdown,
}

/// Extra knobs for [`vqkd_forward`].
#[derive(Debug, Clone, Copy, Default)]
pub struct VqkdOptions<'a> {
    /// Use these code ids instead of the nearest-code lookup.
    pub frozen_assignment: Option<&'a [usize]>,
    /// Trainable `K × D` code table; adds the codebook-side term.
    pub codebook_table: Option<Var>,
}

/// Tokenizer objective on a batch of patch rows against teacher features.
///
/// `total = mean(1 − cos(o, t)) + β·mean‖ℓ2(h) − sg[v_z]‖²`, plus the
/// codebook-side term when a trainable code table is supplied.
#[allow(clippy::too_many_arguments)]
pub fn vqkd_forward<T: Scalar>(
    g: &mut Graph<T>,
    net: &TokenizerNet,
    store: &ParamStore<T>,
    codebook: &Codebook<T>,
    patches: Var,
    batch: usize,
    targets: &Tensor<T>,
    options: VqkdOptions<'_>,
    mut dropout_rng: Option<&mut dyn RngCore>,
) -> Result<VqkdForward> {
    let f = net.config.teacher_dim;
    if targets.shape().len() != 2 || targets.cols() != f {
        return Err(Error::shape("teacher features", targets.shape(), &[targets.rows(), f]));
    }
    let rate = net.config.encoder.dropout;
    let enc_dropout = match &mut dropout_rng {
        Some(rng) if rate > 0.0 => Some(Dropout { rate, rng: &mut **rng }),
        _ => None,
    };
    let h_proj = net.encode(g, store, patches, batch, enc_dropout)?;
    if g.value(h_proj).rows() != targets.rows() {
        return Err(Error::shape("teacher features", targets.shape(), g.value(h_proj).shape()));
    }
    let source = match options.codebook_table {
        Some(v) => CodeSource::Trainable(v),
        None => CodeSource::Constant,
    };
    let q = straight_through_quantize_with(g, h_proj, codebook, source, options.frozen_assignment)?;
    let output = net.decode(g, store, q.output, batch, None)?;

    let on = g.l2_normalize(output, 1)?;
    let tn = g.constant(targets.l2_normalize(1)?);
    let prod = g.mul(on, tn)?;
    let cos = g.sum_rows(prod)?;
    let mean_cos = g.mean(cos)?;
    let cosine = g.affine(mean_cos, -1.0, 1.0)?;

    let code_sg = g.stop_gradient(q.code_rows)?;
    let diff = g.sub(q.normalized, code_sg)?;
    let sq = g.mul(diff, diff)?;
    let per_row = g.sum_rows(sq)?;
    let commitment = g.mean(per_row)?;
    let beta = net.config.codebook.beta;
    let weighted = g.scale(commitment, beta)?;
    let mut loss = g.add(cosine, weighted)?;

    let mut codebook_term = 0.0;
    if options.codebook_table.is_some() {
        let h_sg = g.stop_gradient(q.normalized)?;
        let diff = g.sub(h_sg, q.code_rows)?;
        let sq = g.mul(diff, diff)?;
        let per_row = g.sum_rows(sq)?;
        let term = g.mean(per_row)?;
        codebook_term = g.value(term).data()[0].as_f64();
        loss = g.add(loss, term)?;
    }
    let usage = UsageStats::from_indices(codebook.size(), q.assignment.indices.iter().copied())?;
    let breakdown = VqkdLossBreakdown {
        cosine_term: g.value(cosine).data()[0].as_f64(),
        commitment_term: g.value(commitment).data()[0].as_f64(),
        codebook_term,
        total: g.value(loss).data()[0].as_f64(),
        codebook_usage_batch: usage.fraction,
    };
    Ok(VqkdForward {
        loss,
        h_proj,
        output,
        assignment: q.assignment,
        breakdown,
    })
}

/// Per-image grid of code indices, row-major over the patch grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    pub height: usize,
    pub width: usize,
    pub codes: Vec<u32>,
}

impl TokenGrid {
    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.codes[row * self.width + col]
    }
}

/// A trained or freshly initialized tokenizer: structure, values and codebook.
#[derive(Debug, Clone)]
pub struct TokenizerModel<T> {
    pub net: TokenizerNet,
    pub store: ParamStore<T>,
    pub codebook: Codebook<T>,
}

impl<T: Scalar> TokenizerModel<T> {
    pub fn new(config: &TokenizerConfig, rng: &mut dyn RngCore) -> Result<Self> {
        Self::with_init_std(config, Vit::INIT_STD, rng)
    }

    pub fn with_init_std(config: &TokenizerConfig, std: f64, rng: &mut dyn RngCore) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = TokenizerNet::new(&mut store, config, std, rng)?;
        let c = config.codebook;
        let codebook = Codebook::new(c.size, c.dim, c.decay, rng)?;
        Ok(Self { net, store, codebook })
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.net.config
    }

    /// Projected encoder outputs for a batch of images, eval mode.
    pub fn encode_images(&self, images: &[Tensor<T>]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let patches = g.constant(patchify_batch(images, &self.net.config.patch)?);
        let h = self.net.encode(&mut g, &self.store, patches, images.len(), None)?;
        Ok(g.value(h).clone())
    }

    /// Code assignments for every patch of a batch of images.
    pub fn assign(&self, images: &[Tensor<T>]) -> Result<CodeAssignment> {
        let h = self.encode_images(images)?;
        self.codebook.lookup_nearest(&h)
    }

    pub fn tokenize(&self, image: &Tensor<T>) -> Result<TokenGrid> {
        Ok(self.tokenize_batch(std::slice::from_ref(image))?.remove(0))
    }

    pub fn tokenize_batch(&self, images: &[Tensor<T>]) -> Result<Vec<TokenGrid>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let a = self.assign(images)?;
        let (gh, gw) = self.net.config.patch.grid();
        Ok(a.indices
            .chunks(gh * gw)
            .map(|c| TokenGrid {
                height: gh,
                width: gw,
                codes: c.iter().map(|&z| z as u32).collect(),
            })
            .collect())
    }
}
