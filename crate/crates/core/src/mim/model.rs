//! Masked-token prediction with a CLS patch-aggregation branch.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::mask::MaskConfig;
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Var};
use crate::vit::{trunc_normal, Block, Dropout, LayerActivations, LayerNorm, Linear, PatchifyConfig, Vit, VitConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregationConfig {
    pub enabled: bool,
    /// 1-based layer whose patch outputs join the final CLS token;
    /// `ceil(3L/4)` when absent.
    pub layer: Option<usize>,
    pub depth: usize,
    /// One prediction head serves both losses.
    pub share_head: bool,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            layer: None,
            depth: 2,
            share_head: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MimConfig {
    pub patch: PatchifyConfig,
    pub backbone: VitConfig,
    /// Vocabulary size; must equal the tokenizer's codebook size.
    pub codebook_size: usize,
    pub mask: MaskConfig,
    pub aggregation: AggregationConfig,
}

impl Default for MimConfig {
    fn default() -> Self {
        Self {
            patch: PatchifyConfig::default(),
            backbone: VitConfig::default(),
            codebook_size: 512,
            mask: MaskConfig::default(),
            aggregation: AggregationConfig::default(),
        }
    }
}

impl MimConfig {
    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        self.backbone.validate()?;
        self.mask.validate()?;
        self.mask.bounds(self.patch.num_patches())?;
        if !self.backbone.use_cls_token {
            return Err(Error::Config("backbone.use_cls_token must be true for masked pretraining".into()));
        }
        if self.codebook_size < 2 {
            return Err(Error::Config(format!("codebook_size must be at least 2, got {}", self.codebook_size)));
        }
        let l = self.aggregation_layer();
        if l == 0 || l > self.backbone.layers {
            return Err(Error::Config(format!(
                "aggregation.layer must lie in [1, {}], got {l}",
                self.backbone.layers
            )));
        }
        if self.aggregation.enabled && self.aggregation.depth == 0 {
            return Err(Error::Config("aggregation.depth must be at least 1".into()));
        }
        Ok(())
    }

    /// 1-based aggregation layer.
    pub fn aggregation_layer(&self) -> usize {
        self.aggregation
            .layer
            .unwrap_or_else(|| (3 * self.backbone.layers).div_ceil(4))
    }
}

/// Parameter handles of the masked-prediction model.
#[derive(Debug, Clone)]
pub struct MimNet {
    pub config: MimConfig,
    pub backbone: Vit,
    pub norm: LayerNorm,
    pub mask_embedding: ParamId,
    pub head: Linear,
    /// Aggregation decoder; used only by the pretraining objective.
    pub agg_blocks: Vec<Block>,
    pub agg_norm: Option<LayerNorm>,
    /// Separate aggregation head when sharing is off.
    pub agg_head: Option<Linear>,
}

impl MimNet {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &MimConfig, rng: &mut dyn RngCore) -> Result<Self> {
        config.validate()?;
        let std = Vit::INIT_STD;
        let d = config.backbone.hidden_dim;
        let k = config.codebook_size;
        let backbone = Vit::new(store, "backbone", config.patch, config.backbone, rng)?;
        let norm = LayerNorm::new(store, "backbone.norm", d);
        let mask_embedding = store.add_no_decay("mask_embedding", trunc_normal([1, d], std, rng));
        let head = Linear::new(store, "mim_head", d, k, true, std, rng);
        let agg = config.aggregation;
        let (agg_blocks, agg_norm, agg_head) = if agg.enabled {
            let blocks = (0..agg.depth)
                .map(|i| {
                    Block::new(
                        store,
                        &format!("aggregation.blocks.{i}"),
                        d,
                        config.backbone.heads,
                        config.backbone.mlp_dim(),
                        std,
                        rng,
                    )
                })
                .collect();
            let norm = LayerNorm::new(store, "aggregation.norm", d);
            let head = (!agg.share_head).then(|| Linear::new(store, "aggregation.head", d, k, true, std, rng));
            (blocks, Some(norm), head)
        } else {
            (Vec::new(), None, None)
        };
        Ok(Self {
            config: config.clone(),
            backbone,
            norm,
            mask_embedding,
            head,
            agg_blocks,
            agg_norm,
            agg_head,
        })
    }

    /// Backbone activations for `(batch·N)` patch rows, with masked rows
    /// replaced by the mask embedding when `mask` is given.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        patches: Var,
        batch: usize,
        mask: Option<&[bool]>,
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<LayerActivations> {
        let emb = mask.map(|m| (m, g.param(store, self.mask_embedding)));
        let tokens = self.backbone.embed_patches(g, store, patches, batch, emb)?;
        let rate = self.config.backbone.dropout;
        let dropout = match dropout_rng {
            Some(rng) if rate > 0.0 => Some(Dropout { rate, rng }),
            _ => None,
        };
        self.backbone.forward_collect(g, store, tokens, batch, dropout)
    }
}

/// `mean over rows of −log softmax(logits)[target]`; errors on no rows.
pub fn mim_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::Empty("masked positions"));
    }
    let k = g.value(logits).cols();
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::OutOfRange {
            what: "target code",
            index: bad,
            size: k,
        });
    }
    g.cross_entropy(logits, targets)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MimLossBreakdown {
    pub main_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aggregation_loss: Option<f64>,
    pub total: f64,
}

/// Graph handles of one pretraining forward pass.
#[derive(Debug, Clone)]
pub struct MimForward {
    pub total: Var,
    pub main: Var,
    pub aggregation: Option<Var>,
    pub activations: LayerActivations,
    pub breakdown: MimLossBreakdown,
}

/// Both pretraining losses for a batch.
///
/// `mask` and `targets` hold one entry per patch of every image
/// (`batch·N`); only masked positions contribute. The main loss reads the
/// normalized final layer at masked patches. The aggregation loss builds
/// `S = [h_CLS^L, h_1^l … h_N^l]` per image, runs the aggregation blocks
/// over `S` and predicts the same targets.
#[allow(clippy::too_many_arguments)]
pub fn mim_forward<T: Scalar>(
    g: &mut Graph<T>,
    net: &MimNet,
    store: &ParamStore<T>,
    patches: Var,
    batch: usize,
    mask: &[bool],
    targets: &[usize],
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<MimForward> {
    let n = net.config.patch.num_patches();
    if mask.len() != batch * n || targets.len() != batch * n {
        return Err(Error::shape("mim_forward mask/targets", &[mask.len(), targets.len()], &[batch * n]));
    }
    let acts = net.encode(g, store, patches, batch, Some(mask), dropout_rng)?;
    let masked: Vec<(usize, usize)> = (0..batch)
        .flat_map(|b| (0..n).map(move |i| (b, i)))
        .filter(|&(b, i)| mask[b * n + i])
        .collect();
    let masked_targets: Vec<usize> = masked.iter().map(|&(b, i)| targets[b * n + i]).collect();

    let final_norm = net.norm.forward(g, store, acts.last())?;
    let rows: Vec<usize> = masked.iter().map(|&(b, i)| acts.patch_row(b, i)).collect();
    let h = g.gather_rows(final_norm, &rows)?;
    let logits = net.head.forward(g, store, h)?;
    let main = mim_loss(g, logits, &masked_targets)?;

    let (total, aggregation) = if net.config.aggregation.enabled {
        let agg = aggregation_loss(g, net, store, &acts, &masked, &masked_targets)?;
        (g.add(main, agg)?, Some(agg))
    } else {
        (main, None)
    };
    let scalar = |g: &Graph<T>, v: Var| g.value(v).data()[0].as_f64();
    let breakdown = MimLossBreakdown {
        main_loss: scalar(g, main),
        aggregation_loss: aggregation.map(|a| scalar(g, a)),
        total: scalar(g, total),
    };
    Ok(MimForward {
        total,
        main,
        aggregation,
        activations: acts,
        breakdown,
    })
}

fn aggregation_loss<T: Scalar>(
    g: &mut Graph<T>,
    net: &MimNet,
    store: &ParamStore<T>,
    acts: &LayerActivations,
    masked: &[(usize, usize)],
    masked_targets: &[usize],
) -> Result<Var> {
    let l = net.config.aggregation_layer();
    let layer_l = *acts.per_layer.get(l - 1).ok_or(Error::OutOfRange {
        what: "aggregation layer",
        index: l,
        size: acts.per_layer.len(),
    })?;
    let cls_rows = acts
        .cls_rows()
        .ok_or_else(|| Error::Config("patch aggregation needs a CLS token".into()))?;
    let n = acts.patches_per_image();
    let batch = acts.batch;
    let cls = g.gather_rows(acts.last(), &cls_rows)?;
    let mut parts = Vec::with_capacity(2 * batch);
    for b in 0..batch {
        parts.push(g.slice_rows(cls, b, 1)?);
        parts.push(g.slice_rows(layer_l, acts.patch_row(b, 0), n)?);
    }
    let mut s = g.concat_rows(&parts)?;
    let mut no_dropout = None;
    for block in &net.agg_blocks {
        s = block.forward(g, store, s, batch, &mut no_dropout)?;
    }
    let s = net
        .agg_norm
        .as_ref()
        .expect("aggregation enabled")
        .forward(g, store, s)?;
    let rows: Vec<usize> = masked.iter().map(|&(b, i)| b * (n + 1) + 1 + i).collect();
    let h = g.gather_rows(s, &rows)?;
    let head = net.agg_head.as_ref().unwrap_or(&net.head);
    let logits = head.forward(g, store, h)?;
    mim_loss(g, logits, masked_targets)
}

/// A masked-prediction model: structure and parameter values.
#[derive(Debug, Clone)]
pub struct MimModel<T> {
    pub net: MimNet,
    pub store: ParamStore<T>,
}

impl<T: Scalar> MimModel<T> {
    pub fn new(config: &MimConfig, rng: &mut dyn RngCore) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = MimNet::new(&mut store, config, rng)?;
        Ok(Self { net, store })
    }

    /// Digest of the parameters used by downstream evaluation: the
    /// backbone and its final norm, excluding aggregation and head weights.
    pub fn backbone_digest(&self) -> String {
        let mut sub = ParamStore::<T>::new();
        for (_, p) in self.store.iter() {
            if p.name.starts_with("backbone.") {
                sub.add(p.name.clone(), p.value().clone());
            }
        }
        sub.digest()
    }
}
