//! Teacher oracles: frozen per-patch feature extractors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{norm, Graph, ParamStore, Scalar, Tensor, NORM_EPS};
use crate::vit::{PatchifyConfig, Vit, VitConfig};
use crate::{Error, Result};

/// Deterministic map from images to `N × feature_dim` per-patch features.
pub trait TeacherOracle<T: Scalar>: Send + Sync {
    fn feature_dim(&self) -> usize;

    fn patch_config(&self) -> PatchifyConfig;

    /// Features of every patch of every image, `(batch·N) × feature_dim`.
    fn evaluate(&self, images: &[Tensor<T>]) -> Result<Tensor<T>>;
}

/// A randomly initialized, permanently frozen small ViT.
///
/// Weights are drawn with a larger spread than trainable models use so the
/// features respond strongly to patch content. The final block's output
/// rows are the features.
#[derive(Debug, Clone)]
pub struct FrozenVitTeacher<T> {
    pub seed: u64,
    vit: Vit,
    store: ParamStore<T>,
}

pub const TEACHER_LAYERS: usize = 2;
pub const TEACHER_INIT_STD: f64 = 0.2;

pub fn make_frozen_teacher<T: Scalar>(
    seed: u64,
    feature_dim: usize,
    patch: PatchifyConfig,
) -> Result<FrozenVitTeacher<T>> {
    if feature_dim == 0 {
        return Err(Error::Config("teacher feature_dim must be at least 1".into()));
    }
    let heads = [4, 2, 1].into_iter().find(|h| feature_dim % h == 0).unwrap_or(1);
    let config = VitConfig {
        layers: TEACHER_LAYERS,
        hidden_dim: feature_dim,
        heads,
        mlp_ratio: 2.0,
        use_cls_token: false,
        dropout: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<T>::new();
    let vit = Vit::with_init_std(&mut store, "teacher", patch, config, TEACHER_INIT_STD, &mut rng)?;
    store.set_trainable(false);
    Ok(FrozenVitTeacher { seed, vit, store })
}

impl<T: Scalar> TeacherOracle<T> for FrozenVitTeacher<T> {
    fn feature_dim(&self) -> usize {
        self.vit.config.hidden_dim
    }

    fn patch_config(&self) -> PatchifyConfig {
        self.vit.patch
    }

    fn evaluate(&self, images: &[Tensor<T>]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let acts = self.vit.encode_images(&mut g, &self.store, images)?;
        let feats = g.value(acts.last()).clone();
        for i in 0..feats.rows() {
            let n = norm(feats.row(i));
            if n < NORM_EPS {
                return Err(Error::DegenerateVector {
                    index: i,
                    norm: n,
                    eps: NORM_EPS,
                });
            }
        }
        Ok(feats)
    }
}

/// Resolves a `name:seed` teacher id. The only family is `frozen-vit`.
pub fn resolve_teacher<T: Scalar>(
    id: &str,
    feature_dim: usize,
    patch: PatchifyConfig,
) -> Result<Box<dyn TeacherOracle<T>>> {
    let seed = parse_teacher_id(id)?;
    Ok(Box::new(make_frozen_teacher::<T>(seed, feature_dim, patch)?))
}

pub fn parse_teacher_id(id: &str) -> Result<u64> {
    let (name, seed) = id
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("teacher id {id:?} must look like frozen-vit:<seed>")))?;
    if name != "frozen-vit" {
        return Err(Error::Config(format!("unknown teacher family {name:?}; expected frozen-vit")));
    }
    seed.parse()
        .map_err(|_| Error::Config(format!("teacher seed {seed:?} is not an unsigned integer")))
}
