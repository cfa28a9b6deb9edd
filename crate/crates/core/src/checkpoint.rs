//! Versioned checkpoint container.
//!
//! A checkpoint is a safetensors file. Tensor names are
//!
//! - `param.<name>` for model parameters (`F32` or `F64`),
//! - `codebook.embeddings`, `codebook.ema_cluster_size`,
//!   `codebook.ema_embed_sum` (float) and `codebook.usage_count`,
//!   `codebook.steps_since_used` (`U64`),
//! - `optim.m.<name>` / `optim.v.<name>` for AdamW moments.
//!
//! The header's `__metadata__` map holds a single key, `semtok`, whose value
//! is a JSON document with the format version, checkpoint kind, step
//! counter, run configuration snapshot and the run's ChaCha8 generator
//! state. Keeping one key makes the header byte-deterministic.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, SafeTensors, TensorView, View};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codebook::Codebook;
use crate::optim::AdamW;
use crate::tensor::{DType, ParamStore, Scalar, Tensor};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const META_KEY: &str = "semtok";

/// A named tensor as persisted.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U64 { shape: Vec<usize>, data: Vec<u64> },
}

impl StoredTensor {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => Self::F32(t.cast()),
            DType::F64 => Self::F64(t.cast()),
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Self::F32(t) => t.shape(),
            Self::F64(t) => t.shape(),
            Self::U64 { shape, .. } => shape,
        }
    }

    /// The tensor in precision `T`; float tensors of either width convert.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        match self {
            Self::F32(t) => Ok(t.cast()),
            Self::F64(t) => Ok(t.cast()),
            Self::U64 { .. } => Err(Error::Checkpoint("expected a float tensor, found u64".into())),
        }
    }

    pub fn to_u64(&self) -> Result<Vec<u64>> {
        match self {
            Self::U64 { data, .. } => Ok(data.clone()),
            _ => Err(Error::Checkpoint("expected a u64 tensor".into())),
        }
    }

    fn bytes(&self) -> Vec<u8> {
        match self {
            Self::F32(t) => t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
            Self::F64(t) => t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
            Self::U64 { data, .. } => data.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }
}

struct Owned {
    dtype: Dtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl View for &Owned {
    fn dtype(&self) -> Dtype {
        self.dtype
    }
    fn shape(&self) -> &[usize] {
        &self.shape
    }
    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.bytes)
    }
    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

/// Full ChaCha8 generator state: key, stream and word position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal `u128`.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = |m: &str| Error::Checkpoint(format!("invalid rng state: {m}"));
        let bytes = hex::decode(&self.seed).map_err(|_| bad("seed is not hex"))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed must be 32 bytes"))?;
        let word_pos: u128 = self.word_pos.parse().map_err(|_| bad("word position"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    kind: String,
    step: u64,
    config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rng: Option<RngState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub step: u64,
    pub config: serde_json::Value,
    pub rng: Option<RngState>,
    pub tensors: BTreeMap<String, StoredTensor>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, step: u64, config: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            step,
            config,
            rng: None,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: StoredTensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&StoredTensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    /// Stores every parameter as `param.<name>`.
    pub fn put_params<T: Scalar>(&mut self, store: &ParamStore<T>) {
        for (_, p) in store.iter() {
            self.insert(format!("param.{}", p.name), StoredTensor::from_tensor(p.value()));
        }
    }

    /// Overwrites every parameter of `store` from `param.<name>` entries;
    /// shapes must match and no parameter may be missing.
    pub fn load_params<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let expected: usize = self.tensors.keys().filter(|k| k.starts_with("param.")).count();
        if expected != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {expected} parameters, model has {}",
                store.len()
            )));
        }
        for p in store.iter_mut() {
            let t = self.get(&format!("param.{}", p.name))?.to_tensor::<T>()?;
            if t.shape() != p.value().shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value().shape()
                )));
            }
            p.set_value(t)?;
        }
        Ok(())
    }

    pub fn put_codebook<T: Scalar>(&mut self, cb: &Codebook<T>) {
        let k = cb.size();
        self.insert("codebook.embeddings", StoredTensor::from_tensor(cb.embeddings()));
        self.insert("codebook.ema_embed_sum", StoredTensor::from_tensor(cb.ema_embed_sum()));
        let sizes = Tensor::new([k], cb.ema_cluster_size().to_vec()).expect("length K");
        self.insert("codebook.ema_cluster_size", StoredTensor::from_tensor(&sizes));
        self.insert(
            "codebook.usage_count",
            StoredTensor::U64 {
                shape: vec![k],
                data: cb.usage_count().to_vec(),
            },
        );
        self.insert(
            "codebook.steps_since_used",
            StoredTensor::U64 {
                shape: vec![k],
                data: cb.steps_since_used().to_vec(),
            },
        );
    }

    pub fn load_codebook<T: Scalar>(&self, decay: f64) -> Result<Codebook<T>> {
        Codebook::from_parts(
            self.get("codebook.embeddings")?.to_tensor()?,
            self.get("codebook.ema_cluster_size")?.to_tensor::<T>()?.into_data(),
            self.get("codebook.ema_embed_sum")?.to_tensor()?,
            decay,
            self.get("codebook.usage_count")?.to_u64()?,
            self.get("codebook.steps_since_used")?.to_u64()?,
        )
    }

    pub fn put_optimizer<T: Scalar>(&mut self, opt: &AdamW<T>) {
        for (name, t) in opt.state_tensors() {
            self.insert(format!("optim.{name}"), StoredTensor::from_tensor(&t));
        }
    }

    pub fn load_optimizer<T: Scalar>(&self, opt: &mut AdamW<T>) -> Result<()> {
        let mut state = Vec::new();
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix("optim.") {
                state.push((rest.to_string(), t.to_tensor::<T>()?));
            }
        }
        opt.load_state(self.step, state)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            step: self.step,
            config: self.config.clone(),
            rng: self.rng.clone(),
        };
        let meta = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&header)?)]);
        let owned: Vec<(String, Owned)> = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let dtype = match t {
                    StoredTensor::F32(_) => Dtype::F32,
                    StoredTensor::F64(_) => Dtype::F64,
                    StoredTensor::U64 { .. } => Dtype::U64,
                };
                let o = Owned {
                    dtype,
                    shape: t.shape().to_vec(),
                    bytes: t.bytes(),
                };
                (name.clone(), o)
            })
            .collect();
        safetensors::serialize(owned.iter().map(|(n, o)| (n.as_str(), o)), Some(meta))
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let (_, metadata) = SafeTensors::read_metadata(bytes).map_err(|e| bad(e.to_string()))?;
        let header_json = metadata
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| bad("header lacks run metadata".into()))?;
        let header: Header = serde_json::from_str(header_json).map_err(|e| bad(format!("metadata: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", header.format_version)));
        }
        let st = SafeTensors::deserialize(bytes).map_err(|e| bad(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.iter() {
            tensors.insert(name.to_string(), decode(&view)?);
        }
        Ok(Self {
            kind: header.kind,
            step: header.step,
            config: header.config,
            rng: header.rng,
            tensors,
        })
    }

    /// Writes through a temporary sibling and renames into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Format {
                path: path.display().to_string(),
                msg,
            },
            other => other,
        })
    }
}

fn decode(view: &TensorView<'_>) -> Result<StoredTensor> {
    let shape = view.shape().to_vec();
    let raw = view.data();
    let t = match view.dtype() {
        Dtype::F32 => {
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            StoredTensor::F32(Tensor::new(shape, data)?)
        }
        Dtype::F64 => {
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            StoredTensor::F64(Tensor::new(shape, data)?)
        }
        Dtype::U64 => {
            let data = raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
            StoredTensor::U64 { shape, data }
        }
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    };
    Ok(t)
}

/// SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<[u8; 32]> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(&bytes).into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new("test", 7, serde_json::json!({"a": 1, "b": [1.5, 2.0]}));
        c.insert("param.w", StoredTensor::F32(Tensor::from_f64([2, 2], &[1.0, -0.1, 3.25, 1e-30]).unwrap()));
        c.insert("param.x", StoredTensor::F64(Tensor::from_f64([3], &[0.1, 0.2, 0.3]).unwrap()));
        c.insert(
            "codebook.usage_count",
            StoredTensor::U64 {
                shape: vec![2],
                data: vec![0, u64::MAX],
            },
        );
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut c = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        rng.next_u64();
        c.rng = Some(RngState::capture(&rng));
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let mut restored = back.rng.unwrap().restore().unwrap();
        assert_eq!(restored.next_u64(), rng.next_u64());
    }

    #[test]
    fn serialization_is_deterministic() {
        assert_eq!(sample().to_bytes().unwrap(), sample().to_bytes().unwrap());
    }

    #[test]
    fn corrupt_bytes_are_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        assert!(Checkpoint::from_bytes(b"not a checkpoint").is_err());
    }

    #[test]
    fn params_round_trip_through_store() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
        let mut c = Checkpoint::new("test", 0, serde_json::Value::Null);
        c.put_params(&store);
        let mut other = ParamStore::<f32>::new();
        other.add("a", Tensor::zeros([2]));
        c.load_params(&mut other).unwrap();
        assert_eq!(other.digest(), store.digest());
        let mut wrong = ParamStore::<f32>::new();
        wrong.add("a", Tensor::zeros([3]));
        assert!(c.load_params(&mut wrong).is_err());
    }
}
