//! Run configuration documents shared by the training loops and the CLI.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{make_synthetic_corpus, Corpus, SyntheticSpec};
use crate::{Error, Result};

/// Where images come from: a corpus directory or a synthetic spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    /// Trailing images held out for evaluation.
    #[serde(default = "default_validation")]
    pub validation_images: usize,
}

fn default_validation() -> usize {
    32
}

impl DataConfig {
    pub fn synthetic(spec: SyntheticSpec, validation_images: usize) -> Self {
        Self {
            path: None,
            synthetic: Some(spec),
            validation_images,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.path, &self.synthetic) {
            (Some(_), Some(_)) => Err(Error::Config("data: set either path or synthetic, not both".into())),
            (None, None) => Err(Error::Config("data: one of path or synthetic is required".into())),
            (None, Some(s)) => s.validate(),
            _ => Ok(()),
        }
    }

    /// Loads or generates the corpus; relative paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<Corpus> {
        self.validate()?;
        match (&self.path, &self.synthetic) {
            (Some(p), _) => Corpus::load(&base.join(p)),
            (_, Some(s)) => make_synthetic_corpus(s),
            _ => unreachable!("validated"),
        }
    }

    /// Splits into (train, validation); both must be non-empty.
    pub fn split(&self, corpus: &Corpus) -> Result<(Corpus, Corpus)> {
        let n = corpus.len();
        if n == 0 {
            return Err(Error::Empty("dataset"));
        }
        let val = self.validation_images.min(n - 1);
        if val == 0 {
            return Ok((corpus.clone(), corpus.clone()));
        }
        Ok((corpus.slice(0..n - val), corpus.slice(n - val..n)))
    }
}

/// Parses a TOML document, rejecting unknown keys and naming missing ones.
pub fn from_toml_str<C: DeserializeOwned>(text: &str) -> Result<C> {
    toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
}

pub fn load_toml<C: DeserializeOwned>(path: &Path) -> Result<C> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
}
