//! Binary container for tokenized corpora.
//!
//! Layout, little-endian: the 8-byte magic `SEMTOKTG`, then `u32` version,
//! codebook size, grid height, grid width and image count, then the 32-byte
//! SHA-256 of the tokenizer checkpoint, then one `u32` code per patch in
//! image-major, row-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::tokenizer::TokenGrid;
use crate::{Error, Result};

pub const TOKENS_MAGIC: &[u8; 8] = b"SEMTOKTG";
pub const TOKENS_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 5 * 4 + 32;

/// Token grids of a corpus together with the tokenizer that produced them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenFile {
    pub codebook_size: usize,
    pub grid: (usize, usize),
    pub checkpoint_sha256: [u8; 32],
    pub grids: Vec<TokenGrid>,
}

impl TokenFile {
    pub fn new(codebook_size: usize, grid: (usize, usize), checkpoint_sha256: [u8; 32], grids: Vec<TokenGrid>) -> Result<Self> {
        for g in &grids {
            if (g.height, g.width) != grid || g.codes.len() != grid.0 * grid.1 {
                return Err(Error::shape("token grid", &[g.height, g.width], &[grid.0, grid.1]));
            }
            if let Some(&z) = g.codes.iter().find(|&&z| z as usize >= codebook_size) {
                return Err(Error::OutOfRange {
                    what: "token code",
                    index: z as usize,
                    size: codebook_size,
                });
            }
        }
        Ok(Self {
            codebook_size,
            grid,
            checkpoint_sha256,
            grids,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.grid.0 * self.grid.1;
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * n * self.grids.len());
        out.extend_from_slice(TOKENS_MAGIC);
        for v in [
            TOKENS_VERSION,
            self.codebook_size as u32,
            self.grid.0 as u32,
            self.grid.1 as u32,
            self.grids.len() as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.checkpoint_sha256);
        for g in &self.grids {
            for &z in &g.codes {
                out.extend_from_slice(&z.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Format {
            path: "<token grids>".into(),
            msg,
        };
        if bytes.len() < HEADER_LEN || &bytes[..8] != TOKENS_MAGIC {
            return Err(bad("missing token grid header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != TOKENS_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let (k, gh, gw, count) = (word(1) as usize, word(2) as usize, word(3) as usize, word(4) as usize);
        let sha: [u8; 32] = bytes[28..60].try_into().unwrap();
        let n = gh * gw;
        let expected = n
            .checked_mul(count)
            .and_then(|c| c.checked_mul(4))
            .and_then(|c| c.checked_add(HEADER_LEN));
        if expected != Some(bytes.len()) {
            return Err(bad(format!(
                "{} bytes for {count} grids of {gh}x{gw}",
                bytes.len()
            )));
        }
        let codes: Vec<u32> = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let grids = if n == 0 {
            Vec::new()
        } else {
            codes
                .chunks(n)
                .map(|c| TokenGrid {
                    height: gh,
                    width: gw,
                    codes: c.to_vec(),
                })
                .collect()
        };
        Self::new(k, (gh, gw), sha, grids).map_err(|e| bad(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?).map_err(|e| match e {
            Error::Format { msg, .. } => Error::Format {
                path: path.display().to_string(),
                msg,
            },
            other => other,
        })
    }
}
