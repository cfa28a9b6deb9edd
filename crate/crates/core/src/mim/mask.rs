//! Block-wise masking over the patch grid.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Aspect-ratio bounds of sampled blocks are `[MIN_ASPECT, 1/MIN_ASPECT]`.
pub const MIN_ASPECT: f64 = 0.3;
const MAX_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub ratio: f64,
    /// Smallest block area; 4 for grids of at most 64 patches, else 16.
    pub min_block: Option<usize>,
    /// Largest block area; `ratio·N` when absent.
    pub max_block: Option<usize>,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            ratio: 0.4,
            min_block: None,
            max_block: None,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::Config(format!("mask ratio must lie in (0, 1), got {}", self.ratio)));
        }
        if self.min_block == Some(0) {
            return Err(Error::Config("mask min_block must be at least 1".into()));
        }
        Ok(())
    }

    /// `(target, min_block, max_block)` for an `n`-patch grid.
    pub fn bounds(&self, n: usize) -> Result<(usize, usize, usize)> {
        self.validate()?;
        let target = (self.ratio * n as f64).ceil() as usize;
        let min_block = self.min_block.unwrap_or(if n <= 64 { 4 } else { 16 });
        let max_block = self
            .max_block
            .unwrap_or((self.ratio * n as f64).floor() as usize)
            .max(min_block);
        if min_block > n {
            return Err(Error::InfeasibleMask(format!(
                "minimum block of {min_block} patches exceeds the {n}-patch grid"
            )));
        }
        if (self.ratio * n as f64) < min_block as f64 {
            return Err(Error::InfeasibleMask(format!(
                "ratio {} of {n} patches is below the minimum block of {min_block}",
                self.ratio
            )));
        }
        Ok((target, min_block, max_block))
    }
}

/// An axis-aligned rectangle of patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskBlock {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl MaskBlock {
    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

/// Masked patch positions on a grid, with the blocks that produced them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    pub grid: (usize, usize),
    /// Row-major flags, one per patch.
    pub mask: Vec<bool>,
    pub blocks: Vec<MaskBlock>,
}

impl MaskSpec {
    pub fn empty(grid: (usize, usize)) -> Self {
        Self {
            grid,
            mask: vec![false; grid.0 * grid.1],
            blocks: Vec::new(),
        }
    }

    pub fn full(grid: (usize, usize)) -> Self {
        Self {
            grid,
            mask: vec![true; grid.0 * grid.1],
            blocks: vec![MaskBlock {
                top: 0,
                left: 0,
                height: grid.0,
                width: grid.1,
            }],
        }
    }

    /// A mask from explicit positions (no block structure).
    pub fn from_positions(grid: (usize, usize), positions: &[usize]) -> Result<Self> {
        let n = grid.0 * grid.1;
        let mut mask = vec![false; n];
        for &p in positions {
            if p >= n {
                return Err(Error::OutOfRange {
                    what: "mask position",
                    index: p,
                    size: n,
                });
            }
            mask[p] = true;
        }
        Ok(Self {
            grid,
            mask,
            blocks: Vec::new(),
        })
    }

    pub fn positions(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.mask.len() as f64
    }
}

/// Unions random rectangles until at least `ceil(ratio·N)` patches are
/// masked. Each block has area in `[min_block, max_block]` and aspect
/// ratio in `[0.3, 1/0.3]`, and may add at most
/// `max(remaining, min_block)` new patches, so the final count stays below
/// the target plus one minimum block.
pub fn blockwise_mask(grid: (usize, usize), config: &MaskConfig, rng: &mut dyn RngCore) -> Result<MaskSpec> {
    let (gh, gw) = grid;
    let n = gh * gw;
    let (target, min_block, max_block) = config.bounds(n)?;
    let mut spec = MaskSpec::empty(grid);
    let mut count = 0usize;
    let (log_lo, log_hi) = (MIN_ASPECT.ln(), (1.0 / MIN_ASPECT).ln());
    let mut attempts = 0usize;
    while count < target {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::InfeasibleMask(format!(
                "no admissible block after {MAX_ATTEMPTS} attempts on a {gh}x{gw} grid"
            )));
        }
        let cap = (target - count).max(min_block);
        let hi = cap.min(max_block);
        let area = rng.gen_range(min_block as f64..=hi as f64);
        let aspect = rng.gen_range(log_lo..=log_hi).exp();
        let h = (area * aspect).sqrt().round() as usize;
        let w = (area / aspect).sqrt().round() as usize;
        if h == 0 || w == 0 || h > gh || w > gw || h * w < min_block || h * w > max_block {
            continue;
        }
        let top = rng.gen_range(0..=gh - h);
        let left = rng.gen_range(0..=gw - w);
        let fresh = (top..top + h)
            .flat_map(|r| (left..left + w).map(move |c| r * gw + c))
            .filter(|&p| !spec.mask[p])
            .count();
        if fresh == 0 || fresh > cap {
            continue;
        }
        for r in top..top + h {
            for c in left..left + w {
                spec.mask[r * gw + c] = true;
            }
        }
        spec.blocks.push(MaskBlock {
            top,
            left,
            height: h,
            width: w,
        });
        count += fresh;
        attempts = 0;
    }
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_minimum_block() {
        let cfg = MaskConfig {
            ratio: 0.25,
            ..MaskConfig::default()
        };
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = blockwise_mask((4, 4), &cfg, &mut rng).unwrap();
            assert_eq!(m.blocks.len(), 1);
            assert_eq!(m.count(), 4);
        }
    }

    #[test]
    fn infeasible_configs_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = MaskConfig {
            ratio: 0.1,
            ..MaskConfig::default()
        };
        assert!(matches!(
            blockwise_mask((4, 4), &cfg, &mut rng),
            Err(Error::InfeasibleMask(_))
        ));
        let cfg = MaskConfig {
            ratio: 0.5,
            min_block: Some(20),
            max_block: None,
        };
        assert!(matches!(
            blockwise_mask((4, 4), &cfg, &mut rng),
            Err(Error::InfeasibleMask(_))
        ));
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = MaskConfig::default();
        let a = blockwise_mask((8, 8), &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = blockwise_mask((8, 8), &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn paper_geometry_masks_about_75_patches() {
        let cfg = MaskConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut total = 0;
        for _ in 0..200 {
            let m = blockwise_mask((14, 14), &cfg, &mut rng).unwrap();
            let c = m.count();
            assert!((79..79 + 16).contains(&c), "{c}");
            total += c;
        }
        let mean = total as f64 / 200.0;
        assert!((75.0..=95.0).contains(&mean), "{mean}");
    }
}
