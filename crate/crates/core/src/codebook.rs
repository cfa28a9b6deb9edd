//! The discrete bottleneck: cosine nearest-code lookup, straight-through
//! quantization, EMA codebook maintenance and usage diagnostics.
//!
//! Code rows are stored unit-normalized, so the normalized-distance lookup
//! reads them directly: for unit vectors `‖a − b‖² = 2 − 2·a·b`, and the
//! nearest code is the one with the largest cosine similarity.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{dot, gemm, norm, Graph, MatMut, MatRef, Scalar, Tensor, Var, NORM_EPS};
use crate::{Error, Result};

/// Guard on the smoothed cluster size when forming EMA centroids.
pub const CLUSTER_EPS: f64 = 1e-5;

/// Nearest-code result for a set of query rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeAssignment {
    pub indices: Vec<usize>,
    /// Cosine similarity between each query and its winning code.
    pub similarities: Vec<f64>,
}

impl CodeAssignment {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// `K × D` table of unit code vectors with EMA accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<T> {
    embeddings: Tensor<T>,
    ema_cluster_size: Vec<T>,
    ema_embed_sum: Tensor<T>,
    decay: f64,
    usage_count: Vec<u64>,
    steps_since_used: Vec<u64>,
}

impl<T: Scalar> Codebook<T> {
    /// `K` random unit vectors drawn from a seeded Gaussian.
    pub fn new(size: usize, dim: usize, decay: f64, rng: &mut dyn RngCore) -> Result<Self> {
        let raw = Tensor::from_fn([size, dim], |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z)
        });
        Self::from_embeddings(raw, decay)
    }

    /// Builds a codebook from arbitrary rows; rows are normalized on entry.
    pub fn from_embeddings(embeddings: Tensor<T>, decay: f64) -> Result<Self> {
        let (k, d) = embeddings.dims2()?;
        if k < 2 || d < 1 || embeddings.shape().len() != 2 {
            return Err(Error::Config(format!("codebook needs K >= 2 and D >= 1, got {k}x{d}")));
        }
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Config(format!("EMA decay must lie in [0, 1), got {decay}")));
        }
        let embeddings = embeddings.l2_normalize(1)?;
        Ok(Self {
            ema_embed_sum: embeddings.clone(),
            embeddings,
            ema_cluster_size: vec![T::zero(); k],
            decay,
            usage_count: vec![0; k],
            steps_since_used: vec![0; k],
        })
    }

    /// Restores a codebook from persisted state without renormalizing.
    pub fn from_parts(
        embeddings: Tensor<T>,
        ema_cluster_size: Vec<T>,
        ema_embed_sum: Tensor<T>,
        decay: f64,
        usage_count: Vec<u64>,
        steps_since_used: Vec<u64>,
    ) -> Result<Self> {
        let (k, _) = embeddings.dims2()?;
        if ema_embed_sum.shape() != embeddings.shape()
            || ema_cluster_size.len() != k
            || usage_count.len() != k
            || steps_since_used.len() != k
        {
            return Err(Error::Checkpoint("codebook state has inconsistent shapes".into()));
        }
        let cb = Self {
            embeddings,
            ema_cluster_size,
            ema_embed_sum,
            decay,
            usage_count,
            steps_since_used,
        };
        for j in 0..k {
            let n = norm(cb.embeddings.row(j));
            if n < NORM_EPS {
                return Err(Error::DegenerateVector {
                    index: j,
                    norm: n,
                    eps: NORM_EPS,
                });
            }
        }
        Ok(cb)
    }

    pub fn size(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn embeddings(&self) -> &Tensor<T> {
        &self.embeddings
    }

    pub fn ema_cluster_size(&self) -> &[T] {
        &self.ema_cluster_size
    }

    pub fn ema_embed_sum(&self) -> &Tensor<T> {
        &self.ema_embed_sum
    }

    pub fn usage_count(&self) -> &[u64] {
        &self.usage_count
    }

    pub fn steps_since_used(&self) -> &[u64] {
        &self.steps_since_used
    }

    /// Replaces the code rows (gradient-trained codebooks); rows are renormalized.
    pub fn set_embeddings(&mut self, embeddings: Tensor<T>) -> Result<()> {
        if embeddings.shape() != self.embeddings.shape() {
            return Err(Error::shape("set_embeddings", self.embeddings.shape(), embeddings.shape()));
        }
        self.embeddings = embeddings.l2_normalize(1)?;
        Ok(())
    }

    /// Records assignments for usage and staleness bookkeeping without
    /// touching the code rows. Used when the codebook is trained by gradient.
    pub fn record_usage(&mut self, assignment: &CodeAssignment) {
        let mut hit = vec![0u64; self.size()];
        for &z in &assignment.indices {
            hit[z] += 1;
        }
        self.bump_usage(&hit);
    }

    fn bump_usage(&mut self, counts: &[u64]) {
        for (j, &n) in counts.iter().enumerate() {
            self.usage_count[j] += n;
            if n > 0 {
                self.steps_since_used[j] = 0;
            } else {
                self.steps_since_used[j] += 1;
            }
        }
    }

    /// Nearest code by cosine similarity for every row of `h_proj` (`N × D`).
    /// Ties go to the smallest index.
    pub fn lookup_nearest(&self, h_proj: &Tensor<T>) -> Result<CodeAssignment> {
        let (n, d) = h_proj.dims2()?;
        if d != self.dim() {
            return Err(Error::shape("lookup_nearest", h_proj.shape(), self.embeddings.shape()));
        }
        let hn = h_proj.clone().reshape([n, d])?.l2_normalize(1)?;
        let k = self.size();
        let mut sims = vec![T::zero(); n * k];
        gemm(
            T::one(),
            MatRef::new(hn.data(), n, d),
            MatRef::new(self.embeddings.data(), k, d).t(),
            T::zero(),
            MatMut::new(&mut sims, n, k),
        );
        let mut indices = Vec::with_capacity(n);
        let mut similarities = Vec::with_capacity(n);
        for row in sims.chunks(k) {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            indices.push(best);
            similarities.push(row[best].as_f64().clamp(-1.0, 1.0));
        }
        Ok(CodeAssignment { indices, similarities })
    }

    /// The stored unit code rows for an assignment, `N × D`.
    pub fn code_rows(&self, indices: &[usize]) -> Result<Tensor<T>> {
        self.embeddings.gather_rows(indices)
    }

    /// One EMA step from the rows assigned in this batch.
    ///
    /// For each code `j` with `n_j` assigned rows whose normalized sum is `s_j`:
    /// the smoothed size and sum move toward `n_j` and `s_j` by `1 − λ`, and the
    /// code row becomes `ℓ2(sum / max(size, ε_c))`. A code whose smoothed sum
    /// has vanished keeps its previous direction.
    pub fn ema_update(&mut self, h_proj: &Tensor<T>, assignment: &CodeAssignment) -> Result<()> {
        let (n, d) = h_proj.dims2()?;
        if d != self.dim() || assignment.len() != n {
            return Err(Error::shape("ema_update", h_proj.shape(), &[assignment.len(), self.dim()]));
        }
        let hn = h_proj.clone().reshape([n, d])?.l2_normalize(1)?;
        let k = self.size();
        let mut counts = vec![0u64; k];
        let mut sums = vec![0.0f64; k * d];
        for (i, &z) in assignment.indices.iter().enumerate() {
            if z >= k {
                return Err(Error::OutOfRange {
                    what: "codebook",
                    index: z,
                    size: k,
                });
            }
            counts[z] += 1;
            for (s, v) in sums[z * d..(z + 1) * d].iter_mut().zip(hn.row(i)) {
                *s += v.as_f64();
            }
        }
        let lambda = T::of(self.decay);
        let keep = T::of(1.0 - self.decay);
        for j in 0..k {
            self.ema_cluster_size[j] = lambda * self.ema_cluster_size[j] + keep * T::of(counts[j] as f64);
            let size = self.ema_cluster_size[j].max(T::of(CLUSTER_EPS));
            let sum_row = self.ema_embed_sum.row_mut(j);
            for (e, &s) in sum_row.iter_mut().zip(&sums[j * d..(j + 1) * d]) {
                *e = lambda * *e + keep * T::of(s);
            }
            let centroid: Vec<T> = sum_row.iter().map(|&e| e / size).collect();
            let cn = norm(&centroid);
            if cn >= NORM_EPS {
                let cn = T::of(cn);
                for (dst, &c) in self.embeddings.row_mut(j).iter_mut().zip(&centroid) {
                    *dst = c / cn;
                }
            }
        }
        self.bump_usage(&counts);
        Ok(())
    }

    /// Resets codes unassigned for at least `threshold` consecutive updates
    /// to normalized rows drawn uniformly from `pool`. `None` disables the
    /// reset. Returns the reset code ids.
    pub fn reinit_dead_codes(
        &mut self,
        pool: &Tensor<T>,
        threshold: Option<u64>,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<usize>> {
        let Some(threshold) = threshold else {
            return Ok(Vec::new());
        };
        if threshold == 0 {
            return Err(Error::Config("dead-code threshold must be at least 1".into()));
        }
        let (rows, d) = pool.dims2()?;
        if rows == 0 {
            return Err(Error::Empty("dead-code reinitialization pool"));
        }
        if d != self.dim() {
            return Err(Error::shape("reinit_dead_codes", pool.shape(), self.embeddings.shape()));
        }
        let stale: Vec<usize> = (0..self.size())
            .filter(|&j| self.steps_since_used[j] >= threshold)
            .collect();
        for &j in &stale {
            let r = rng.gen_range(0..rows);
            let src = pool.row(r);
            let n = norm(src);
            if n < NORM_EPS {
                return Err(Error::DegenerateVector {
                    index: r,
                    norm: n,
                    eps: NORM_EPS,
                });
            }
            let unit: Vec<T> = src.iter().map(|&v| v / T::of(n)).collect();
            self.embeddings.row_mut(j).copy_from_slice(&unit);
            self.ema_embed_sum.row_mut(j).copy_from_slice(&unit);
            self.ema_cluster_size[j] = T::one();
            self.steps_since_used[j] = 0;
        }
        Ok(stale)
    }
}

/// Output of [`straight_through_quantize`].
#[derive(Debug, Clone)]
pub struct Quantized {
    /// Forward value: the assigned unit code rows. Backward: identity onto `normalized`.
    pub output: Var,
    /// `ℓ2(h_proj)`.
    pub normalized: Var,
    /// The unit code rows as a graph node (a constant under EMA training).
    pub code_rows: Var,
    pub assignment: CodeAssignment,
}

/// Where the code rows enter the graph.
#[derive(Debug, Clone, Copy)]
pub enum CodeSource {
    /// Stored rows as constants (EMA-maintained codebook).
    Constant,
    /// Gather from a trainable `K × D` node and renormalize.
    Trainable(Var),
}

/// Quantizes `h_proj` with a straight-through gradient.
pub fn straight_through_quantize<T: Scalar>(
    g: &mut Graph<T>,
    h_proj: Var,
    codebook: &Codebook<T>,
) -> Result<Quantized> {
    straight_through_quantize_with(g, h_proj, codebook, CodeSource::Constant, None)
}

/// As [`straight_through_quantize`], optionally with trainable code rows or
/// a frozen assignment (used when checking gradients across perturbations).
pub fn straight_through_quantize_with<T: Scalar>(
    g: &mut Graph<T>,
    h_proj: Var,
    codebook: &Codebook<T>,
    source: CodeSource,
    frozen: Option<&[usize]>,
) -> Result<Quantized> {
    let assignment = match frozen {
        Some(idx) => {
            let rows = codebook.code_rows(idx)?;
            let hn = g.value(h_proj).l2_normalize(1)?;
            let similarities = (0..idx.len())
                .map(|i| dot(hn.row(i), rows.row(i)).as_f64().clamp(-1.0, 1.0))
                .collect();
            CodeAssignment {
                indices: idx.to_vec(),
                similarities,
            }
        }
        None => codebook.lookup_nearest(g.value(h_proj))?,
    };
    let normalized = g.l2_normalize(h_proj, 1)?;
    let code_rows = match source {
        CodeSource::Constant => g.constant(codebook.code_rows(&assignment.indices)?),
        CodeSource::Trainable(table) => {
            let rows = g.gather_rows(table, &assignment.indices)?;
            g.l2_normalize(rows, 1)?
        }
    };
    let output = g.straight_through(code_rows, normalized)?;
    Ok(Quantized {
        output,
        normalized,
        code_rows,
        assignment,
    })
}

/// Usage over a window of assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct UsageStats {
    /// Codes assigned at least once, divided by `K`.
    pub fraction: f64,
    pub used_codes: usize,
    pub histogram: Vec<u64>,
    /// `exp` of the assignment entropy; `K` for perfectly uniform use.
    pub perplexity: f64,
}

impl UsageStats {
    pub fn from_indices(k: usize, indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut histogram = vec![0u64; k];
        for z in indices {
            if z >= k {
                return Err(Error::OutOfRange {
                    what: "codebook",
                    index: z,
                    size: k,
                });
            }
            histogram[z] += 1;
        }
        Ok(Self::from_histogram(histogram))
    }

    pub fn from_histogram(histogram: Vec<u64>) -> Self {
        let k = histogram.len();
        let total: u64 = histogram.iter().sum();
        let used_codes = histogram.iter().filter(|&&c| c > 0).count();
        let entropy = if total == 0 {
            0.0
        } else {
            histogram
                .iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let p = c as f64 / total as f64;
                    -p * p.ln()
                })
                .sum()
        };
        Self {
            fraction: used_codes as f64 / k as f64,
            used_codes,
            histogram,
            perplexity: entropy.exp(),
        }
    }

    pub fn total(&self) -> u64 {
        self.histogram.iter().sum()
    }
}

/// Usage fraction and histogram over a window of assignment batches.
pub fn usage_stats<T: Scalar>(codebook: &Codebook<T>, window: &[CodeAssignment]) -> Result<UsageStats> {
    if window.is_empty() {
        return Err(Error::Empty("usage window"));
    }
    UsageStats::from_indices(codebook.size(), window.iter().flat_map(|a| a.indices.iter().copied()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: [usize; 2], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn axes() -> Codebook<f64> {
        Codebook::from_embeddings(t([2, 2], &[1.0, 0.0, 0.0, 1.0]), 0.99).unwrap()
    }

    #[test]
    fn nearer_axis_wins() {
        let a = axes().lookup_nearest(&t([1, 2], &[0.9, 0.1])).unwrap();
        assert_eq!(a.indices, vec![0]);
    }

    #[test]
    fn lookup_is_scale_invariant() {
        let a = axes().lookup_nearest(&t([2, 2], &[200.0, 0.0, 2.0, 0.0])).unwrap();
        assert_eq!(a.indices, vec![0, 0]);
    }

    #[test]
    fn ties_go_to_smallest_index() {
        let a = axes().lookup_nearest(&t([1, 2], &[1.0, 1.0])).unwrap();
        assert_eq!(a.indices, vec![0]);
    }

    #[test]
    fn lookup_rejects_degenerate_query() {
        assert!(matches!(
            axes().lookup_nearest(&t([1, 2], &[0.0, 0.0])),
            Err(Error::DegenerateVector { .. })
        ));
    }

    #[test]
    fn rejects_tiny_codebooks() {
        assert!(Codebook::from_embeddings(t([1, 2], &[1.0, 0.0]), 0.9).is_err());
        assert!(Codebook::from_embeddings(t([2, 2], &[1.0, 0.0, 0.0, 1.0]), 1.0).is_err());
    }

    #[test]
    fn quantizer_fixed_point() {
        let cb = axes();
        let mut g = Graph::new();
        let h = g.input(t([1, 2], &[0.0, 1.0]), true);
        let q = straight_through_quantize(&mut g, h, &cb).unwrap();
        assert_eq!(g.value(q.output).data(), &[0.0, 1.0]);
        assert_eq!(q.assignment.indices, vec![1]);
    }

    #[test]
    fn decay_zero_collapses_to_batch_mean() {
        let mut cb = Codebook::from_embeddings(t([2, 2], &[1.0, 0.0, 0.0, 1.0]), 0.0).unwrap();
        let h = t([2, 2], &[2.0, 0.2, 1.0, -0.3]);
        let a = cb.lookup_nearest(&h).unwrap();
        assert_eq!(a.indices, vec![0, 0]);
        cb.ema_update(&h, &a).unwrap();
        let hn = h.l2_normalize(1).unwrap();
        let mean = [(hn.row(0)[0] + hn.row(1)[0]) / 2.0, (hn.row(0)[1] + hn.row(1)[1]) / 2.0];
        let m = (mean[0] * mean[0] + mean[1] * mean[1]).sqrt();
        assert!((cb.embeddings().row(0)[0] - mean[0] / m).abs() < 1e-12);
        assert!((cb.embeddings().row(0)[1] - mean[1] / m).abs() < 1e-12);
        // Code 1 got nothing and its sum vanished: direction kept.
        assert_eq!(cb.embeddings().row(1), &[0.0, 1.0]);
        assert_eq!(cb.usage_count(), &[2, 0]);
    }

    #[test]
    fn empty_cluster_decays_and_keeps_direction() {
        let mut cb = Codebook::from_embeddings(t([2, 2], &[1.0, 0.0, 0.6, 0.8]), 0.9).unwrap();
        let h = t([1, 2], &[1.0, 0.01]);
        let a = cb.lookup_nearest(&h).unwrap();
        cb.ema_update(&h, &a).unwrap();
        assert!((cb.ema_embed_sum().row(1)[0] - 0.54).abs() < 1e-12);
        assert!((cb.ema_embed_sum().row(1)[1] - 0.72).abs() < 1e-12);
        assert!((cb.embeddings().row(1)[0] - 0.6).abs() < 1e-12);
        assert!((cb.embeddings().row(1)[1] - 0.8).abs() < 1e-12);
        assert_eq!(cb.steps_since_used(), &[0, 1]);
    }

    #[test]
    fn reinit_disabled_is_a_no_op() {
        let mut cb = axes();
        let before = cb.clone();
        let pool = t([1, 2], &[3.0, 4.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(cb.reinit_dead_codes(&pool, None, &mut rng).unwrap().is_empty());
        assert_eq!(cb, before);
    }

    #[test]
    fn reinit_forced_sample() {
        let mut cb = axes();
        cb.record_usage(&CodeAssignment {
            indices: vec![0],
            similarities: vec![1.0],
        });
        let pool = t([1, 2], &[3.0, 4.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let reset = cb.reinit_dead_codes(&pool, Some(1), &mut rng).unwrap();
        assert_eq!(reset, vec![1]);
        assert_eq!(cb.embeddings().row(1), &[0.6, 0.8]);
        assert_eq!(cb.ema_cluster_size()[1], 1.0);
        assert_eq!(cb.ema_embed_sum().row(1), &[0.6, 0.8]);
    }

    #[test]
    fn reinit_rejects_empty_pool_and_zero_threshold() {
        let mut cb = axes();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let empty = Tensor::<f64>::zeros([0, 2]);
        assert!(cb.reinit_dead_codes(&empty, Some(1), &mut rng).is_err());
        let pool = t([1, 2], &[1.0, 0.0]);
        assert!(cb.reinit_dead_codes(&pool, Some(0), &mut rng).is_err());
    }

    #[test]
    fn usage_single_code() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cb = Codebook::<f32>::new(8192, 4, 0.99, &mut rng).unwrap();
        let window = vec![CodeAssignment {
            indices: vec![0; 100],
            similarities: vec![1.0; 100],
        }];
        let s = usage_stats(&cb, &window).unwrap();
        assert_eq!(s.fraction, 1.0 / 8192.0);
        assert_eq!(s.perplexity, 1.0);
    }

    #[test]
    fn usage_uniform_covers_everything() {
        let s = UsageStats::from_indices(16, (0..64).map(|i| i % 16)).unwrap();
        assert_eq!(s.fraction, 1.0);
        assert!((s.perplexity - 16.0).abs() < 1e-9);
    }

    #[test]
    fn usage_rejects_empty_window() {
        assert!(usage_stats(&axes(), &[]).is_err());
    }
}
