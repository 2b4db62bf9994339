//! Chunk-boundary plans.
//!
//! A boundary at position `j` means token `j` closes a chunk: the SSM state
//! restarts at `j + 1` and the SSM output at `j` is the chunk's compressed
//! key/value. Position `n - 1` always ends the final (possibly partial)
//! segment whether or not it is listed.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum Strategy {
    Uniform,
    Random,
    Cyclic,
    /// Boundaries at the positions receiving the most first-layer attention.
    Fattn,
    /// Uniform chunks, with the most-attended ones bisected.
    Fssm,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [Self::Uniform, Self::Random, Self::Cyclic, Self::Fattn, Self::Fssm];

    pub fn name(self) -> &'static str {
        match self {
            Self::Uniform => "uniform",
            Self::Random => "random",
            Self::Cyclic => "cyclic",
            Self::Fattn => "fattn",
            Self::Fssm => "fssm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name().eq_ignore_ascii_case(s))
    }
}

/// Per-layer boundary positions for a sequence of length `n`.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ChunkPlan {
    pub n: usize,
    /// Nominal chunk size.
    pub chunk: usize,
    pub strategy: Strategy,
    pub seed: Option<u64>,
    /// `boundaries[layer]` is strictly increasing within `0..n`.
    pub boundaries: Vec<Vec<usize>>,
}

/// Boundaries at `j` with `j mod P = P - 1`.
pub fn uniform_plan(n: usize, chunk: usize) -> Vec<usize> {
    cyclic_plan(n, chunk, 0)
}

/// Uniform boundaries shifted earlier by `layer mod P`.
pub fn cyclic_plan(n: usize, chunk: usize, layer: usize) -> Vec<usize> {
    let chunk = chunk.max(1);
    let shift = layer % chunk;
    (0..n).filter(|j| (j + shift) % chunk == chunk - 1).collect()
}

/// `ceil(n/P) - 1` distinct boundaries drawn uniformly from `0..=n-2`.
pub fn random_plan(n: usize, chunk: usize, seed: u64) -> Vec<usize> {
    let chunks = n.div_ceil(chunk.max(1));
    if n < 2 || chunks < 2 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = rand::seq::index::sample(&mut rng, n - 1, chunks - 1).into_vec();
    picks.sort_unstable();
    picks
}

/// Attention mass received by each key position, summed over heads and
/// queries. `probs` is `[heads, n, n]`.
pub fn received_mass<T: Scalar>(probs: &Tensor<T>) -> Result<Vec<f64>> {
    let &[heads, nq, nk] = probs.shape() else {
        return Err(Error::Shape {
            op: "received_mass",
            detail: format!("expected [heads, n, n], got {:?}", probs.shape()),
        });
    };
    let mut mass = vec![0.0f64; nk];
    for h in 0..heads {
        for i in 0..nq {
            let row = &probs.data()[(h * nq + i) * nk..(h * nq + i + 1) * nk];
            for (m, p) in mass.iter_mut().zip(row) {
                *m += p.to_f64().unwrap_or(0.0);
            }
        }
    }
    Ok(mass)
}

/// Indices of the `k` largest values; ties go to the smaller index.
fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Places `ceil(n/P) - 1` boundaries at the most-attended positions of a
/// full-causal first-layer attention map `[heads, n, n]`.
pub fn fattn_plan<T: Scalar>(probs: &Tensor<T>, n: usize, chunk: usize) -> Result<Vec<usize>> {
    if n < 2 {
        return Ok(Vec::new());
    }
    let mass = received_mass(probs)?;
    if mass.len() != n {
        return Err(Error::Shape {
            op: "fattn_plan",
            detail: format!("attention map covers {} keys, expected {n}", mass.len()),
        });
    }
    let want = n.div_ceil(chunk.max(1)).saturating_sub(1).min(n - 1);
    let mut picks = top_k(&mass[..n - 1], want);
    picks.sort_unstable();
    Ok(picks)
}

/// Sums per-position mass over the segments induced by `boundaries`.
pub fn chunk_mass(mass: &[f64], boundaries: &[usize]) -> Vec<f64> {
    segments(mass.len(), boundaries).map(|(s, e)| mass[s..e].iter().sum()).collect()
}

/// Bisects the `k` uniform chunks with the largest received mass.
///
/// The left half keeps the extra token of an odd-sized chunk. Chunks of size
/// one cannot be split and are skipped.
pub fn fssm_plan(n: usize, chunk: usize, chunk_mass: &[f64], k: usize) -> Result<Vec<usize>> {
    let base = uniform_plan(n, chunk);
    let spans: Vec<(usize, usize)> = segments(n, &base).collect();
    if spans.len() != chunk_mass.len() {
        return Err(Error::Shape {
            op: "fssm_plan",
            detail: format!("{} chunk masses for {} chunks", chunk_mass.len(), spans.len()),
        });
    }
    let mut out = base;
    for c in top_k(chunk_mass, k.min(spans.len())) {
        let (s, e) = spans[c];
        let size = e - s;
        if size >= 2 {
            out.push(s + size.div_ceil(2) - 1);
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Half-open `(start, end)` segments of `0..n` induced by `boundaries`.
pub fn segments(n: usize, boundaries: &[usize]) -> impl Iterator<Item = (usize, usize)> + '_ {
    let mut start = 0;
    let mut iter = boundaries.iter().copied().chain(core::iter::once(n.saturating_sub(1)));
    core::iter::from_fn(move || {
        while start < n {
            let b = iter.next()?;
            if b + 1 > start {
                let seg = (start, b + 1);
                start = b + 1;
                return Some(seg);
            }
        }
        None
    })
}

/// How a layer decides whether a position closes a chunk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BoundaryRule {
    /// `(j + shift) mod chunk = chunk - 1`, valid for every position.
    Periodic { chunk: usize, shift: usize },
    /// Explicit positions over a fixed horizon.
    Listed { horizon: usize, positions: Vec<usize> },
}

impl BoundaryRule {
    pub fn is_boundary(&self, j: usize) -> Result<bool> {
        match self {
            Self::Periodic { chunk, shift } => Ok((j + shift) % chunk == chunk - 1),
            Self::Listed { horizon, positions } => {
                if j >= *horizon {
                    return Err(Error::Contract(format!("position {j} beyond the plan horizon {horizon}")));
                }
                Ok(positions.binary_search(&j).is_ok())
            }
        }
    }
}

impl ChunkPlan {
    fn build(
        n: usize,
        chunk: usize,
        layers: usize,
        strategy: Strategy,
        seed: Option<u64>,
        f: impl Fn(usize) -> Vec<usize>,
    ) -> Self {
        Self { n, chunk, strategy, seed, boundaries: (0..layers).map(f).collect() }
    }

    pub fn uniform(n: usize, chunk: usize, layers: usize) -> Self {
        Self::build(n, chunk, layers, Strategy::Uniform, None, |_| uniform_plan(n, chunk))
    }

    pub fn cyclic(n: usize, chunk: usize, layers: usize) -> Self {
        Self::build(n, chunk, layers, Strategy::Cyclic, None, |l| cyclic_plan(n, chunk, l))
    }

    /// Each layer draws its own boundaries from a stream derived from `seed`.
    pub fn random(n: usize, chunk: usize, layers: usize, seed: u64) -> Self {
        Self::build(n, chunk, layers, Strategy::Random, Some(seed), |l| random_plan(n, chunk, layer_seed(seed, l)))
    }

    /// Plan from explicit boundary lists; validates ordering and range.
    pub fn from_boundaries(n: usize, chunk: usize, strategy: Strategy, boundaries: Vec<Vec<usize>>) -> Result<Self> {
        for (l, b) in boundaries.iter().enumerate() {
            if b.windows(2).any(|w| w[0] >= w[1]) || b.iter().any(|&j| j >= n) {
                return Err(Error::Contract(format!("layer {l} boundaries must be strictly increasing within 0..{n}")));
            }
        }
        Ok(Self { n, chunk, strategy, seed: None, boundaries })
    }

    pub fn layers(&self) -> usize {
        self.boundaries.len()
    }

    /// The same plan restricted to the first `n` positions.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            n: n.min(self.n),
            boundaries: self.boundaries.iter().map(|b| b.iter().copied().filter(|&j| j < n).collect()).collect(),
            ..self.clone()
        }
    }

    pub fn boundaries(&self, layer: usize) -> &[usize] {
        &self.boundaries[layer]
    }

    pub fn is_boundary(&self, layer: usize, j: usize) -> bool {
        self.boundaries[layer].binary_search(&j).is_ok()
    }

    /// Start position of the segment containing each position.
    pub fn segment_starts(&self, layer: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n);
        for (s, e) in segments(self.n, &self.boundaries[layer]) {
            out.extend(core::iter::repeat_n(s, e - s));
        }
        out
    }

    pub fn segment_sizes(&self, layer: usize) -> Vec<usize> {
        segments(self.n, &self.boundaries[layer]).map(|(s, e)| e - s).collect()
    }

    /// Decode-time rule reproducing this plan's boundaries at `layer`.
    pub fn rule(&self, layer: usize) -> BoundaryRule {
        match self.strategy {
            Strategy::Uniform => BoundaryRule::Periodic { chunk: self.chunk, shift: 0 },
            Strategy::Cyclic => BoundaryRule::Periodic { chunk: self.chunk, shift: layer % self.chunk },
            _ => BoundaryRule::Listed { horizon: self.n, positions: self.boundaries[layer].clone() },
        }
    }
}

/// Seed for `layer` of a random plan.
pub fn layer_seed(seed: u64, layer: usize) -> u64 {
    seed ^ (layer as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_examples() {
        assert_eq!(uniform_plan(8, 4), vec![3, 7]);
        assert_eq!(uniform_plan(10, 4), vec![3, 7]);
        assert!(uniform_plan(4, 8).is_empty());
        let plan = ChunkPlan::uniform(10, 4, 1);
        assert_eq!(plan.segment_sizes(0), vec![4, 4, 2]);
    }

    #[test]
    fn cyclic_examples() {
        assert_eq!(cyclic_plan(8, 4, 0), vec![3, 7]);
        assert_eq!(cyclic_plan(8, 4, 1), vec![2, 6]);
        assert_eq!(cyclic_plan(8, 4, 4), cyclic_plan(8, 4, 0));
        assert_eq!(cyclic_plan(8, 4, 5), cyclic_plan(8, 4, 1));
    }

    #[test]
    fn random_examples() {
        assert_eq!(random_plan(2, 1, 0), vec![0]);
        let b = random_plan(8, 4, 17);
        assert_eq!(b.len(), 1);
        assert!(b[0] <= 6);
        assert_eq!(random_plan(8, 4, 17), b);
        assert!(random_plan(1, 1, 3).is_empty());
    }

    #[test]
    fn random_partitions_sum_to_n() {
        for trial in 0..1000u64 {
            let n = 1 + (trial as usize * 37) % 300;
            let p = 1 + (trial as usize) % 9;
            let plan = ChunkPlan::random(n, p, 1, trial);
            let sizes = plan.segment_sizes(0);
            assert_eq!(sizes.iter().sum::<usize>(), n);
            assert!(sizes.iter().all(|&s| s >= 1));
            assert_eq!(sizes.len(), n.div_ceil(p));
        }
    }

    #[test]
    fn random_seeds_differ() {
        let a = random_plan(1024, 8, 1);
        let b = random_plan(1024, 8, 2);
        assert_ne!(a, b);
    }

    #[test]
    fn fattn_single_column() {
        let n = 6;
        let mut probs = Tensor::<f64>::zeros(&[1, n, n]);
        for i in 2..n {
            probs.data_mut()[i * n + 2] = 1.0;
        }
        probs.data_mut()[0] = 1.0;
        probs.data_mut()[n] = 1.0;
        let b = fattn_plan(&probs, n, 3).unwrap();
        assert_eq!(b, vec![2]);
        assert!(fattn_plan(&Tensor::<f64>::zeros(&[1, 4, 4]), 4, 4).unwrap().is_empty());
        assert!(fattn_plan(&Tensor::<f64>::zeros(&[1, 1, 1]), 1, 1).unwrap().is_empty());
    }

    #[test]
    fn fssm_examples() {
        // n=8, P=4: chunks [0,4) and [4,8)
        assert_eq!(fssm_plan(8, 4, &[1.0, 2.0], 0).unwrap(), vec![3, 7]);
        assert_eq!(fssm_plan(8, 4, &[3.0, 2.0], 1).unwrap(), vec![1, 3, 7]);
        assert_eq!(fssm_plan(8, 4, &[3.0, 2.0], 9).unwrap(), vec![1, 3, 5, 7]);
        // odd chunk: left half takes the extra token
        assert_eq!(fssm_plan(5, 5, &[1.0], 1).unwrap(), vec![2, 4]);
        // trailing chunk of size 1 is skipped
        assert_eq!(fssm_plan(9, 4, &[0.0, 0.0, 5.0], 1).unwrap(), vec![3, 7]);
    }

    #[test]
    fn segments_cover_sequence() {
        let s: Vec<_> = segments(10, &[3, 7]).collect();
        assert_eq!(s, vec![(0, 4), (4, 8), (8, 10)]);
        let s: Vec<_> = segments(8, &[3, 7]).collect();
        assert_eq!(s, vec![(0, 4), (4, 8)]);
        let s: Vec<_> = segments(1, &[]).collect();
        assert_eq!(s, vec![(0, 1)]);
    }

    #[test]
    fn rules_match_plans() {
        let plan = ChunkPlan::cyclic(40, 4, 3);
        for l in 0..3 {
            let rule = plan.rule(l);
            for j in 0..40 {
                assert_eq!(rule.is_boundary(j).unwrap(), plan.is_boundary(l, j));
            }
        }
        let plan = ChunkPlan::random(40, 4, 2, 9);
        assert!(plan.rule(1).is_boundary(40).is_err());
    }

    #[test]
    fn from_boundaries_rejects_bad_lists() {
        assert!(ChunkPlan::from_boundaries(8, 4, Strategy::Uniform, vec![vec![3, 3]]).is_err());
        assert!(ChunkPlan::from_boundaries(8, 4, Strategy::Uniform, vec![vec![8]]).is_err());
    }
}
