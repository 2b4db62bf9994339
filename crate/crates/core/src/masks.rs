//! Visibility structures for training (every SSM output kept) and inference
//! (only compressed chunk states plus a recent window kept).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::chunking::ChunkPlan;
use crate::error::{Error, Result};

/// Dense boolean visibility matrix; `true` means the query may attend.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskMatrix {
    n_q: usize,
    n_k: usize,
    allowed: Vec<bool>,
}

impl MaskMatrix {
    pub fn from_fn(n_q: usize, n_k: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(n_q * n_k);
        for i in 0..n_q {
            for j in 0..n_k {
                allowed.push(f(i, j));
            }
        }
        Self { n_q, n_k, allowed }
    }

    pub fn n_q(&self) -> usize {
        self.n_q
    }

    pub fn n_k(&self) -> usize {
        self.n_k
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n_k + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.n_k..(i + 1) * self.n_k]
    }

    pub fn row_indices(&self, i: usize) -> Vec<usize> {
        self.row(i).iter().enumerate().filter_map(|(j, &a)| a.then_some(j)).collect()
    }

    pub fn row_count(&self, i: usize) -> usize {
        self.row(i).iter().filter(|&&a| a).count()
    }

    /// Number of allowed (query, key) pairs.
    pub fn count(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    /// Additive form: `0` where allowed, `-inf` elsewhere.
    pub fn additive(&self) -> Vec<f64> {
        self.allowed.iter().map(|&a| if a { 0.0 } else { f64::NEG_INFINITY }).collect()
    }

    pub fn check_rows(&self) -> Result<()> {
        match (0..self.n_q).find(|&i| self.row_count(i) == 0) {
            Some(row) => Err(Error::InvalidMask { row }),
            None => Ok(()),
        }
    }

    /// One line per query: `#` for allowed, `.` for masked.
    pub fn render(&self) -> String {
        let mut out = String::with_capacity(self.n_q * (self.n_k + 1));
        for i in 0..self.n_q {
            for &a in self.row(i) {
                out.push(if a { '#' } else { '.' });
            }
            out.push('\n');
        }
        out
    }
}

/// `allowed(i, j)` iff `j <= i`.
pub fn causal_mask(n: usize) -> MaskMatrix {
    MaskMatrix::from_fn(n, n, |i, j| j <= i)
}

/// `allowed(i, j)` iff `0 <= i - j < window`.
pub fn sliding_window_mask(n: usize, window: usize) -> MaskMatrix {
    MaskMatrix::from_fn(n, n, |i, j| j <= i && i - j < window)
}

fn check_lead(lead: usize) -> Result<()> {
    if lead == 0 {
        return Err(Error::Contract("lead must be at least 1".into()));
    }
    Ok(())
}

/// Training mask over full-length SSM outputs.
///
/// Query `i` sees key `j <= i` when `j` closes a chunk, when both lie in the
/// same segment, or when `i - j < lead`.
pub fn train_mask(plan: &ChunkPlan, layer: usize, lead: usize) -> Result<MaskMatrix> {
    check_lead(lead)?;
    if layer >= plan.layers() {
        return Err(Error::Contract(format!("layer {layer} not in a {}-layer plan", plan.layers())));
    }
    let n = plan.n;
    let starts = plan.segment_starts(layer);
    let mut is_boundary = vec![false; n];
    for &b in plan.boundaries(layer) {
        is_boundary[b] = true;
    }
    Ok(MaskMatrix::from_fn(n, n, |i, j| j <= i && (is_boundary[j] || j >= starts[i] || i - j < lead)))
}

/// Keys visible to one query at inference time.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct VisibleSet {
    /// Indices of completed chunks attended through their compressed state.
    pub compressed: Vec<usize>,
    /// Uncompressed positions: the current segment and the lead window.
    pub window: Vec<usize>,
}

impl VisibleSet {
    /// All visible SSM-output positions, ascending, each chunk mapped to the
    /// position that closed it.
    pub fn positions(&self, plan: &ChunkPlan, layer: usize) -> Vec<usize> {
        let b = plan.boundaries(layer);
        let mut out: Vec<usize> = self.compressed.iter().map(|&c| b[c]).collect();
        out.extend_from_slice(&self.window);
        out.sort_unstable();
        out
    }

    pub fn len(&self) -> usize {
        self.compressed.len() + self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.compressed.is_empty() && self.window.is_empty()
    }
}

/// Inference-time visibility of query `i`.
///
/// A chunk whose closing position already sits in the window is listed only
/// in the window, so no key is represented twice.
pub fn test_visible_set(i: usize, plan: &ChunkPlan, layer: usize, lead: usize) -> VisibleSet {
    let start = plan.segment_starts(layer)[i];
    let window_start = start.min((i + 1).saturating_sub(lead));
    let window: Vec<usize> = (window_start..=i).collect();
    let compressed = plan
        .boundaries(layer)
        .iter()
        .enumerate()
        .take_while(|&(_, &b)| b <= i)
        .filter(|&(_, &b)| b < window_start)
        .map(|(c, _)| c)
        .collect();
    VisibleSet { compressed, window }
}

/// True iff, for every query, the inference-time key set equals the
/// training mask row as a set of SSM-output positions.
pub fn mask_equivalence_check(plan: &ChunkPlan, layer: usize, lead: usize, n: usize) -> bool {
    if plan.n != n || layer >= plan.layers() {
        return false;
    }
    let Ok(mask) = train_mask(plan, layer, lead) else {
        return false;
    };
    (0..n).all(|i| {
        let vis = test_visible_set(i, plan, layer, lead);
        let pos = vis.positions(plan, layer);
        let unique = pos.windows(2).all(|w| w[0] < w[1]);
        unique && pos == mask.row_indices(i)
    })
}
