//! Small dense-math kernel: masked softmax, percentage top-k, normalization
//! and set overlap.
//!
//! Everything here is a pure function over slices. Reductions run in index
//! order so results are reproducible bit-for-bit on a given platform.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{CamaError, Result};

/// Floor applied to probabilities before they enter a log ratio.
pub const PROB_FLOOR: f64 = 1e-12;

/// A probability distribution over an explicit set of token indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector {
    pub values: Vec<f64>,
    pub support: Vec<usize>,
}

impl ProbVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Strictly ascending set of token or head indices.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IndexSet(Vec<usize>);

impl IndexSet {
    pub fn new() -> Self {
        IndexSet(Vec::new())
    }

    /// Builds a set from arbitrary indices, sorting and dropping duplicates.
    pub fn from_unsorted(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        IndexSet(indices)
    }

    pub fn from_range(range: std::ops::Range<usize>) -> Self {
        IndexSet(range.collect())
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.0.binary_search(&index).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn first(&self) -> Option<usize> {
        self.0.first().copied()
    }

    pub fn last(&self) -> Option<usize> {
        self.0.last().copied()
    }

    /// Adds `delta` to every index.
    pub fn shifted(&self, delta: isize) -> IndexSet {
        IndexSet(
            self.0
                .iter()
                .map(|&i| (i as isize + delta) as usize)
                .collect(),
        )
    }

    pub fn union(&self, other: &IndexSet) -> IndexSet {
        let mut all = self.0.clone();
        all.extend_from_slice(&other.0);
        IndexSet::from_unsorted(all)
    }

    pub fn intersection_len(&self, other: &IndexSet) -> usize {
        let (mut a, mut b, mut count) = (0, 0, 0);
        while a < self.0.len() && b < other.0.len() {
            match self.0[a].cmp(&other.0[b]) {
                Ordering::Less => a += 1,
                Ordering::Greater => b += 1,
                Ordering::Equal => {
                    count += 1;
                    a += 1;
                    b += 1;
                }
            }
        }
        count
    }

    pub fn is_subset_of(&self, other: &IndexSet) -> bool {
        self.intersection_len(other) == self.len()
    }

    pub fn is_strictly_ascending(&self) -> bool {
        self.0.windows(2).all(|w| w[0] < w[1])
    }
}

impl From<Vec<usize>> for IndexSet {
    fn from(v: Vec<usize>) -> Self {
        IndexSet::from_unsorted(v)
    }
}

impl FromIterator<usize> for IndexSet {
    fn from_iter<T: IntoIterator<Item = usize>>(iter: T) -> Self {
        IndexSet::from_unsorted(iter.into_iter().collect())
    }
}

/// Softmax over the entries where `visible` is true.
///
/// The returned support lists the visible positions in order. Probabilities
/// are floored at [`PROB_FLOOR`] and renormalized, so downstream log ratios
/// stay finite.
pub fn masked_softmax(logits: &[f64], visible: &[bool]) -> Result<ProbVector> {
    if logits.len() != visible.len() {
        return Err(CamaError::LengthMismatch {
            what: "logits vs mask",
            left: logits.len(),
            right: visible.len(),
        });
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(CamaError::NonFiniteLogits);
    }
    let support: Vec<usize> = (0..logits.len()).filter(|&i| visible[i]).collect();
    if support.is_empty() {
        return Err(CamaError::EmptySupport);
    }
    let max = support
        .iter()
        .map(|&i| logits[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut values: Vec<f64> = support.iter().map(|&i| (logits[i] - max).exp()).collect();
    let sum: f64 = values.iter().sum();
    let mut clamped_sum = 0.0;
    for v in values.iter_mut() {
        *v = (*v / sum).max(PROB_FLOOR);
        clamped_sum += *v;
    }
    for v in values.iter_mut() {
        *v /= clamped_sum;
    }
    Ok(ProbVector { values, support })
}

/// Softmax over a whole vector (every entry visible).
pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    masked_softmax(logits, &vec![true; logits.len()])
}

/// Number of elements selected by a percentage of `len`, rounded up.
pub fn pct_count(pct: f64, len: usize) -> Result<usize> {
    if !(pct > 0.0 && pct <= 100.0) {
        return Err(CamaError::InvalidPercentage(pct));
    }
    let count = (pct * len as f64 / 100.0).ceil() as usize;
    Ok(count.min(len))
}

/// Indices of the `ceil(pct% × len)` largest scores.
///
/// Ties are broken by the smaller index. The result is returned in ascending
/// index order.
pub fn top_pct_indices(scores: &[f64], pct: f64) -> Result<IndexSet> {
    let count = pct_count(pct, scores.len())?;
    if scores.is_empty() {
        return Err(CamaError::EmptySupport);
    }
    if scores.iter().any(|x| !x.is_finite()) {
        return Err(CamaError::NonFiniteLogits);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(count);
    Ok(IndexSet::from_unsorted(order))
}

/// Result of an L2 normalization; `degenerate` marks a zero input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitVector {
    pub values: Vec<f64>,
    pub degenerate: bool,
}

pub fn l2_normalize(v: &[f64]) -> UnitVector {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return UnitVector {
            values: vec![0.0; v.len()],
            degenerate: true,
        };
    }
    UnitVector {
        values: v.iter().map(|x| x / norm).collect(),
        degenerate: false,
    }
}

/// Inner product of two unit vectors; zero when either one is degenerate.
pub fn cosine(a: &UnitVector, b: &UnitVector) -> f64 {
    if a.degenerate || b.degenerate {
        return 0.0;
    }
    a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum()
}

/// Intersection over union. Two empty sets agree vacuously (1.0).
pub fn set_iou(a: &IndexSet, b: &IndexSet) -> f64 {
    let inter = a.intersection_len(b);
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
