//! Query-centric routing.
//!
//! Heads whose query rows pull the most from the demonstrations are picked
//! per layer; each demonstration is then weighted by how closely its joint
//! image/text representation matches the query's, and its key image tokens
//! and text receive a decayed bias in those heads.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::config::RhoSource;
use crate::decoder::{BiasEntry, HeadTarget};
use crate::error::{CamaError, Result};
use crate::numerics::{cosine, l2_normalize, softmax, top_pct_indices, IndexSet, UnitVector};
use crate::sequence::SegmentLayout;

/// Causal softmax of one row; only columns `0..=row` are visible.
fn causal_row_weights(raw: &Array3<f32>, head: usize, row: usize) -> Vec<f64> {
    let vals: Vec<f64> = (0..=row).map(|c| f64::from(raw[[head, row, c]])).collect();
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = vals.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Mean flow from the query's text rows into the demonstration tokens, per
/// head.
pub fn head_flow(raw_logits: &Array3<f32>, layout: &SegmentLayout, source: RhoSource) -> Vec<f64> {
    let n_heads = raw_logits.dim().0;
    let rows = layout.query_text();
    let ctx = layout.context();
    if rows.is_empty() {
        return vec![0.0; n_heads];
    }
    (0..n_heads)
        .map(|h| {
            let total: f64 = rows
                .iter()
                .map(|q| match source {
                    RhoSource::RawLogits => ctx
                        .indices()
                        .map(|c| f64::from(raw_logits[[h, q, c]]))
                        .sum::<f64>(),
                    RhoSource::SoftmaxWeights => {
                        let w = causal_row_weights(raw_logits, h, q);
                        ctx.indices().map(|c| w[c]).sum::<f64>()
                    }
                })
                .sum();
            total / rows.len() as f64
        })
        .collect()
}

pub fn select_heads(rho: &[f64], k2_pct: f64) -> Result<IndexSet> {
    top_pct_indices(rho, k2_pct)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerHeads {
    /// 1-based.
    pub layer: usize,
    pub rho: Vec<f64>,
    pub selected: IndexSet,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadSelectionReport {
    pub layers: Vec<LayerHeads>,
}

fn mean_rows(hidden: &Array2<f32>, rows: &IndexSet) -> Vec<f64> {
    let d = hidden.ncols();
    let mut acc = vec![0.0; d];
    for r in rows.iter() {
        for (a, v) in acc.iter_mut().zip(hidden.row(r)) {
            *a += f64::from(*v);
        }
    }
    let n = rows.len().max(1) as f64;
    acc.into_iter().map(|a| a / n).collect()
}

/// One unit vector per element (query last): mean hidden state over the
/// element's key tokens, concatenated with the mean over its text tokens.
pub fn joint_representation(
    hidden: &Array2<f32>,
    layout: &SegmentLayout,
    key_sets: &[IndexSet],
) -> Result<Vec<UnitVector>> {
    if key_sets.len() != layout.elements.len() {
        return Err(CamaError::LengthMismatch {
            what: "key sets vs elements",
            left: key_sets.len(),
            right: layout.elements.len(),
        });
    }
    if hidden.nrows() < layout.total_len {
        return Err(CamaError::LengthMismatch {
            what: "hidden rows vs sequence",
            left: hidden.nrows(),
            right: layout.total_len,
        });
    }
    Ok(layout
        .elements
        .iter()
        .zip(key_sets)
        .map(|(e, keys)| {
            let mut v = mean_rows(hidden, keys);
            v.extend(mean_rows(hidden, &e.text()));
            l2_normalize(&v)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryWeightReport {
    /// One per demonstration.
    pub p: Vec<UnitVector>,
    pub p_query: UnitVector,
    pub similarities: Vec<f64>,
    pub w: Vec<f64>,
}

/// Softmax over demonstrations of their similarity to the query.
pub fn query_weights(p: &[UnitVector], p_query: &UnitVector) -> Result<QueryWeightReport> {
    if p.is_empty() {
        return Err(CamaError::EmptySupport);
    }
    let similarities: Vec<f64> = p.iter().map(|pi| cosine(pi, p_query)).collect();
    let w = softmax(&similarities)?.values;
    Ok(QueryWeightReport {
        p: p.to_vec(),
        p_query: p_query.clone(),
        similarities,
        w,
    })
}

/// Stage II entries for one 0-based layer and its selected heads.
pub fn stage2_entries_for_layer(
    layer: usize,
    heads: &IndexSet,
    w: &[f64],
    key_sets: &[IndexSet],
    layout: &SegmentLayout,
) -> Result<Vec<BiasEntry>> {
    let n = layout.n_shots;
    if w.len() != n {
        return Err(CamaError::LengthMismatch {
            what: "query weights vs demonstrations",
            left: w.len(),
            right: n,
        });
    }
    let mut entries = Vec::new();
    for (i, e) in layout.icds().iter().enumerate() {
        let value = (n - i) as f64 / n as f64 * w[i];
        let columns = key_sets[i].union(&e.text());
        for h in heads.iter() {
            for c in columns.iter() {
                entries.push(BiasEntry {
                    layer,
                    head: HeadTarget::Head(h),
                    column: c,
                    row_from: e.end(),
                    value,
                });
            }
        }
    }
    Ok(entries)
}

/// Stage II entries for every layer in `heads`.
pub fn stage2_bias(
    weights: &QueryWeightReport,
    heads: &HeadSelectionReport,
    key_sets: &[IndexSet],
    layout: &SegmentLayout,
) -> Result<Vec<BiasEntry>> {
    let mut out = Vec::new();
    for lh in &heads.layers {
        out.extend(stage2_entries_for_layer(
            lh.layer - 1,
            &lh.selected,
            &weights.w,
            key_sets,
            layout,
        )?);
    }
    Ok(out)
}
