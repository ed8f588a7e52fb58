//! Intra-demonstration grounding.
//!
//! Each element's image tokens are scored by how much attention mass
//! shifts toward them as the element's text unfolds: from the first
//! question token to the first answer token (`c1`), and from the first to the
//! last answer token (`c2`). The top-scoring tokens get an additive logit
//! bias in every later row.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::config::{pos_factor, CamaConfig};
use crate::decoder::{BiasEntry, HeadTarget};
use crate::error::{CamaError, Result};
use crate::numerics::{masked_softmax, top_pct_indices, IndexSet, ProbVector};
use crate::sequence::{SegmentLayout, Span};

/// Head-averaged logits of row `anchor` over the image tokens of `element`,
/// softmaxed over those tokens.
pub fn anchor_distribution(
    raw_logits: &Array3<f32>,
    layout: &SegmentLayout,
    anchor: usize,
    element: usize,
) -> Result<ProbVector> {
    let image = layout.element(element)?.image;
    if anchor < image.end || anchor >= raw_logits.dim().1 {
        return Err(CamaError::NonCausalAnchor { anchor, element });
    }
    let n_heads = raw_logits.dim().0;
    let averaged: Vec<f64> = image
        .indices()
        .map(|j| {
            let sum: f64 = (0..n_heads)
                .map(|h| f64::from(raw_logits[[h, anchor, j]]))
                .sum();
            sum / n_heads as f64
        })
        .collect();
    masked_softmax(&averaged, &vec![true; averaged.len()])
}

fn gain(to: f64, from: f64) -> f64 {
    let diff = to - from;
    if diff > 0.0 {
        diff * (to / from).ln()
    } else {
        0.0
    }
}

/// Positive-part gains between anchor distributions. `c2` is all zeros when
/// `p_alast` is absent.
pub fn forward_gains(
    p_q0: &ProbVector,
    p_a0: &ProbVector,
    p_alast: Option<&ProbVector>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let same = |a: &ProbVector, b: &ProbVector| -> Result<()> {
        if a.support != b.support {
            return Err(CamaError::LengthMismatch {
                what: "anchor distribution supports",
                left: a.len(),
                right: b.len(),
            });
        }
        Ok(())
    };
    same(p_q0, p_a0)?;
    let c1 = p_a0
        .values
        .iter()
        .zip(&p_q0.values)
        .map(|(&a, &q)| gain(a, q))
        .collect();
    let c2 = match p_alast {
        Some(last) => {
            same(p_a0, last)?;
            last.values
                .iter()
                .zip(&p_a0.values)
                .map(|(&l, &a)| gain(l, a))
                .collect()
        }
        None => vec![0.0; p_a0.len()],
    };
    Ok((c1, c2))
}

/// Sums `c1 + c2` over layers.
pub fn token_scores(gains: &[(Vec<f64>, Vec<f64>)]) -> Result<Vec<f64>> {
    let Some(first) = gains.first() else {
        return Err(CamaError::EmptySupport);
    };
    let len = first.0.len();
    let mut s = vec![0.0; len];
    for (c1, c2) in gains {
        if c1.len() != len || c2.len() != len {
            return Err(CamaError::LengthMismatch {
                what: "per-layer gains",
                left: len,
                right: c1.len().max(c2.len()),
            });
        }
        for j in 0..len {
            s[j] += c1[j] + c2[j];
        }
    }
    Ok(s)
}

/// Top `k1_pct` percent of an element's image tokens, as absolute indices.
pub fn select_key_tokens(scores: &[f64], image: Span, k1_pct: f64) -> Result<IndexSet> {
    if scores.len() != image.len() {
        return Err(CamaError::LengthMismatch {
            what: "scores vs image span",
            left: scores.len(),
            right: image.len(),
        });
    }
    Ok(top_pct_indices(scores, k1_pct)?.shifted(image.start as isize))
}

/// Anchor distributions and gains of one element at one layer.
///
/// For an element without a question (caption mode) the pair compared by
/// `c1` is the first and last answer token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGains {
    /// 1-based.
    pub layer: usize,
    pub p_q0: Vec<f64>,
    pub p_a0: Vec<f64>,
    pub p_alast: Option<Vec<f64>>,
    pub c1: Vec<f64>,
    pub c2: Vec<f64>,
}

/// Gains of `element` from one layer's unbiased logits (`layer` is 0-based).
pub fn element_gains(
    raw_logits: &Array3<f32>,
    layout: &SegmentLayout,
    element: usize,
    layer: usize,
    caption_mode: bool,
) -> Result<LayerGains> {
    let anchors = layout.anchors(element)?;
    let is_query = element == layout.query_index();
    let dist = |anchor| anchor_distribution(raw_logits, layout, anchor, element);
    let (p_q0, p_a0, p_alast) = match anchors.question_first {
        Some(q) => {
            let last = if is_query || caption_mode {
                None
            } else {
                Some(dist(anchors.answer_last)?)
            };
            (dist(q)?, dist(anchors.answer_first)?, last)
        }
        None => (
            dist(anchors.answer_first)?,
            dist(anchors.answer_last)?,
            None,
        ),
    };
    let (c1, c2) = forward_gains(&p_q0, &p_a0, p_alast.as_ref())?;
    Ok(LayerGains {
        layer: layer + 1,
        p_q0: p_q0.values,
        p_a0: p_a0.values,
        p_alast: p_alast.map(|p| p.values),
        c1,
        c2,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementKeyReport {
    /// 1-based; the last element is the query.
    pub element: usize,
    pub image: Span,
    pub layers: Vec<LayerGains>,
    pub scores: Vec<f64>,
    pub key_set: IndexSet,
    pub max_score: f64,
}

impl ElementKeyReport {
    pub(crate) fn from_layers(
        element: usize,
        image: Span,
        layers: Vec<LayerGains>,
        k1_pct: f64,
    ) -> Result<Self> {
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = layers
            .iter()
            .map(|g| (g.c1.clone(), g.c2.clone()))
            .collect();
        let scores = token_scores(&pairs)?;
        let key_set = select_key_tokens(&scores, image, k1_pct)?;
        let max_score = key_set
            .iter()
            .map(|j| scores[j - image.start])
            .fold(f64::NEG_INFINITY, f64::max);
        Ok(ElementKeyReport {
            element: element + 1,
            image,
            layers,
            scores,
            key_set,
            max_score,
        })
    }

    /// Score of absolute token `j`.
    pub fn score_of(&self, j: usize) -> f64 {
        self.scores[j - self.image.start]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyTokenReport {
    pub elements: Vec<ElementKeyReport>,
}

impl KeyTokenReport {
    pub fn key_sets(&self) -> Vec<IndexSet> {
        self.elements.iter().map(|e| e.key_set.clone()).collect()
    }
}

/// Scores every element from the unbiased logits of the given 0-based
/// layers.
pub fn key_token_report<'a>(
    layers: impl IntoIterator<Item = (usize, &'a Array3<f32>)>,
    layout: &SegmentLayout,
    config: &CamaConfig,
) -> Result<KeyTokenReport> {
    let layers: Vec<(usize, &Array3<f32>)> = layers.into_iter().collect();
    let elements = (0..layout.elements.len())
        .map(|i| {
            let gains = layers
                .iter()
                .map(|&(l, raw)| element_gains(raw, layout, i, l, config.caption_mode))
                .collect::<Result<Vec<_>>>()?;
            ElementKeyReport::from_layers(i, layout.elements[i].image, gains, config.k1_pct)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(KeyTokenReport { elements })
}

/// Stage I entries for one 0-based layer.
pub fn stage1_entries_for_layer(
    layer: usize,
    key_report: &KeyTokenReport,
    config: &CamaConfig,
) -> Result<Vec<BiasEntry>> {
    let n = key_report.elements.len().saturating_sub(1);
    let mut entries = Vec::new();
    for e in &key_report.elements {
        if e.key_set.is_empty() {
            return Err(CamaError::EmptySupport);
        }
        let pf = pos_factor(e.element, n, config.query_position_factor)?;
        let denom = e.max_score + config.epsilon;
        for j in e.key_set.iter() {
            entries.push(BiasEntry {
                layer,
                head: HeadTarget::All,
                column: j,
                row_from: j + 1,
                value: pf * e.score_of(j) / denom,
            });
        }
    }
    Ok(entries)
}

/// Stage I entries for every configured Stage I layer.
pub fn stage1_bias(key_report: &KeyTokenReport, config: &CamaConfig) -> Result<Vec<BiasEntry>> {
    let mut out = Vec::new();
    for l in config.stage1_zero_based() {
        out.extend(stage1_entries_for_layer(l, key_report, config)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(values: Vec<f64>) -> ProbVector {
        let support = (0..values.len()).collect();
        ProbVector { values, support }
    }

    /// Two image tokens, then a single text token whose row carries `row`.
    fn tiny(row: [f32; 2], heads: usize) -> (Array3<f32>, SegmentLayout) {
        let layout = SegmentLayout::from_lengths(&[(2, 1, 1), (1, 1, 1)], false);
        let s = layout.total_len;
        let mut raw = Array3::zeros((heads, s, s));
        for h in 0..heads {
            raw[[h, 2, 0]] = row[0];
            raw[[h, 2, 1]] = row[1];
        }
        (raw, layout)
    }

    #[test]
    fn equal_logits_give_uniform_anchor() {
        let (raw, layout) = tiny([0.3, 0.3], 2);
        let p = anchor_distribution(&raw, &layout, 2, 0).unwrap();
        assert_eq!(p.len(), 2);
        assert!((p.values[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn two_token_anchor_matches_exp_normalize() {
        let (mut raw, layout) = tiny([0.0, 0.0], 2);
        // average of the two heads is [0, ln 2]
        raw[[0, 2, 1]] = 2.0 * std::f32::consts::LN_2;
        let p = anchor_distribution(&raw, &layout, 2, 0).unwrap();
        let avg = f64::from(2.0 * std::f32::consts::LN_2) / 2.0;
        let e = avg.exp();
        assert!((p.values[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((p.values[1] - e / (1.0 + e)).abs() < 1e-15);
        assert!((p.values[0] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn anchor_inside_image_span_is_rejected() {
        let (raw, layout) = tiny([0.0, 0.0], 1);
        assert!(matches!(
            anchor_distribution(&raw, &layout, 1, 0),
            Err(CamaError::NonCausalAnchor {
                anchor: 1,
                element: 0
            })
        ));
    }

    #[test]
    fn gains_examples() {
        let q = pv(vec![0.25, 0.75]);
        let a = pv(vec![0.75, 0.25]);
        let (c1, c2) = forward_gains(&q, &a, None).unwrap();
        assert!((c1[0] - 0.5 * 3f64.ln()).abs() < 1e-15);
        assert_eq!(c1[1], 0.0);
        assert_eq!(c2, vec![0.0, 0.0]);
        let (c1, _) = forward_gains(&a, &a, None).unwrap();
        assert_eq!(c1, vec![0.0, 0.0]);
    }

    #[test]
    fn gains_support_mismatch() {
        let q = pv(vec![0.5, 0.5]);
        let a = pv(vec![1.0]);
        assert!(forward_gains(&q, &a, None).is_err());
        assert!(forward_gains(&q, &q, Some(&a)).is_err());
    }

    #[test]
    fn score_linearity() {
        let g = (vec![0.1, 0.0, 0.4], vec![0.2, 0.3, 0.0]);
        let one = token_scores(std::slice::from_ref(&g)).unwrap();
        let two = token_scores(&[g.clone(), g]).unwrap();
        for (a, b) in one.iter().zip(&two) {
            assert_eq!(2.0 * a, *b);
        }
        let only_c1 = token_scores(&[(vec![0.5, 0.1], vec![0.0, 0.0])]).unwrap();
        assert_eq!(only_c1, vec![0.5, 0.1]);
        assert!(token_scores(&[]).is_err());
    }

    #[test]
    fn key_tokens_are_absolute() {
        let scores = [0.0, 0.9, 0.1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5];
        let set = select_key_tokens(&scores, Span::new(30, 40), 20.0).unwrap();
        assert_eq!(set.as_slice(), &[31, 39]);
        let zeros = [0.0; 10];
        let set = select_key_tokens(&zeros, Span::new(30, 40), 20.0).unwrap();
        assert_eq!(set.as_slice(), &[30, 31]);
    }

    #[test]
    fn stage1_values_normalized_by_max() {
        let mk = |element: usize, start: usize| ElementKeyReport {
            element,
            image: Span::new(start, start + 2),
            layers: vec![],
            scores: vec![2.0, 1.0],
            key_set: IndexSet::from_range(start..start + 2),
            max_score: 2.0,
        };
        let report = KeyTokenReport {
            elements: vec![mk(1, 0), mk(2, 4)],
        };
        let config = CamaConfig {
            stage1_layers: vec![1],
            ..CamaConfig::default()
        };
        let entries = stage1_bias(&report, &config).unwrap();
        assert_eq!(entries.len(), 4);
        assert_eq!(entries[0].value, 2.0 / (2.0 + 1e-6));
        assert_eq!(entries[1].value, 1.0 / (2.0 + 1e-6));
        assert_eq!(entries[1].row_from, 2);
        // query with n = 1 clamps to 1/1
        assert_eq!(entries[2].value, 2.0 / (2.0 + 1e-6));
        assert!(entries
            .iter()
            .all(|e| e.head == HeadTarget::All && e.layer == 0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]
        #[test]
        fn gains_are_non_negative(
            a in proptest::collection::vec(-4.0f64..4.0, 6),
            b in proptest::collection::vec(-4.0f64..4.0, 6),
        ) {
            let pa = crate::numerics::softmax(&a).unwrap();
            let pb = crate::numerics::softmax(&b).unwrap();
            let (c1, c2) = forward_gains(&pa, &pb, Some(&pa)).unwrap();
            prop_assert!(c1.iter().chain(&c2).all(|&v| v >= 0.0 && v.is_finite()));
        }

        #[test]
        fn selection_invariant_to_constant_shift(
            logits in proptest::collection::vec(-3.0f32..3.0, 12),
            shift in -50.0f32..50.0,
        ) {
            let layout = SegmentLayout::from_lengths(&[(4, 1, 2), (4, 1, 1)], false);
            let s = layout.total_len;
            let mut raw = Array3::zeros((1, s, s));
            for (k, (r, c)) in [(4, 0), (4, 1), (4, 2), (4, 3), (5, 0), (5, 1), (5, 2), (5, 3), (6, 0), (6, 1), (6, 2), (6, 3)]
                .into_iter()
                .enumerate()
            {
                raw[[0, r, c]] = logits[k];
            }
            let shifted = raw.mapv(|v: f32| v + shift);
            let config = CamaConfig { stage1_layers: vec![1], ..CamaConfig::default() };
            let g0 = element_gains(&raw, &layout, 0, 0, false).unwrap();
            let g1 = element_gains(&shifted, &layout, 0, 0, false).unwrap();
            let r0 = ElementKeyReport::from_layers(0, layout.elements[0].image, vec![g0], config.k1_pct).unwrap();
            let r1 = ElementKeyReport::from_layers(0, layout.elements[0].image, vec![g1], config.k1_pct).unwrap();
            // f32 rounding of the shifted logits can reorder near-ties only
            let gap = {
                let mut s = r0.scores.clone();
                s.sort_by(|a, b| b.total_cmp(a));
                s[0] - s[1]
            };
            prop_assume!(gap > 1e-4);
            prop_assert_eq!(r0.key_set, r1.key_set);
        }
    }
}
