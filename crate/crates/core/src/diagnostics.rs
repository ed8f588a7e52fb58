//! Alignment and contribution measurements over decoded runs.
//!
//! Heat and saliency are read over the rows that emitted generated tokens.
//! Saliency is indexed (row = attending position, column = attended
//! position) and summed over heads.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::decoder::{AttentionGrads, ForwardTrace};
use crate::error::{CamaError, Result};
use crate::numerics::{set_iou, top_pct_indices, IndexSet};
use crate::sequence::{SegmentLayout, Span};

/// Share of image tokens taken as the attended region.
pub const ALIGN_TOP_PCT: f64 = 20.0;

/// Per image token of `image`: row-max-normalized attention weight, averaged
/// over `answer_rows` and heads.
pub fn token_heat(weights: &Array3<f32>, image: Span, answer_rows: &[usize]) -> Result<Vec<f64>> {
    if answer_rows.is_empty() {
        return Err(CamaError::NoGeneratedTokens);
    }
    let (nh, s, _) = weights.dim();
    if let Some(&bad) = answer_rows.iter().find(|&&r| r >= s) {
        return Err(CamaError::LengthMismatch {
            what: "answer row vs trace length",
            left: bad,
            right: s,
        });
    }
    let mut heat = vec![0.0; image.len()];
    for h in 0..nh {
        for &t in answer_rows {
            let row = weights.slice(ndarray::s![h, t, ..]);
            let max = row.iter().copied().fold(0.0f32, f32::max);
            if max <= 0.0 {
                continue;
            }
            let max = f64::from(max);
            for (k, v) in image.indices().enumerate() {
                heat[k] += f64::from(row[v]) / max;
            }
        }
    }
    let count = (nh * answer_rows.len()) as f64;
    Ok(heat.into_iter().map(|x| x / count).collect())
}

/// IoU between the top-20% heat tokens and the annotated tokens.
pub fn alignment_score(heat: &[f64], image: Span, annotation: &IndexSet) -> Result<f64> {
    if !annotation.iter().all(|j| image.contains(j)) {
        return Err(CamaError::InvalidLayout(
            "annotation extends outside the image span".into(),
        ));
    }
    let attended = top_pct_indices(heat, ALIGN_TOP_PCT)?.shifted(image.start as isize);
    Ok(set_iou(&attended, annotation))
}

/// `|A ⊙ ∂L/∂A|` for one layer; zero above the diagonal.
pub fn saliency_matrix(weights: &Array3<f32>, grads: &Array3<f64>) -> Result<Array3<f64>> {
    if weights.dim() != grads.dim() {
        return Err(CamaError::LengthMismatch {
            what: "weights vs gradient elements",
            left: weights.len(),
            right: grads.len(),
        });
    }
    let mut out = Array3::zeros(grads.dim());
    for ((h, r, c), v) in out.indexed_iter_mut() {
        if c <= r {
            *v = (f64::from(weights[[h, r, c]]) * grads[[h, r, c]]).abs();
        }
    }
    Ok(out)
}

/// Saliency for every layer of a run.
pub fn saliency(trace: &ForwardTrace, grads: &AttentionGrads) -> Result<Vec<Array3<f64>>> {
    if trace.weights.len() != grads.grads.len() {
        return Err(CamaError::LengthMismatch {
            what: "trace vs gradient layers",
            left: trace.weights.len(),
            right: grads.grads.len(),
        });
    }
    trace
        .weights
        .iter()
        .zip(&grads.grads)
        .map(|(w, g)| saliency_matrix(w, g))
        .collect()
}

/// Head-summed saliency from `answer_rows` into each element's image tokens,
/// and the total over all image tokens.
pub fn contribution_parts(
    saliency: &Array3<f64>,
    layout: &SegmentLayout,
    answer_rows: &[usize],
) -> Result<(Vec<f64>, f64)> {
    if answer_rows.is_empty() {
        return Err(CamaError::NoGeneratedTokens);
    }
    let (nh, s, _) = saliency.dim();
    if let Some(&bad) = answer_rows.iter().find(|&&r| r >= s) {
        return Err(CamaError::LengthMismatch {
            what: "answer row vs saliency rows",
            left: bad,
            right: s,
        });
    }
    // denominator is accumulated in the same (element, t, v, h) order as the
    // parts so that a partition sums back exactly
    let mut parts = Vec::with_capacity(layout.elements.len());
    let mut total = 0.0;
    for e in &layout.elements {
        let mut part = 0.0;
        for &t in answer_rows {
            for v in e.image.indices() {
                for h in 0..nh {
                    part += saliency[[h, t, v]];
                }
            }
        }
        total += part;
        parts.push(part);
    }
    Ok((parts, total))
}

/// Fraction of answer-directed image saliency landing on demonstration
/// `position` (1-based).
pub fn contribution_score(
    saliency: &Array3<f64>,
    layout: &SegmentLayout,
    position: usize,
    answer_rows: &[usize],
) -> Result<f64> {
    if position == 0 || position > layout.n_shots {
        return Err(CamaError::PositionOutOfRange {
            position,
            shots: layout.n_shots,
        });
    }
    let (parts, total) = contribution_parts(saliency, layout, answer_rows)?;
    if total <= 0.0 {
        return Err(CamaError::NoAnswerSaliency);
    }
    Ok(parts[position - 1] / total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    /// 1-based.
    pub layer: usize,
    /// Per element, query last. `None` without an annotation.
    pub align: Vec<Option<f64>>,
    /// Per demonstration position. Empty when no saliency was computed.
    pub contrib: Vec<f64>,
    /// Per element heat over its image tokens.
    pub heat: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub answer_rows: Vec<usize>,
    pub layers: Vec<LayerDiagnostics>,
}

/// Alignment for every layer and element, plus contribution when gradients
/// are supplied. `annotations` is indexed by element.
pub fn diagnose(
    trace: &ForwardTrace,
    layout: &SegmentLayout,
    annotations: Option<&[IndexSet]>,
    grads: Option<&AttentionGrads>,
    answer_rows: &[usize],
) -> Result<DiagnosticsReport> {
    let sal = grads.map(|g| saliency(trace, g)).transpose()?;
    let mut layers = Vec::with_capacity(trace.weights.len());
    for (l, w) in trace.weights.iter().enumerate() {
        let mut heat = Vec::with_capacity(layout.elements.len());
        let mut align = Vec::with_capacity(layout.elements.len());
        for (i, e) in layout.elements.iter().enumerate() {
            let h = token_heat(w, e.image, answer_rows)?;
            let a = match annotations.and_then(|a| a.get(i)) {
                Some(mask) => Some(alignment_score(&h, e.image, mask)?),
                None => None,
            };
            heat.push(h);
            align.push(a);
        }
        let contrib = match &sal {
            Some(sal) => {
                let (parts, total) = contribution_parts(&sal[l], layout, answer_rows)?;
                if total <= 0.0 {
                    return Err(CamaError::NoAnswerSaliency);
                }
                parts[..layout.n_shots].iter().map(|p| p / total).collect()
            }
            None => Vec::new(),
        };
        layers.push(LayerDiagnostics {
            layer: l + 1,
            align,
            contrib,
            heat,
        });
    }
    Ok(DiagnosticsReport {
        answer_rows: answer_rows.to_vec(),
        layers,
    })
}

/// Min–max scales to 0..=255; a constant input maps to 128.
pub fn to_gray(matrix: ArrayView2<f64>) -> Result<Array2<u8>> {
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(CamaError::NonFiniteLogits);
    }
    let min = matrix.iter().copied().fold(f64::INFINITY, f64::min);
    let max = matrix.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    Ok(matrix.mapv(|v| {
        if range > 0.0 {
            ((v - min) / range * 255.0).round() as u8
        } else {
            128
        }
    }))
}

/// Writes a binary (P5) 8-bit graymap.
pub fn export_heatmap(matrix: ArrayView2<f64>, path: &Path) -> Result<()> {
    let gray = to_gray(matrix)?;
    let (h, w) = gray.dim();
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(gray.iter());
    fs::write(path, bytes).map_err(|e| CamaError::io(path, e))
}

/// Heat vector as a one-row graymap.
pub fn export_heat_vector(heat: &[f64], path: &Path) -> Result<()> {
    let m = ArrayView2::from_shape((1, heat.len()), heat).expect("one row");
    export_heatmap(m, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PgmHeader {
    pub width: usize,
    pub height: usize,
    pub max_value: usize,
    /// Byte offset of the first pixel.
    pub data_offset: usize,
}

/// Parses the header of a binary graymap (no comment lines).
pub fn parse_pgm_header(bytes: &[u8]) -> Result<PgmHeader> {
    let bad = |reason: &str| CamaError::MalformedHeader {
        path: "<graymap>".into(),
        reason: reason.to_string(),
    };
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary graymap"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad number"));
    let header = PgmHeader {
        width: num(fields[1])?,
        height: num(fields[2])?,
        max_value: num(fields[3])?,
        data_offset: pos + 1,
    };
    if bytes.len() != header.data_offset + header.width * header.height {
        return Err(bad("pixel count does not match dimensions"));
    }
    Ok(header)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn uniform_weights_give_uniform_heat() {
        let w = Array3::from_elem((2, 6, 6), 0.25f32);
        let heat = token_heat(&w, Span::new(0, 3), &[4, 5]).unwrap();
        assert_eq!(heat, vec![1.0; 3]);
    }

    #[test]
    fn single_row_heat_is_normalized_row() {
        let mut w = Array3::zeros((1, 4, 4));
        for (c, v) in [0.1f32, 0.4, 0.2, 0.3].into_iter().enumerate() {
            w[[0, 3, c]] = v;
        }
        let heat = token_heat(&w, Span::new(0, 3), &[3]).unwrap();
        let expect = [0.1f32, 0.4, 0.2].map(|v| f64::from(v) / f64::from(0.4f32));
        assert_eq!(heat, expect.to_vec());
        assert!(matches!(
            token_heat(&w, Span::new(0, 3), &[]),
            Err(CamaError::NoGeneratedTokens)
        ));
    }

    #[test]
    fn alignment_examples() {
        let img = Span::new(10, 20);
        let heat = [0.0, 0.9, 0.0, 0.0, 0.0, 0.8, 0.0, 0.0, 0.0, 0.0];
        let r = IndexSet::from(vec![11, 15]);
        assert_eq!(alignment_score(&heat, img, &r).unwrap(), 1.0);
        assert_eq!(
            alignment_score(&heat, img, &IndexSet::from(vec![12, 13])).unwrap(),
            0.0
        );
        let b = IndexSet::from(vec![11, 12, 13]);
        assert_eq!(alignment_score(&heat, img, &b).unwrap(), 0.25);
        assert!(alignment_score(&heat, img, &IndexSet::from(vec![3])).is_err());
    }

    #[test]
    fn saliency_examples() {
        let w = Array3::from_shape_fn((1, 2, 2), |(_, r, c)| if c <= r { 0.5f32 } else { 0.0 });
        let g = Array3::from_shape_vec((1, 2, 2), vec![-2.0, 7.0, 0.5, -1.0]).unwrap();
        let s = saliency_matrix(&w, &g).unwrap();
        assert_eq!(
            s,
            Array3::from_shape_vec((1, 2, 2), vec![1.0, 0.0, 0.25, 0.5]).unwrap()
        );
        let zero = saliency_matrix(&w, &Array3::zeros((1, 2, 2))).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        assert!(saliency_matrix(&w, &Array3::zeros((1, 3, 3))).is_err());
    }

    fn layout() -> SegmentLayout {
        SegmentLayout::from_lengths(&[(2, 1, 1), (2, 1, 1), (2, 1, 1), (2, 1, 1)], false)
    }

    #[test]
    fn contribution_concentrated_and_uniform() {
        let l = layout();
        let s = l.total_len;
        let rows = [s - 1];
        let mut sal = Array3::zeros((2, s, s));
        sal[[0, s - 1, 4]] = 3.0;
        sal[[1, s - 1, 5]] = 1.0;
        assert_eq!(contribution_score(&sal, &l, 2, &rows).unwrap(), 1.0);
        let uniform = Array3::from_elem((2, s, s), 0.5);
        let c = contribution_score(&uniform, &l, 1, &rows).unwrap();
        assert!((c - 2.0 / 8.0).abs() < 1e-15);
        assert!(matches!(
            contribution_score(&Array3::zeros((2, s, s)), &l, 1, &rows),
            Err(CamaError::NoAnswerSaliency)
        ));
        assert!(contribution_score(&uniform, &l, 4, &rows).is_err());
    }

    #[test]
    fn pgm_examples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        export_heatmap(array![[0.0, 1.0], [1.0, 0.0]].view(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let h = parse_pgm_header(&bytes).unwrap();
        assert_eq!((h.width, h.height, h.max_value), (2, 2, 255));
        assert_eq!(&bytes[h.data_offset..], &[0, 255, 255, 0]);

        export_heatmap(Array2::from_elem((3, 5), 4.2).view(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let h = parse_pgm_header(&bytes).unwrap();
        assert_eq!((h.width, h.height), (5, 3));
        assert!(bytes[h.data_offset..].iter().all(|&b| b == 128));

        export_heat_vector(&[0.0, 0.5, 1.0], &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(
            &bytes[parse_pgm_header(&bytes).unwrap().data_offset..],
            &[0, 128, 255]
        );
        assert!(export_heatmap(array![[f64::NAN]].view(), &path).is_err());
        assert!(parse_pgm_header(b"P2\n1 1\n255\n0").is_err());
    }

    proptest! {
        #[test]
        fn scores_stay_in_unit_interval(
            values in proptest::collection::vec(0.0f64..1.0, 2 * 16 * 16),
        ) {
            let l = layout();
            let s = l.total_len;
            let sal = Array3::from_shape_vec((2, s, s), values).unwrap();
            let rows = [s - 2, s - 1];
            let (parts, total) = contribution_parts(&sal, &l, &rows).unwrap();
            prop_assert_eq!(parts.iter().sum::<f64>(), total);
            for p in 1..=3 {
                let c = contribution_score(&sal, &l, p, &rows).unwrap();
                prop_assert!((0.0..=1.0).contains(&c));
            }
            let w = sal.mapv(|v| v as f32);
            for e in &l.elements {
                let heat = token_heat(&w, e.image, &rows).unwrap();
                prop_assert!(heat.iter().all(|h| (0.0..=1.0).contains(h)));
                let a = alignment_score(&heat, e.image, &IndexSet::from(vec![e.image.start])).unwrap();
                prop_assert!((0.0..=1.0).contains(&a));
            }
        }
    }
}
