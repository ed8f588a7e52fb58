//! Interleaved in-context sequences: segment layout, anchor tokens, the
//! synthetic task generator and the on-disk sequence format.
//!
//! A sequence holds `n` demonstrations followed by one query sample. Each
//! element is an image span, a question span and an answer span, laid out
//! back to back. Element indices are 0-based in this API; element `n` is the
//! query.

mod format;
mod synthetic;

use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{CamaError, Result};
use crate::numerics::IndexSet;

pub use format::{read_sequence, write_sequence, SEQUENCE_FORMAT};
pub use synthetic::{
    generate_synthetic, perturb_key_position, SyntheticTaskSpec, A_MARKER, END_MARKER,
    OBJECT_ID_OFFSET, Q_MARKER,
};

/// Half-open token range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, index: usize) -> bool {
        index >= self.start && index < self.end
    }

    pub fn indices(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }

    pub fn to_set(&self) -> IndexSet {
        IndexSet::from_range(self.indices())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElementSpans {
    pub image: Span,
    pub question: Span,
    pub answer: Span,
}

impl ElementSpans {
    pub fn start(&self) -> usize {
        self.image.start
    }

    pub fn end(&self) -> usize {
        self.answer.end
    }

    pub fn len(&self) -> usize {
        self.end() - self.start()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Question and answer tokens.
    pub fn text(&self) -> IndexSet {
        self.question.to_set().union(&self.answer.to_set())
    }
}

/// Token index sets of every element in a sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentLayout {
    pub n_shots: usize,
    pub caption_mode: bool,
    pub elements: Vec<ElementSpans>,
    pub total_len: usize,
}

/// One broken layout invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayoutViolation {
    ElementCount { expected: usize, found: usize },
    ReversedSpan { element: usize },
    Overlap { element: usize },
    CoverageGap { at: usize },
    EmptyImage { element: usize },
    EmptyQuestion { element: usize },
    EmptyAnswer { element: usize },
    LengthMismatch { covered: usize, total_len: usize },
}

impl fmt::Display for LayoutViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayoutViolation::ElementCount { expected, found } => {
                write!(f, "expected {expected} elements, found {found}")
            }
            LayoutViolation::ReversedSpan { element } => {
                write!(f, "reversed span at element {element}")
            }
            LayoutViolation::Overlap { element } => write!(f, "overlap at element {element}"),
            LayoutViolation::CoverageGap { at } => write!(f, "coverage gap at token {at}"),
            LayoutViolation::EmptyImage { element } => {
                write!(f, "empty image span at element {element}")
            }
            LayoutViolation::EmptyQuestion { element } => {
                write!(f, "empty question span at element {element}")
            }
            LayoutViolation::EmptyAnswer { element } => {
                write!(f, "empty answer span at element {element}")
            }
            LayoutViolation::LengthMismatch { covered, total_len } => {
                write!(
                    f,
                    "spans cover {covered} tokens but total_len is {total_len}"
                )
            }
        }
    }
}

/// The three anchor tokens of an element. `question_first` is `None` in
/// caption mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Anchors {
    pub question_first: Option<usize>,
    pub answer_first: usize,
    pub answer_last: usize,
}

impl SegmentLayout {
    /// Builds a contiguous layout from per-element `(image, question, answer)`
    /// token counts. The last entry is the query.
    pub fn from_lengths(lengths: &[(usize, usize, usize)], caption_mode: bool) -> Self {
        let mut cursor = 0;
        let elements = lengths
            .iter()
            .map(|&(img, q, a)| {
                let image = Span::new(cursor, cursor + img);
                let question = Span::new(image.end, image.end + q);
                let answer = Span::new(question.end, question.end + a);
                cursor = answer.end;
                ElementSpans {
                    image,
                    question,
                    answer,
                }
            })
            .collect::<Vec<_>>();
        SegmentLayout {
            n_shots: elements.len().saturating_sub(1),
            caption_mode,
            elements,
            total_len: cursor,
        }
    }

    pub fn query_index(&self) -> usize {
        self.n_shots
    }

    pub fn query(&self) -> &ElementSpans {
        &self.elements[self.n_shots]
    }

    pub fn icds(&self) -> &[ElementSpans] {
        &self.elements[..self.n_shots]
    }

    pub fn element(&self, i: usize) -> Result<&ElementSpans> {
        self.elements.get(i).ok_or(CamaError::NoSuchElement(i))
    }

    /// Every demonstration token: the context the query reads from.
    pub fn context(&self) -> Span {
        Span::new(0, self.query().start())
    }

    /// Query question plus answer-prefix tokens.
    pub fn query_text(&self) -> IndexSet {
        self.query().text()
    }

    /// Image tokens of every element, query included.
    pub fn all_image_tokens(&self) -> IndexSet {
        self.elements
            .iter()
            .flat_map(|e| e.image.indices())
            .collect()
    }

    /// Element containing `token`, if any.
    pub fn element_of(&self, token: usize) -> Option<usize> {
        self.elements
            .iter()
            .position(|e| token >= e.start() && token < e.end())
    }

    /// Checks every layout invariant and returns all violations found.
    pub fn validate(&self) -> Vec<LayoutViolation> {
        let mut out = Vec::new();
        if self.elements.len() != self.n_shots + 1 || self.n_shots == 0 {
            out.push(LayoutViolation::ElementCount {
                expected: self.n_shots.max(1) + 1,
                found: self.elements.len(),
            });
        }
        let mut cursor = 0;
        for (i, e) in self.elements.iter().enumerate() {
            for span in [e.image, e.question, e.answer] {
                if span.end < span.start {
                    out.push(LayoutViolation::ReversedSpan { element: i });
                    continue;
                }
                if span.start < cursor {
                    out.push(LayoutViolation::Overlap { element: i });
                } else if span.start > cursor {
                    out.push(LayoutViolation::CoverageGap { at: cursor });
                }
                cursor = cursor.max(span.end);
            }
            if e.image.is_empty() {
                out.push(LayoutViolation::EmptyImage { element: i });
            }
            if e.answer.is_empty() {
                out.push(LayoutViolation::EmptyAnswer { element: i });
            }
            if e.question.is_empty() && !self.caption_mode {
                out.push(LayoutViolation::EmptyQuestion { element: i });
            }
        }
        if cursor != self.total_len {
            out.push(LayoutViolation::LengthMismatch {
                covered: cursor,
                total_len: self.total_len,
            });
        }
        out
    }

    /// Anchor tokens of element `i`: first question token, first and last
    /// answer token.
    pub fn anchors(&self, i: usize) -> Result<Anchors> {
        let e = self.element(i)?;
        if e.answer.is_empty() {
            return Err(CamaError::MalformedElement(i));
        }
        let question_first = if e.question.is_empty() {
            if !self.caption_mode {
                return Err(CamaError::InvalidLayout(format!(
                    "element {i} has no question outside caption mode"
                )));
            }
            None
        } else {
            Some(e.question.start)
        };
        Ok(Anchors {
            question_first,
            answer_first: e.answer.start,
            answer_last: e.answer.end - 1,
        })
    }
}

/// Ground-truth annotations produced alongside a synthetic sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Per element, the image tokens that carry the object named by the text.
    pub key_region_masks: Vec<IndexSet>,
    /// 1-based position of the demonstration that shares the query's object.
    pub key_icd_index: Option<usize>,
    /// Per element, the token id of every answer-span token.
    pub answer_token_ids: Vec<Vec<u32>>,
    /// Token id the query should be answered with.
    pub query_answer_id: u32,
    pub task: SyntheticTaskSpec,
}

/// Embedded sequence ready for the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedSequence {
    /// `S × D` input embeddings.
    pub embeddings: Array2<f32>,
    pub layout: SegmentLayout,
    pub ground_truth: Option<GroundTruth>,
}

impl TokenizedSequence {
    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn check(&self) -> Result<()> {
        if self.embeddings.nrows() != self.layout.total_len {
            return Err(CamaError::InconsistentManifest(format!(
                "{} embedding rows but layout covers {} tokens",
                self.embeddings.nrows(),
                self.layout.total_len
            )));
        }
        if self.embeddings.iter().any(|v| !v.is_finite()) {
            return Err(CamaError::InvalidLayout("non-finite embedding".into()));
        }
        let violations = self.layout.validate();
        if let Some(v) = violations.first() {
            return Err(CamaError::InvalidLayout(v.to_string()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_shot() -> SegmentLayout {
        SegmentLayout::from_lengths(&[(6, 2, 3), (6, 2, 3), (6, 2, 3), (6, 2, 1)], false)
    }

    #[test]
    fn well_formed_layout_validates() {
        let layout = three_shot();
        assert!(layout.validate().is_empty());
        assert_eq!(layout.total_len, 3 * 11 + 9);
        assert_eq!(layout.n_shots, 3);
    }

    #[test]
    fn overlap_is_reported() {
        let mut layout = three_shot();
        layout.elements[2].question.start -= 1;
        let v = layout.validate();
        assert!(v.contains(&LayoutViolation::Overlap { element: 2 }));
        assert!(v.iter().any(|x| x.to_string() == "overlap at element 2"));
    }

    #[test]
    fn gap_is_reported() {
        let mut layout = three_shot();
        for e in layout.elements.iter_mut().skip(1) {
            for s in [&mut e.image, &mut e.question, &mut e.answer] {
                s.start += 1;
                s.end += 1;
            }
        }
        layout.total_len += 1;
        let v = layout.validate();
        assert!(v.contains(&LayoutViolation::CoverageGap { at: 11 }));
        assert!(v[0].to_string().starts_with("coverage gap"));
    }

    #[test]
    fn empty_spans_are_reported() {
        let layout = SegmentLayout::from_lengths(&[(0, 2, 3), (4, 0, 0)], false);
        let v = layout.validate();
        assert!(v.contains(&LayoutViolation::EmptyImage { element: 0 }));
        assert!(v.contains(&LayoutViolation::EmptyQuestion { element: 1 }));
        assert!(v.contains(&LayoutViolation::EmptyAnswer { element: 1 }));
    }

    #[test]
    fn anchors_from_spans() {
        let layout = SegmentLayout::from_lengths(&[(10, 4, 3), (4, 1, 1)], false);
        let a = layout.anchors(0).unwrap();
        assert_eq!(
            (a.question_first, a.answer_first, a.answer_last),
            (Some(10), 14, 16)
        );
        let single = SegmentLayout::from_lengths(&[(10, 4, 1), (4, 1, 1)], false);
        let a = single.anchors(0).unwrap();
        assert_eq!((a.answer_first, a.answer_last), (14, 14));
    }

    #[test]
    fn caption_mode_anchors_have_no_question() {
        let layout = SegmentLayout::from_lengths(&[(8, 0, 4), (8, 0, 1)], true);
        assert!(layout.validate().is_empty());
        let a = layout.anchors(0).unwrap();
        assert_eq!(
            (a.question_first, a.answer_first, a.answer_last),
            (None, 8, 11)
        );
    }

    #[test]
    fn empty_answer_is_malformed() {
        let layout = SegmentLayout::from_lengths(&[(8, 2, 0), (8, 1, 1)], false);
        assert!(matches!(
            layout.anchors(0),
            Err(CamaError::MalformedElement(0))
        ));
    }

    #[test]
    fn context_and_query_text() {
        let layout = three_shot();
        assert_eq!(layout.context(), Span::new(0, 33));
        assert_eq!(layout.query_text().as_slice(), &[39, 40, 41]);
        assert_eq!(layout.element_of(34), Some(3));
        assert_eq!(layout.all_image_tokens().len(), 24);
    }
}
