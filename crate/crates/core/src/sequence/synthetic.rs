//! Seeded generator for synthetic visual-question sequences.
//!
//! Every demonstration pictures one object: its image rows carry that
//! object's vocabulary embedding inside a contiguous "bounding box" of
//! `ceil(T/5)` tokens, on top of Gaussian background noise, and its text
//! names the same object. The query shares its object with exactly one
//! demonstration, the key demonstration.
//!
//! The object vocabulary is split in halves. Regular samples draw from the
//! lower half; perturbation distractors draw from the upper half, so they
//! never mention the query's object.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{GroundTruth, SegmentLayout, TokenizedSequence};
use crate::error::{CamaError, Result};
use crate::numerics::IndexSet;

pub const Q_MARKER: u32 = 0;
pub const A_MARKER: u32 = 1;
pub const END_MARKER: u32 = 2;
/// Token id of object `o` is `OBJECT_ID_OFFSET + o`.
pub const OBJECT_ID_OFFSET: u32 = 3;

const CLUTTER_SCALE: f32 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub n_shots: usize,
    pub image_tokens_per_icd: usize,
    pub question_len: usize,
    pub answer_len: usize,
    pub object_vocab_size: usize,
    pub embed_dim: usize,
    pub noise_scale: f32,
    pub caption_mode: bool,
    pub seed: u64,
    /// Seed of the shared token-embedding table.
    #[serde(default = "default_vocab_seed")]
    pub vocab_seed: u64,
}

fn default_vocab_seed() -> u64 {
    0x5eed_cafe
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            n_shots: 3,
            image_tokens_per_icd: 20,
            question_len: 4,
            answer_len: 3,
            object_vocab_size: 16,
            embed_dim: 64,
            noise_scale: 0.3,
            caption_mode: false,
            seed: 0,
            vocab_seed: default_vocab_seed(),
        }
    }
}

impl SyntheticTaskSpec {
    pub fn vocab_size(&self) -> usize {
        self.object_vocab_size + OBJECT_ID_OFFSET as usize
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_shots", self.n_shots),
            ("image_tokens_per_icd", self.image_tokens_per_icd),
            ("answer_len", self.answer_len),
            ("embed_dim", self.embed_dim),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(CamaError::InvalidSpec(format!("{name} must be ≥ 1")));
            }
        }
        if !self.caption_mode && self.question_len == 0 {
            return Err(CamaError::InvalidSpec("question_len must be ≥ 1".into()));
        }
        if self.object_vocab_size < 2 {
            return Err(CamaError::InvalidSpec(
                "object_vocab_size must be ≥ 2 (task and distractor halves)".into(),
            ));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(CamaError::InvalidSpec("noise_scale must be ≥ 0".into()));
        }
        Ok(())
    }

    fn task_objects(&self) -> std::ops::Range<usize> {
        0..self.object_vocab_size / 2
    }

    fn distractor_objects(&self) -> std::ops::Range<usize> {
        self.object_vocab_size / 2..self.object_vocab_size
    }

    fn box_len(&self) -> usize {
        self.image_tokens_per_icd.div_ceil(5)
    }
}

/// Token-embedding table shared by every sequence of a task.
fn vocabulary(spec: &SyntheticTaskSpec) -> Array2<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.vocab_seed);
    let rows = spec.vocab_size();
    let mut table = Array2::<f32>::zeros((rows, spec.embed_dim));
    for v in table.iter_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
    table
}

/// One element before it is placed into a sequence.
struct ElementDraft {
    image: Vec<Vec<f32>>,
    question: Vec<Vec<f32>>,
    answer: Vec<Vec<f32>>,
    /// Image-relative positions of the object box.
    mask: Vec<usize>,
    answer_ids: Vec<u32>,
}

impl ElementDraft {
    fn lengths(&self) -> (usize, usize, usize) {
        (self.image.len(), self.question.len(), self.answer.len())
    }
}

fn noisy_row(
    base: Option<(&Array2<f32>, usize, f32)>,
    spec: &SyntheticTaskSpec,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    (0..spec.embed_dim)
        .map(|d| {
            let noise: f32 = StandardNormal.sample(rng);
            let signal = base.map_or(0.0, |(table, id, scale)| scale * table[[id, d]]);
            signal + spec.noise_scale * noise
        })
        .collect()
}

fn draft_element(
    spec: &SyntheticTaskSpec,
    vocab: &Array2<f32>,
    object: usize,
    clutter_pool: std::ops::Range<usize>,
    is_query: bool,
    rng: &mut ChaCha8Rng,
) -> ElementDraft {
    let t = spec.image_tokens_per_icd;
    let box_len = spec.box_len();
    let offset = rng.random_range(0..=t - box_len);
    let mask: Vec<usize> = (offset..offset + box_len).collect();
    let object_id = OBJECT_ID_OFFSET as usize + object;

    let clutter = if clutter_pool.len() > 1 {
        let mut c = rng.random_range(clutter_pool.clone());
        if c == object {
            c = clutter_pool.start + (c - clutter_pool.start + 1) % clutter_pool.len();
        }
        Some(OBJECT_ID_OFFSET as usize + c)
    } else {
        None
    };
    let free = t - box_len;
    let clutter_len = box_len.min(free);
    let clutter_at = if clutter_len > 0 {
        rng.random_range(0..=free - clutter_len)
    } else {
        0
    };

    let mut image = Vec::with_capacity(t);
    let mut free_pos = 0;
    for pos in 0..t {
        let base = if mask.contains(&pos) {
            Some((vocab, object_id, 1.0))
        } else {
            let in_clutter = free_pos >= clutter_at && free_pos < clutter_at + clutter_len;
            free_pos += 1;
            match clutter {
                Some(id) if in_clutter => Some((vocab, id, CLUTTER_SCALE)),
                _ => None,
            }
        };
        image.push(noisy_row(base, spec, rng));
    }

    let question_ids: Vec<u32> = if spec.caption_mode {
        Vec::new()
    } else {
        std::iter::once(Q_MARKER)
            .chain(std::iter::repeat_n(object_id as u32, spec.question_len - 1))
            .collect()
    };
    let answer_ids: Vec<u32> = if is_query {
        vec![A_MARKER]
    } else {
        match spec.answer_len {
            1 => vec![A_MARKER],
            2 => vec![A_MARKER, object_id as u32],
            len => std::iter::once(A_MARKER)
                .chain(std::iter::repeat_n(object_id as u32, len - 2))
                .chain(std::iter::once(END_MARKER))
                .collect(),
        }
    };
    let question = question_ids
        .iter()
        .map(|&id| noisy_row(Some((vocab, id as usize, 1.0)), spec, rng))
        .collect();
    let answer = answer_ids
        .iter()
        .map(|&id| noisy_row(Some((vocab, id as usize, 1.0)), spec, rng))
        .collect();
    ElementDraft {
        image,
        question,
        answer,
        mask,
        answer_ids,
    }
}

fn assemble(
    spec: &SyntheticTaskSpec,
    drafts: Vec<ElementDraft>,
    key_icd_index: Option<usize>,
    query_answer_id: u32,
) -> TokenizedSequence {
    let lengths: Vec<_> = drafts.iter().map(ElementDraft::lengths).collect();
    let layout = SegmentLayout::from_lengths(&lengths, spec.caption_mode);
    let mut embeddings = Array2::<f32>::zeros((layout.total_len, spec.embed_dim));
    let mut masks = Vec::with_capacity(drafts.len());
    let mut answer_token_ids = Vec::with_capacity(drafts.len());
    let mut row = 0;
    for (draft, spans) in drafts.into_iter().zip(&layout.elements) {
        for r in draft
            .image
            .iter()
            .chain(&draft.question)
            .chain(&draft.answer)
        {
            for (d, v) in r.iter().enumerate() {
                embeddings[[row, d]] = *v;
            }
            row += 1;
        }
        masks.push(
            draft
                .mask
                .iter()
                .map(|m| spans.image.start + m)
                .collect::<IndexSet>(),
        );
        answer_token_ids.push(draft.answer_ids);
    }
    TokenizedSequence {
        embeddings,
        layout,
        ground_truth: Some(GroundTruth {
            key_region_masks: masks,
            key_icd_index,
            answer_token_ids,
            query_answer_id,
            task: spec.clone(),
        }),
    }
}

/// Generates a sequence deterministically from `spec` (including its seed).
pub fn generate_synthetic(spec: &SyntheticTaskSpec) -> Result<TokenizedSequence> {
    spec.validate()?;
    let vocab = vocabulary(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pool = spec.task_objects();
    let query_object = rng.random_range(pool.clone());
    let key = rng.random_range(1..=spec.n_shots);
    let mut drafts = Vec::with_capacity(spec.n_shots + 1);
    for i in 1..=spec.n_shots {
        let object = if i == key {
            query_object
        } else {
            rng.random_range(pool.clone())
        };
        drafts.push(draft_element(
            spec,
            &vocab,
            object,
            pool.clone(),
            false,
            &mut rng,
        ));
    }
    drafts.push(draft_element(
        spec,
        &vocab,
        query_object,
        pool,
        true,
        &mut rng,
    ));
    Ok(assemble(
        spec,
        drafts,
        Some(key),
        OBJECT_ID_OFFSET + query_object as u32,
    ))
}

/// Moves the key demonstration to 1-based slot `position` and replaces every
/// other demonstration with a distractor drawn from the upper half of the
/// object vocabulary. The query is copied bit-exactly.
pub fn perturb_key_position(
    seq: &TokenizedSequence,
    position: usize,
    distractor_seed: u64,
) -> Result<TokenizedSequence> {
    let gt = seq
        .ground_truth
        .as_ref()
        .ok_or(CamaError::MissingGroundTruth)?;
    let key = gt.key_icd_index.ok_or(CamaError::MissingGroundTruth)?;
    let n = seq.layout.n_shots;
    if n < 2 {
        return Err(CamaError::InvalidSpec(
            "perturbation needs at least two demonstrations".into(),
        ));
    }
    if position == 0 || position > n {
        return Err(CamaError::PositionOutOfRange { position, shots: n });
    }
    let spec = &gt.task;
    let vocab = vocabulary(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(distractor_seed);

    let copy_element = |i: usize| -> ElementDraft {
        let spans = seq.layout.elements[i];
        let rows = |span: super::Span| -> Vec<Vec<f32>> {
            span.indices()
                .map(|r| seq.embeddings.row(r).to_vec())
                .collect()
        };
        ElementDraft {
            image: rows(spans.image),
            question: rows(spans.question),
            answer: rows(spans.answer),
            mask: gt.key_region_masks[i]
                .iter()
                .map(|m| m - spans.image.start)
                .collect(),
            answer_ids: gt.answer_token_ids[i].clone(),
        }
    };

    let mut drafts = Vec::with_capacity(n + 1);
    for slot in 1..=n {
        if slot == position {
            drafts.push(copy_element(key - 1));
        } else {
            let object = rng.random_range(spec.distractor_objects());
            drafts.push(draft_element(
                spec,
                &vocab,
                object,
                spec.distractor_objects(),
                false,
                &mut rng,
            ));
        }
    }
    drafts.push(copy_element(n));
    Ok(assemble(spec, drafts, Some(position), gt.query_answer_id))
}
