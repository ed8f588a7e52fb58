//! Context-aware modulated attention on a toy multimodal decoder.
//!
//! The crate builds synthetic interleaved image–text sequences, runs them
//! through a small multi-head causal decoder, and modulates attention logits
//! during prefill in two stages: shallow layers amplify the image tokens
//! each demonstration's text relies on, and middle layers boost
//! query-centric heads toward the demonstrations most similar to the query.
//! Diagnostics measure intra-demonstration alignment and saliency-based
//! contribution; contrastive decoding and soft attention masking are
//! provided as comparison baselines.

pub mod baselines;
pub mod cama;
pub mod decoder;
pub mod diagnostics;
pub mod error;
mod io;
pub mod numerics;
pub mod sequence;

pub use cama::{run_cama, CamaConfig, CamaRunResult};
pub use decoder::{BiasPlan, ForwardTrace, ModelDims, ModelParams};
pub use error::{CamaError, Result};
pub use numerics::{IndexSet, ProbVector};
pub use sequence::{SegmentLayout, SyntheticTaskSpec, TokenizedSequence};
