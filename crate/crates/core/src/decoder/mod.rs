//! From-scratch multi-head causal decoder.
//!
//! Each layer: layer norm → per-head logits `QKᵀ/√d_k` → additive bias →
//! causal softmax → value mix → output projection → residual → layer norm →
//! GELU feed-forward → residual. Positions enter as fixed sinusoidal codes
//! added to the input embeddings.
//!
//! Layers are 0-based in this API and 1-based in configs, reports and file
//! names.

mod forward;
mod grads;
mod params;
mod plan;
mod trace_io;

pub use forward::{
    argmax, decode_greedy, exact_attention, forward_embeddings, forward_pass_count, prefill,
    prefill_with_hook, AttentionPerturbation, Decoded, ExactAttention, ForwardTrace, LayerHook,
    SoftMask,
};
pub use grads::{attention_grads, finite_difference, perturbed_loss, AttentionGrads, LossSpec};
pub use params::{init_params, LayerParams, ModelDims, ModelParams};
pub use plan::{BiasEntry, BiasPlan, HeadTarget};
pub use trace_io::{
    export_trace, import_trace, StoredLayer, StoredTrace, TraceExport, TRACE_FORMAT,
};
