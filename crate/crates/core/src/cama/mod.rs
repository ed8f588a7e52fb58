//! Two-stage attention modulation.
//!
//! Stage I ([`stage1`]) scores each element's image tokens from the shift of
//! anchor-row attention and biases the strongest ones in shallow layers.
//! Stage II ([`stage2`]) picks query-centric heads in middle layers and
//! biases each demonstration's key tokens and text by its similarity to the
//! query. [`run_cama`] orchestrates both over prefill passes.

mod config;
mod run;
pub mod stage1;
pub mod stage2;

pub use config::{pos_factor, CamaConfig, PrefillMode, QueryPositionFactor, RhoSource};
pub use run::{run_cama, CamaReport, CamaRunResult};
pub use stage1::{
    anchor_distribution, element_gains, forward_gains, key_token_report, select_key_tokens,
    stage1_bias, stage1_entries_for_layer, token_scores, ElementKeyReport, KeyTokenReport,
    LayerGains,
};
pub use stage2::{
    head_flow, joint_representation, query_weights, select_heads, stage2_bias,
    stage2_entries_for_layer, HeadSelectionReport, LayerHeads, QueryWeightReport,
};
