//! Comparison baselines: contrastive decoding against blanked demonstration
//! images, and a soft causal/bidirectional attention mask on a fixed layer
//! schedule.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::decoder::{argmax, forward_embeddings, prefill, ForwardTrace, ModelParams, SoftMask};
use crate::error::{CamaError, Result};
use crate::sequence::TokenizedSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distortion {
    BlankImages,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CdConfig {
    pub alpha: f64,
    pub distortion: Distortion,
}

impl Default for CdConfig {
    fn default() -> Self {
        CdConfig {
            alpha: 0.4,
            distortion: Distortion::BlankImages,
        }
    }
}

impl CdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(CamaError::InvalidConfig(format!(
                "alpha must be finite and non-negative, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Copy of `seq` with every demonstration image row set to zero.
pub fn blank_icd_images(seq: &TokenizedSequence) -> TokenizedSequence {
    let mut out = seq.clone();
    for e in seq.layout.icds() {
        for r in e.image.indices() {
            out.embeddings.row_mut(r).fill(0.0);
        }
    }
    out
}

/// `(1+α)·a − α·b`, evaluated as `a + α·(a − b)` so that `a == b` returns `a`
/// exactly.
pub fn contrastive_decode(a: &[f64], b: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(CamaError::LengthMismatch {
            what: "contrastive logits",
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| x + alpha * (x - y)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdRun {
    pub alpha: f64,
    pub logits_orig: Vec<f64>,
    pub logits_distorted: Vec<f64>,
    pub calibrated: Vec<f64>,
    pub token: u32,
    pub prefills: u64,
}

/// Next-token logits at the query's answer prefix, on the original and the
/// blanked prompt, and their contrastive combination.
pub fn run_cd(seq: &TokenizedSequence, params: &ModelParams, config: &CdConfig) -> Result<CdRun> {
    config.validate()?;
    let before = crate::decoder::forward_pass_count();
    let orig = prefill(seq, params, None)?;
    let distorted = match config.distortion {
        Distortion::BlankImages => prefill(&blank_icd_images(seq), params, None)?,
    };
    let prefills = crate::decoder::forward_pass_count() - before;
    let logits_orig = orig.next_token_logits();
    let logits_distorted = distorted.next_token_logits();
    let calibrated = contrastive_decode(&logits_orig, &logits_distorted, config.alpha)?;
    Ok(CdRun {
        alpha: config.alpha,
        token: argmax(&calibrated) as u32,
        logits_orig,
        logits_distorted,
        calibrated,
        prefills,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SofaConfig {
    pub sigma: f64,
    pub layer_stride: usize,
}

impl Default for SofaConfig {
    fn default() -> Self {
        SofaConfig {
            sigma: 0.5,
            layer_stride: 2,
        }
    }
}

impl SofaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sigma) {
            return Err(CamaError::InvalidConfig(format!(
                "sigma must lie in [0, 1], got {}",
                self.sigma
            )));
        }
        if self.layer_stride == 0 {
            return Err(CamaError::InvalidConfig("layer_stride must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Scheduled 0-based layers: 1-based multiples of the stride.
    pub fn layers(&self, n_layers: usize) -> Vec<usize> {
        (0..n_layers)
            .filter(|l| (l + 1) % self.layer_stride == 0)
            .collect()
    }
}

/// `(1−σ)·causal + σ·all-ones`: ones on and below the diagonal, `σ` above.
pub fn sofa_mask(sigma: f64, s: usize) -> Array2<f64> {
    Array2::from_shape_fn((s, s), |(r, c)| if c <= r { 1.0 } else { sigma })
}

/// Prefill where each scheduled layer mixes causal and bidirectional
/// attention: `(1−σ)·softmax_causal + σ·softmax_full`.
pub fn sofa_forward(
    seq: &TokenizedSequence,
    params: &ModelParams,
    config: &SofaConfig,
) -> Result<ForwardTrace> {
    config.validate()?;
    let mask = SoftMask {
        sigma: config.sigma,
        layers: config.layers(params.dims.n_layers),
    };
    if seq.dim() != params.dims.model_dim {
        return Err(CamaError::DimsMismatch(format!(
            "sequence dim {} vs model dim {}",
            seq.dim(),
            params.dims.model_dim
        )));
    }
    forward_embeddings(&seq.embeddings, params, None, Some(&mask), None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SofaRun {
    pub sigma: f64,
    pub layer_stride: usize,
    /// 1-based.
    pub layers: Vec<usize>,
    pub logits: Vec<f64>,
    pub token: u32,
}

pub fn run_sofa(
    seq: &TokenizedSequence,
    params: &ModelParams,
    config: &SofaConfig,
) -> Result<(SofaRun, ForwardTrace)> {
    let trace = sofa_forward(seq, params, config)?;
    let logits = trace.next_token_logits();
    let run = SofaRun {
        sigma: config.sigma,
        layer_stride: config.layer_stride,
        layers: config
            .layers(params.dims.n_layers)
            .into_iter()
            .map(|l| l + 1)
            .collect(),
        token: argmax(&logits) as u32,
        logits,
    };
    Ok((run, trace))
}
