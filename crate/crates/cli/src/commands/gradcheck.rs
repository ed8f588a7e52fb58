use cama_core::decoder::{attention_grads, finite_difference, init_params, LossSpec};
use cama_core::sequence::generate_synthetic;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

/// Largest sequence the check accepts; finite differences rerun the model
/// twice per sample.
pub const MAX_SEQ_LEN: usize = 96;

#[derive(Debug, Clone, Serialize)]
pub struct SampleError {
    /// 1-based.
    pub layer: usize,
    pub head: usize,
    pub row: usize,
    pub column: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub seq_len: usize,
    pub samples: usize,
    pub threshold: f64,
    pub max_rel_error: f64,
    pub passed: bool,
    /// Worst sample per layer; layers never sampled are absent.
    pub per_layer: Vec<SampleError>,
}

/// Compares analytic attention gradients with central differences at
/// randomly sampled causal entries.
pub fn cmd_gradcheck(
    config: &RunConfig,
    threshold: Option<f64>,
) -> Result<GradcheckReport, CliError> {
    let gc = &config.gradcheck;
    let threshold = threshold.unwrap_or(gc.threshold);
    if !(threshold.is_finite() && threshold > 0.0) {
        return Err(CliError::Usage(format!(
            "threshold must be positive, got {threshold}"
        )));
    }
    if gc.samples < 100 {
        return Err(CliError::Usage(format!(
            "gradcheck.samples is {}, at least 100 are required",
            gc.samples
        )));
    }
    let dims = gc.model.dims();
    if gc.task.embed_dim != dims.model_dim {
        return Err(CliError::Usage(
            "gradcheck task and model dims differ".into(),
        ));
    }
    let seq = generate_synthetic(&gc.task)?;
    if seq.len() > MAX_SEQ_LEN {
        return Err(CliError::Usage(format!(
            "gradcheck sequence has {} tokens, limit is {MAX_SEQ_LEN}",
            seq.len()
        )));
    }
    let params = init_params(dims, gc.model.seed)?;
    let loss = LossSpec::icd_answers(&seq)?;
    let grads = attention_grads(&seq.embeddings, &params, None, &loss)?;
    let last_row = loss.predicting_rows().into_iter().max().unwrap_or(0);

    let mut rng = ChaCha8Rng::seed_from_u64(gc.task.seed);
    let mut worst: Vec<Option<SampleError>> = vec![None; dims.n_layers];
    for _ in 0..gc.samples {
        let layer = rng.random_range(0..dims.n_layers);
        let head = rng.random_range(0..dims.n_heads);
        let row = rng.random_range(0..=last_row);
        let column = rng.random_range(0..=row);
        let analytic = grads.grads[layer][[head, row, column]];
        let numeric = finite_difference(
            &seq.embeddings,
            &params,
            None,
            &loss,
            layer,
            head,
            row,
            column,
            gc.step,
        )?;
        let rel_error = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        if worst[layer]
            .as_ref()
            .is_none_or(|w| rel_error > w.rel_error)
        {
            worst[layer] = Some(SampleError {
                layer: layer + 1,
                head,
                row,
                column,
                analytic,
                numeric,
                rel_error,
            });
        }
    }
    let per_layer: Vec<SampleError> = worst.into_iter().flatten().collect();
    let max_rel_error = per_layer.iter().map(|s| s.rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        seq_len: seq.len(),
        samples: gc.samples,
        threshold,
        max_rel_error,
        passed: max_rel_error < threshold,
        per_layer,
    })
}
