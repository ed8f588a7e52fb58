//! Reverse-mode gradient of a teacher-forced loss with respect to every
//! post-softmax attention matrix.

use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use super::forward::{gelu_grad, run_forward, AttentionPerturbation, ForwardOptions};
use super::params::ModelParams;
use super::plan::BiasPlan;
use crate::error::{CamaError, Result};
use crate::sequence::TokenizedSequence;

/// Cross-entropy targets: the token at `target_positions[k]` should be
/// `target_ids[k]`, predicted from the row before it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSpec {
    pub target_positions: Vec<usize>,
    pub target_ids: Vec<u32>,
}

impl LossSpec {
    /// Teacher-forced targets over every demonstration answer token.
    pub fn icd_answers(seq: &TokenizedSequence) -> Result<LossSpec> {
        let gt = seq
            .ground_truth
            .as_ref()
            .ok_or(CamaError::MissingGroundTruth)?;
        let mut spec = LossSpec {
            target_positions: Vec::new(),
            target_ids: Vec::new(),
        };
        for (e, ids) in seq.layout.icds().iter().zip(&gt.answer_token_ids) {
            for (t, id) in e.answer.indices().zip(ids) {
                spec.target_positions.push(t);
                spec.target_ids.push(*id);
            }
        }
        Ok(spec)
    }

    /// Targets for tokens generated after a prompt of `prompt_len` rows.
    pub fn generated(prompt_len: usize, tokens: &[u32]) -> LossSpec {
        LossSpec {
            target_positions: (prompt_len..prompt_len + tokens.len()).collect(),
            target_ids: tokens.to_vec(),
        }
    }

    /// Rows whose outputs are scored.
    pub fn predicting_rows(&self) -> Vec<usize> {
        self.target_positions.iter().map(|t| t - 1).collect()
    }

    pub fn validate(&self, seq_len: usize, vocab: usize) -> Result<()> {
        if self.target_positions.len() != self.target_ids.len() || self.target_ids.is_empty() {
            return Err(CamaError::TargetOutOfRange(
                "positions and ids must be non-empty and of equal length".into(),
            ));
        }
        for (&t, &id) in self.target_positions.iter().zip(&self.target_ids) {
            if t == 0 || t >= seq_len {
                return Err(CamaError::TargetOutOfRange(format!(
                    "position {t} outside 1..{seq_len}"
                )));
            }
            if id as usize >= vocab {
                return Err(CamaError::TargetOutOfRange(format!(
                    "token id {id} ≥ {vocab}"
                )));
            }
        }
        Ok(())
    }
}

/// Mean cross-entropy and its gradient with respect to the output logits.
fn loss_and_grad(logits: &Array2<f64>, loss: &LossSpec) -> (f64, Array2<f64>) {
    let mut grad = Array2::zeros(logits.dim());
    let scale = 1.0 / loss.target_ids.len() as f64;
    let mut total = 0.0;
    for (&t, &id) in loss.target_positions.iter().zip(&loss.target_ids) {
        let row = logits.row(t - 1);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + z.ln();
        total += log_z - row[id as usize];
        for (c, v) in row.iter().enumerate() {
            grad[[t - 1, c]] += scale * (v - log_z).exp();
        }
        grad[[t - 1, id as usize]] -= scale;
    }
    (total * scale, grad)
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    xhat: &Array2<f64>,
    rstd: &ndarray::Array1<f64>,
    gain: &ndarray::Array1<f64>,
) -> Array2<f64> {
    let d = xhat.ncols() as f64;
    let dxhat = dy * gain;
    let mut dx = Array2::zeros(dy.dim());
    for r in 0..dy.nrows() {
        let g = dxhat.row(r);
        let xh = xhat.row(r);
        let mean_g = g.sum() / d;
        let mean_gx = g.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
        for c in 0..dy.ncols() {
            dx[[r, c]] = rstd[r] * (g[c] - mean_g - xh[c] * mean_gx);
        }
    }
    dx
}

/// `∂L/∂A` for every layer, `[H, S, S]`, strictly-future entries zero.
#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub loss: f64,
    pub grads: Vec<Array3<f64>>,
}

pub fn attention_grads(
    embeddings: &Array2<f32>,
    params: &ModelParams,
    plan: Option<&BiasPlan>,
    loss: &LossSpec,
) -> Result<AttentionGrads> {
    let dims = params.dims;
    let s = embeddings.nrows();
    loss.validate(s, dims.vocab_size)?;
    let pass = run_forward(
        embeddings,
        params,
        ForwardOptions {
            plan,
            keep_cache: true,
            ..ForwardOptions::default()
        },
        None,
    )?;
    let cache = pass.cache.expect("cache requested");
    let (value, dlogits) = loss_and_grad(&pass.output_logits, loss);

    let (nh, dk) = (dims.n_heads, dims.head_dim);
    let scale = 1.0 / (dk as f64).sqrt();

    let dz = dlogits.dot(&params.unembed.t());
    let mut dx = layer_norm_backward(&dz, &cache.xhat_f, &cache.rstd_f, &params.lnf_gain);
    let mut grads = vec![Array3::<f64>::zeros((nh, s, s)); dims.n_layers];

    for l in (0..dims.n_layers).rev() {
        let lp = &params.layers[l];
        let c = &cache.layers[l];

        // feed-forward block
        let dg = dx.dot(&lp.w2.t());
        let du = dg * c.u.mapv(gelu_grad);
        let dh2 = du.dot(&lp.w1.t());
        dx = dx + layer_norm_backward(&dh2, &c.xhat2, &c.rstd2, &lp.ln2_gain);

        // attention block
        let d_o = dx.dot(&lp.wo.t());
        let mut dq = Array2::<f64>::zeros((s, dims.model_dim));
        let mut dk_ = Array2::<f64>::zeros((s, dims.model_dim));
        let mut dv = Array2::<f64>::zeros((s, dims.model_dim));
        for hd in 0..nh {
            let cols = s![.., hd * dk..(hd + 1) * dk];
            let a = &c.attn[hd];
            let doh = d_o.slice(cols);
            let mut da = doh.dot(&c.v.slice(cols).t());
            for r in 0..s {
                for col in r + 1..s {
                    da[[r, col]] = 0.0;
                }
            }
            dv.slice_mut(cols).assign(&a.t().dot(&doh));
            // softmax backward over the causal support
            let mut dscore = &da * a;
            for (r, mut row) in dscore.axis_iter_mut(Axis(0)).enumerate() {
                let dot: f64 = row.sum();
                for col in 0..=r {
                    row[col] -= a[[r, col]] * dot;
                }
            }
            dscore *= scale;
            dq.slice_mut(cols).assign(&dscore.dot(&c.k.slice(cols)));
            dk_.slice_mut(cols)
                .assign(&dscore.t().dot(&c.q.slice(cols)));
            grads[l].slice_mut(s![hd, .., ..]).assign(&da);
        }
        let dh = dq.dot(&lp.wq.t()) + dk_.dot(&lp.wk.t()) + dv.dot(&lp.wv.t());
        dx = dx + layer_norm_backward(&dh, &c.xhat1, &c.rstd1, &lp.ln1_gain);
    }

    Ok(AttentionGrads { loss: value, grads })
}

/// Loss of a forward pass with one attention entry shifted by `delta`.
pub fn perturbed_loss(
    embeddings: &Array2<f32>,
    params: &ModelParams,
    plan: Option<&BiasPlan>,
    loss: &LossSpec,
    perturbation: Option<AttentionPerturbation>,
) -> Result<f64> {
    loss.validate(embeddings.nrows(), params.dims.vocab_size)?;
    let pass = run_forward(
        embeddings,
        params,
        ForwardOptions {
            plan,
            perturbation,
            ..ForwardOptions::default()
        },
        None,
    )?;
    Ok(loss_and_grad(&pass.output_logits, loss).0)
}

/// Central finite difference of the loss in one attention entry.
#[allow(clippy::too_many_arguments)]
pub fn finite_difference(
    embeddings: &Array2<f32>,
    params: &ModelParams,
    plan: Option<&BiasPlan>,
    loss: &LossSpec,
    layer: usize,
    head: usize,
    row: usize,
    column: usize,
    step: f64,
) -> Result<f64> {
    let at = |delta: f64| {
        perturbed_loss(
            embeddings,
            params,
            plan,
            loss,
            Some(AttentionPerturbation {
                layer,
                head,
                row,
                column,
                delta,
            }),
        )
    };
    Ok((at(step)? - at(-step)?) / (2.0 * step))
}
