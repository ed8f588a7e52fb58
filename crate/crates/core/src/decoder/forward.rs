//! Pre-norm causal decoder forward pass with an attention-bias hook.
//!
//! Arithmetic runs in f64. The [`ForwardTrace`] keeps an f32 record of
//! every layer's logits, attention weights and hidden states; everything
//! downstream (scoring, head selection, diagnostics) reads that record, so
//! an exported trace reproduces those computations exactly.

use std::cell::Cell;
use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Array3, Axis};

use super::params::{ModelDims, ModelParams};
use super::plan::{BiasEntry, BiasPlan};
use crate::error::{CamaError, Result};
use crate::sequence::TokenizedSequence;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

thread_local! {
    static PASSES: Cell<u64> = const { Cell::new(0) };
}

/// Number of forward passes started on the calling thread.
pub fn forward_pass_count() -> u64 {
    PASSES.with(Cell::get)
}

/// Callback invoked while a forward pass is in flight.
///
/// `bias_for_layer` sees the unbiased logits of a layer before softmax and
/// may return extra entries for that same layer.
pub trait LayerHook {
    fn wants_logits(&self, _layer: usize) -> bool {
        false
    }

    fn bias_for_layer(
        &mut self,
        _layer: usize,
        _raw_logits: &Array3<f32>,
    ) -> Result<Vec<BiasEntry>> {
        Ok(Vec::new())
    }

    fn wants_hidden(&self, _layer: usize) -> bool {
        false
    }

    fn after_layer(&mut self, _layer: usize, _hidden: &Array2<f32>) -> Result<()> {
        Ok(())
    }
}

/// Interpolates causal and bidirectional attention on selected layers:
/// `(1 − σ)·softmax_causal + σ·softmax_bidirectional`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    pub sigma: f64,
    /// 0-based layers the interpolation applies to.
    pub layers: Vec<usize>,
}

/// Adds `delta` to one post-softmax attention entry, leaving the row
/// unnormalized. Used for finite-difference checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionPerturbation {
    pub layer: usize,
    pub head: usize,
    pub row: usize,
    pub column: usize,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    pub plan: Option<&'a BiasPlan>,
    pub soft_mask: Option<&'a SoftMask>,
    pub perturbation: Option<AttentionPerturbation>,
    pub record: bool,
    pub keep_cache: bool,
}

/// Per-layer record of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub dims: ModelDims,
    pub seq_len: usize,
    /// `[H, S, S]` logits after bias, strictly-future entries stored as 0.
    pub logits: Vec<Array3<f32>>,
    /// `[H, S, S]` post-softmax attention weights.
    pub weights: Vec<Array3<f32>>,
    /// `S × D` residual stream after each layer.
    pub hidden: Vec<Array2<f32>>,
    /// Unbiased logits of every layer that received a bias.
    pub pre_bias: BTreeMap<usize, Array3<f32>>,
    pub applied_plan: BiasPlan,
    /// `S × V` output logits (not part of the exported format).
    pub output_logits: Array2<f64>,
}

impl ForwardTrace {
    /// Unbiased logits of `layer`.
    pub fn raw_logits(&self, layer: usize) -> &Array3<f32> {
        self.pre_bias.get(&layer).unwrap_or(&self.logits[layer])
    }

    /// Output logits of the last row: the next-token distribution.
    pub fn next_token_logits(&self) -> Vec<f64> {
        self.output_logits.row(self.seq_len - 1).to_vec()
    }
}

pub(crate) struct LayerCache {
    pub xhat1: Array2<f64>,
    pub rstd1: Array1<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub attn: Vec<Array2<f64>>,
    pub xhat2: Array2<f64>,
    pub rstd2: Array1<f64>,
    pub u: Array2<f64>,
}

pub(crate) struct ForwardCache {
    pub layers: Vec<LayerCache>,
    pub xhat_f: Array2<f64>,
    pub rstd_f: Array1<f64>,
}

pub(crate) struct ForwardPass {
    pub trace: Option<ForwardTrace>,
    pub output_logits: Array2<f64>,
    pub cache: Option<ForwardCache>,
}

pub(crate) fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

pub(crate) fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

/// Returns `(y, xhat, rstd)`.
pub(crate) fn layer_norm(
    x: &Array2<f64>,
    gain: &Array1<f64>,
    bias: &Array1<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.axis_iter_mut(Axis(0)).zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        let scale = *r;
        row.mapv_inplace(|v| v * scale);
    }
    let y = &xhat * gain + bias;
    (y, xhat, rstd)
}

/// Fixed sinusoidal position code.
pub(crate) fn positional(len: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, dim), |(pos, i)| {
        let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
        let angle = pos as f64 * freq;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

fn causal_softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let n = scores.nrows();
    let mut out = Array2::zeros((n, n));
    for r in 0..n {
        let row = scores.row(r);
        let max = (0..=r).map(|c| row[c]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..=r {
            let e = (row[c] - max).exp();
            out[[r, c]] = e;
            sum += e;
        }
        for c in 0..=r {
            out[[r, c]] /= sum;
        }
    }
    out
}

fn full_softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn lower_f32(m: &Array2<f64>, out: &mut Array3<f32>, head: usize) {
    let n = m.nrows();
    for r in 0..n {
        for c in 0..=r {
            out[[head, r, c]] = m[[r, c]] as f32;
        }
    }
}

fn apply_bias(scores: &mut [Array2<f64>], entries: &[BiasEntry]) {
    let s = scores.first().map_or(0, |m| m.nrows());
    for e in entries {
        for (h, m) in scores.iter_mut().enumerate() {
            if e.head.covers(h) {
                for r in e.row_from..s {
                    m[[r, e.column]] += e.value;
                }
            }
        }
    }
}

pub(crate) fn run_forward(
    embeddings: &Array2<f32>,
    params: &ModelParams,
    opts: ForwardOptions<'_>,
    mut hook: Option<&mut dyn LayerHook>,
) -> Result<ForwardPass> {
    PASSES.with(|p| p.set(p.get() + 1));
    let dims = params.dims;
    let (s, d) = embeddings.dim();
    if d != dims.model_dim {
        return Err(CamaError::DimsMismatch(format!(
            "embedding dim {d} vs model dim {}",
            dims.model_dim
        )));
    }
    if let Some(plan) = opts.plan {
        plan.check(dims.n_layers, dims.n_heads, s)?;
    }
    let (nh, dk) = (dims.n_heads, dims.head_dim);
    let scale = 1.0 / (dk as f64).sqrt();

    let mut x = embeddings.mapv(f64::from) + positional(s, d);
    let mut applied = BiasPlan::new();
    let mut logits_rec = Vec::new();
    let mut weights_rec = Vec::new();
    let mut hidden_rec = Vec::new();
    let mut pre_bias = BTreeMap::new();
    let mut caches = Vec::new();

    for (l, lp) in params.layers.iter().enumerate() {
        let (h, xhat1, rstd1) = layer_norm(&x, &lp.ln1_gain, &lp.ln1_bias);
        let q = h.dot(&lp.wq);
        let k = h.dot(&lp.wk);
        let v = h.dot(&lp.wv);

        let mut scores: Vec<Array2<f64>> = (0..nh)
            .map(|hd| {
                let cols = s![.., hd * dk..(hd + 1) * dk];
                q.slice(cols).dot(&k.slice(cols).t()) * scale
            })
            .collect();

        let mut entries: Vec<BiasEntry> = opts
            .plan
            .map(|p| p.for_layer(l).collect())
            .unwrap_or_default();
        let hook_wants = hook.as_ref().is_some_and(|hk| hk.wants_logits(l));
        let raw = if hook_wants || (opts.record && !entries.is_empty()) {
            let mut raw = Array3::<f32>::zeros((nh, s, s));
            for (hd, m) in scores.iter().enumerate() {
                lower_f32(m, &mut raw, hd);
            }
            Some(raw)
        } else {
            None
        };
        if hook_wants {
            let hk = hook.as_mut().expect("hook present");
            let extra = hk.bias_for_layer(l, raw.as_ref().expect("raw logits built"))?;
            for e in &extra {
                if e.layer != l {
                    return Err(CamaError::InvalidBias(format!(
                        "hook returned entry for layer {} while at layer {}",
                        e.layer + 1,
                        l + 1
                    )));
                }
            }
            entries.extend(extra);
        }
        if !entries.is_empty() {
            let mut layer_plan = BiasPlan::new();
            layer_plan.extend(entries.iter().copied())?;
            layer_plan.check(dims.n_layers, nh, s)?;
            let merged: Vec<BiasEntry> = layer_plan.entries().collect();
            apply_bias(&mut scores, &merged);
            applied.extend(merged)?;
            if opts.record {
                pre_bias.insert(l, raw.expect("raw logits built"));
            }
        }

        let soft = opts
            .soft_mask
            .filter(|m| m.layers.contains(&l))
            .map(|m| m.sigma);
        let mut attn: Vec<Array2<f64>> = scores
            .iter()
            .map(|m| match soft {
                Some(sigma) => {
                    let causal = causal_softmax_rows(m);
                    let bidir = full_softmax_rows(m);
                    causal * (1.0 - sigma) + bidir * sigma
                }
                None => causal_softmax_rows(m),
            })
            .collect();
        if let Some(p) = opts.perturbation.filter(|p| p.layer == l) {
            attn[p.head][[p.row, p.column]] += p.delta;
        }

        let mut o = Array2::<f64>::zeros((s, d));
        for (hd, a) in attn.iter().enumerate() {
            let cols = s![.., hd * dk..(hd + 1) * dk];
            o.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
        }
        x = x + o.dot(&lp.wo);

        let (h2, xhat2, rstd2) = layer_norm(&x, &lp.ln2_gain, &lp.ln2_bias);
        let u = h2.dot(&lp.w1) + &lp.b1;
        let g = u.mapv(gelu);
        x = x + g.dot(&lp.w2) + &lp.b2;

        if x.iter().any(|v| !v.is_finite()) {
            return Err(CamaError::NumericBlowUp(l + 1));
        }

        let hook_hidden = hook.as_ref().is_some_and(|hk| hk.wants_hidden(l));
        if opts.record || hook_hidden {
            let hidden = x.mapv(|v| v as f32);
            if hook_hidden {
                hook.as_mut()
                    .expect("hook present")
                    .after_layer(l, &hidden)?;
            }
            if opts.record {
                hidden_rec.push(hidden);
            }
        }
        if opts.record {
            let mut lg = Array3::<f32>::zeros((nh, s, s));
            let mut wt = Array3::<f32>::zeros((nh, s, s));
            for hd in 0..nh {
                lower_f32(&scores[hd], &mut lg, hd);
                match soft {
                    // bidirectional mass lives above the diagonal too
                    Some(_) => wt
                        .slice_mut(s![hd, .., ..])
                        .assign(&attn[hd].mapv(|v| v as f32)),
                    None => lower_f32(&attn[hd], &mut wt, hd),
                }
            }
            logits_rec.push(lg);
            weights_rec.push(wt);
        }
        if opts.keep_cache {
            caches.push(LayerCache {
                xhat1,
                rstd1,
                q,
                k,
                v,
                attn,
                xhat2,
                rstd2,
                u,
            });
        }
    }

    let (z, xhat_f, rstd_f) = layer_norm(&x, &params.lnf_gain, &params.lnf_bias);
    let output_logits = z.dot(&params.unembed);

    let trace = opts.record.then(|| ForwardTrace {
        dims,
        seq_len: s,
        logits: logits_rec,
        weights: weights_rec,
        hidden: hidden_rec,
        pre_bias,
        applied_plan: applied,
        output_logits: output_logits.clone(),
    });
    let cache = opts.keep_cache.then_some(ForwardCache {
        layers: caches,
        xhat_f,
        rstd_f,
    });
    Ok(ForwardPass {
        trace,
        output_logits,
        cache,
    })
}

fn check_seq(seq: &TokenizedSequence, params: &ModelParams) -> Result<()> {
    if seq.dim() != params.dims.model_dim {
        return Err(CamaError::DimsMismatch(format!(
            "sequence dim {} vs model dim {}",
            seq.dim(),
            params.dims.model_dim
        )));
    }
    Ok(())
}

/// Forward pass over an embedding matrix, recording a trace.
pub fn forward_embeddings(
    embeddings: &Array2<f32>,
    params: &ModelParams,
    plan: Option<&BiasPlan>,
    soft_mask: Option<&SoftMask>,
    hook: Option<&mut dyn LayerHook>,
) -> Result<ForwardTrace> {
    let pass = run_forward(
        embeddings,
        params,
        ForwardOptions {
            plan,
            soft_mask,
            record: true,
            ..ForwardOptions::default()
        },
        hook,
    )?;
    Ok(pass.trace.expect("recording requested"))
}

/// Runs the prompt through the decoder, recording every layer.
pub fn prefill(
    seq: &TokenizedSequence,
    params: &ModelParams,
    plan: Option<&BiasPlan>,
) -> Result<ForwardTrace> {
    check_seq(seq, params)?;
    forward_embeddings(&seq.embeddings, params, plan, None, None)
}

/// [`prefill`] with a hook that can add biases while the pass runs.
pub fn prefill_with_hook(
    seq: &TokenizedSequence,
    params: &ModelParams,
    plan: Option<&BiasPlan>,
    hook: &mut dyn LayerHook,
) -> Result<ForwardTrace> {
    check_seq(seq, params)?;
    forward_embeddings(&seq.embeddings, params, plan, None, Some(hook))
}

/// Full-precision attention of one layer: unbiased logits and the weights
/// actually used, per head.
#[derive(Debug, Clone)]
pub struct ExactAttention {
    pub raw_logits: Vec<Array2<f64>>,
    pub weights: Vec<Array2<f64>>,
}

/// Forward pass that returns every layer's attention in f64 instead of the
/// f32 trace record.
pub fn exact_attention(
    embeddings: &Array2<f32>,
    params: &ModelParams,
    plan: Option<&BiasPlan>,
) -> Result<Vec<ExactAttention>> {
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
    let (nh, dk) = (params.dims.n_heads, params.dims.head_dim);
    let scale = 1.0 / (dk as f64).sqrt();
    let cache = pass.cache.expect("cache requested");
    Ok(cache
        .layers
        .into_iter()
        .map(|lc| {
            let raw_logits = (0..nh)
                .map(|hd| {
                    let cols = s![.., hd * dk..(hd + 1) * dk];
                    lc.q.slice(cols).dot(&lc.k.slice(cols).t()) * scale
                })
                .collect();
            ExactAttention {
                raw_logits,
                weights: lc.attn,
            }
        })
        .collect())
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct Decoded {
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
    /// Prompt embeddings followed by one row per generated token.
    pub embeddings: Array2<f32>,
    /// Trace over all `prompt_len + steps` rows.
    pub trace: ForwardTrace,
}

impl Decoded {
    /// Rows whose output emitted a generated token.
    pub fn answer_rows(&self) -> Vec<usize> {
        (self.prompt_len - 1..self.prompt_len - 1 + self.tokens.len()).collect()
    }
}

/// Greedy autoregressive decoding. Plan entries are column-keyed, so they
/// keep applying to every generated row.
pub fn decode_greedy(
    seq: &TokenizedSequence,
    params: &ModelParams,
    plan: Option<&BiasPlan>,
    steps: usize,
) -> Result<Decoded> {
    if steps == 0 {
        return Err(CamaError::ZeroSteps);
    }
    check_seq(seq, params)?;
    let prompt_len = seq.len();
    let d = seq.dim();
    let mut emb = seq.embeddings.clone();
    let mut tokens = Vec::with_capacity(steps);
    for _ in 0..steps {
        let pass = run_forward(
            &emb,
            params,
            ForwardOptions {
                plan,
                ..ForwardOptions::default()
            },
            None,
        )?;
        let last = pass.output_logits.row(emb.nrows() - 1).to_vec();
        let token = argmax(&last);
        tokens.push(token as u32);
        let row = params.token_embed.row(token).mapv(|v| v as f32);
        emb.push_row(row.view())
            .expect("row width matches model dim");
        debug_assert_eq!(emb.ncols(), d);
    }
    let trace = forward_embeddings(&emb, params, plan, None, None)?;
    Ok(Decoded {
        tokens,
        prompt_len,
        embeddings: emb,
        trace,
    })
}
