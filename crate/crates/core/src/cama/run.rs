use ndarray::{Array2, Array3};
use serde::Serialize;

use super::config::{CamaConfig, PrefillMode};
use super::stage1::{
    element_gains, key_token_report, stage1_bias, stage1_entries_for_layer, ElementKeyReport,
    KeyTokenReport, LayerGains,
};
use super::stage2::{
    head_flow, joint_representation, query_weights, select_heads, stage2_entries_for_layer,
    HeadSelectionReport, LayerHeads, QueryWeightReport,
};
use crate::decoder::{
    prefill, prefill_with_hook, BiasEntry, BiasPlan, ForwardTrace, LayerHook, ModelParams,
};
use crate::error::{CamaError, Result};
use crate::numerics::IndexSet;
use crate::sequence::{SegmentLayout, TokenizedSequence};

#[derive(Debug, Clone)]
pub struct CamaRunResult {
    pub config: CamaConfig,
    pub key_report: KeyTokenReport,
    pub head_report: HeadSelectionReport,
    pub weight_report: QueryWeightReport,
    /// Every entry applied during the modulated pass.
    pub plan: BiasPlan,
    /// Unmodulated prefill; only the two-pass mode runs one.
    pub trace_clean: Option<ForwardTrace>,
    pub trace_modulated: ForwardTrace,
}

/// Serializable view of a run, without the traces.
#[derive(Debug, Serialize)]
pub struct CamaReport<'a> {
    pub config: &'a CamaConfig,
    pub key_report: &'a KeyTokenReport,
    pub head_report: &'a HeadSelectionReport,
    pub weight_report: &'a QueryWeightReport,
    pub plan_digest: String,
    pub plan: &'a BiasPlan,
}

impl CamaRunResult {
    pub fn report(&self) -> CamaReport<'_> {
        CamaReport {
            config: &self.config,
            key_report: &self.key_report,
            head_report: &self.head_report,
            weight_report: &self.weight_report,
            plan_digest: self.plan.digest(),
            plan: &self.plan,
        }
    }
}

/// Accumulates Stage I gains layer by layer inside the modulated pass.
struct SinglePassScoring {
    gains: Vec<Vec<LayerGains>>,
    report: Option<KeyTokenReport>,
}

struct ModulationHook<'a> {
    layout: &'a SegmentLayout,
    config: &'a CamaConfig,
    stage1: Vec<usize>,
    stage2: Vec<usize>,
    scoring: Option<SinglePassScoring>,
    key_sets: Option<Vec<IndexSet>>,
    weights: Option<QueryWeightReport>,
    heads: HeadSelectionReport,
}

impl ModulationHook<'_> {
    fn score_layer(&mut self, layer: usize, raw: &Array3<f32>) -> Result<Vec<BiasEntry>> {
        let scoring = self.scoring.as_mut().expect("single-pass scoring");
        for (i, acc) in scoring.gains.iter_mut().enumerate() {
            acc.push(element_gains(
                raw,
                self.layout,
                i,
                layer,
                self.config.caption_mode,
            )?);
        }
        let elements = scoring
            .gains
            .iter()
            .enumerate()
            .map(|(i, g)| {
                ElementKeyReport::from_layers(
                    i,
                    self.layout.elements[i].image,
                    g.clone(),
                    self.config.k1_pct,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let report = KeyTokenReport { elements };
        let entries = stage1_entries_for_layer(layer, &report, self.config)?;
        self.key_sets = Some(report.key_sets());
        scoring.report = Some(report);
        Ok(entries)
    }
}

impl LayerHook for ModulationHook<'_> {
    fn wants_logits(&self, layer: usize) -> bool {
        self.stage2.contains(&layer) || (self.scoring.is_some() && self.stage1.contains(&layer))
    }

    fn bias_for_layer(&mut self, layer: usize, raw: &Array3<f32>) -> Result<Vec<BiasEntry>> {
        if self.stage1.contains(&layer) {
            return self.score_layer(layer, raw);
        }
        let (Some(weights), Some(key_sets)) = (&self.weights, &self.key_sets) else {
            return Err(CamaError::InvalidConfig(format!(
                "stage2 layer {} reached before query weights were computed",
                layer + 1
            )));
        };
        let rho = head_flow(raw, self.layout, self.config.rho_source);
        let selected = select_heads(&rho, self.config.k2_pct)?;
        let entries =
            stage2_entries_for_layer(layer, &selected, &weights.w, key_sets, self.layout)?;
        self.heads.layers.push(LayerHeads {
            layer: layer + 1,
            rho,
            selected,
        });
        Ok(entries)
    }

    fn wants_hidden(&self, layer: usize) -> bool {
        self.stage1.last() == Some(&layer)
    }

    fn after_layer(&mut self, _layer: usize, hidden: &Array2<f32>) -> Result<()> {
        let key_sets = self.key_sets.as_ref().expect("key sets precede stage1 end");
        let mut p = joint_representation(hidden, self.layout, key_sets)?;
        let p_query = p.pop().expect("query element present");
        self.weights = Some(query_weights(&p, &p_query)?);
        Ok(())
    }
}

/// Runs the full two-stage modulation over `seq`.
pub fn run_cama(
    seq: &TokenizedSequence,
    params: &ModelParams,
    config: &CamaConfig,
) -> Result<CamaRunResult> {
    config.validate(&params.dims)?;
    if config.caption_mode != seq.layout.caption_mode {
        return Err(CamaError::InvalidConfig(format!(
            "caption_mode is {} but the sequence layout says {}",
            config.caption_mode, seq.layout.caption_mode
        )));
    }
    if seq.layout.n_shots == 0 {
        return Err(CamaError::InvalidLayout("no demonstrations".into()));
    }
    seq.check()?;
    let layout = &seq.layout;
    let mut hook = ModulationHook {
        layout,
        config,
        stage1: config.stage1_zero_based(),
        stage2: config.stage2_zero_based(),
        scoring: None,
        key_sets: None,
        weights: None,
        heads: HeadSelectionReport::default(),
    };

    let (trace_clean, trace_modulated, key_report) = match config.prefill_mode {
        PrefillMode::TwoPass => {
            let trace_clean = prefill(seq, params, None)?;
            let report = key_token_report(
                hook.stage1.iter().map(|&l| (l, trace_clean.raw_logits(l))),
                layout,
                config,
            )?;
            let mut plan = BiasPlan::new();
            plan.extend(stage1_bias(&report, config)?)?;
            hook.key_sets = Some(report.key_sets());
            let trace = prefill_with_hook(seq, params, Some(&plan), &mut hook)?;
            (Some(trace_clean), trace, report)
        }
        PrefillMode::CumulativeSinglePass => {
            hook.scoring = Some(SinglePassScoring {
                gains: vec![Vec::new(); layout.elements.len()],
                report: None,
            });
            let trace = prefill_with_hook(seq, params, None, &mut hook)?;
            let report = hook
                .scoring
                .take()
                .and_then(|s| s.report)
                .expect("stage1 layers scored");
            (None, trace, report)
        }
    };
    let weight_report = hook.weights.take().expect("stage1 end reached");
    Ok(CamaRunResult {
        config: config.clone(),
        key_report,
        head_report: hook.heads,
        weight_report,
        plan: trace_modulated.applied_plan.clone(),
        trace_clean,
        trace_modulated,
    })
}
