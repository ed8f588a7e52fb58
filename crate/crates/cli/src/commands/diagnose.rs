use std::fs;
use std::path::{Path, PathBuf};

use cama_core::decoder::{attention_grads, decode_greedy, BiasPlan, LossSpec, ModelParams};
use cama_core::diagnostics::{diagnose, export_heatmap, DiagnosticsReport};
use cama_core::sequence::{perturb_key_position, read_sequence};
use cama_core::{run_cama, CamaError, TokenizedSequence};
use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{io_err, CliError};
use crate::output::{in_pool, write_json, SequenceInput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Which {
    Align,
    Contrib,
    Both,
}

impl Which {
    fn align(self) -> bool {
        matches!(self, Which::Align | Which::Both)
    }

    fn contrib(self) -> bool {
        matches!(self, Which::Contrib | Which::Both)
    }
}

/// Header of `align.csv`.
pub const ALIGN_COLUMNS: [&str; 5] = ["sequence", "layer", "element", "clean", "cama"];
/// Header of `contrib.csv`.
pub const CONTRIB_COLUMNS: [&str; 5] = ["sequence", "layer", "position", "clean", "cama"];

/// Key demonstration positions used by the contribution protocol.
pub const CONTRIB_POSITIONS: [usize; 3] = [1, 2, 3];

#[derive(Debug, Clone, Serialize)]
pub struct AlignRow {
    pub layer: usize,
    pub element: usize,
    pub clean: f64,
    pub cama: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ContribRow {
    pub layer: usize,
    pub position: usize,
    pub clean: f64,
    pub cama: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SequenceDiagnostics {
    pub sequence: String,
    pub align: Vec<AlignRow>,
    pub contrib: Vec<ContribRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DiagnoseSummary {
    pub sequences: Vec<SequenceDiagnostics>,
    pub align_csv: Option<PathBuf>,
    pub contrib_csv: Option<PathBuf>,
}

fn cama_plan(
    seq: &TokenizedSequence,
    params: &ModelParams,
    config: &RunConfig,
) -> Result<BiasPlan, CliError> {
    Ok(run_cama(seq, params, &config.cama)?.plan)
}

fn decode_and_diagnose(
    seq: &TokenizedSequence,
    params: &ModelParams,
    plan: Option<&BiasPlan>,
    steps: usize,
    with_grads: bool,
) -> Result<DiagnosticsReport, CliError> {
    let gt = seq
        .ground_truth
        .as_ref()
        .ok_or(CamaError::MissingGroundTruth)?;
    let decoded = decode_greedy(seq, params, plan, steps)?;
    let rows = decoded.answer_rows();
    let grads = if with_grads {
        let loss = LossSpec::generated(decoded.prompt_len, &decoded.tokens);
        Some(attention_grads(&decoded.embeddings, params, plan, &loss)?)
    } else {
        None
    };
    Ok(diagnose(
        &decoded.trace,
        &seq.layout,
        Some(&gt.key_region_masks),
        grads.as_ref(),
        &rows,
    )?)
}

/// Layers × image tokens heat of one element.
fn heat_matrix(report: &DiagnosticsReport, element: usize) -> Array2<f64> {
    let width = report.layers[0].heat[element].len();
    Array2::from_shape_fn((report.layers.len(), width), |(l, j)| {
        report.layers[l].heat[element][j]
    })
}

fn diagnose_one(
    config: &RunConfig,
    params: &ModelParams,
    input: &SequenceInput,
    out: &Path,
    which: Which,
    heatmaps: bool,
) -> Result<SequenceDiagnostics, CliError> {
    let seq = read_sequence(&input.path)?;
    let gt = seq
        .ground_truth
        .clone()
        .ok_or(CamaError::MissingGroundTruth)?;
    let steps = config.decode.steps;
    let dir = out.join(&input.name);
    let mut align = Vec::new();
    let mut contrib = Vec::new();

    if which.align() {
        let plan = cama_plan(&seq, params, config)?;
        let clean = decode_and_diagnose(&seq, params, None, steps, false)?;
        let cama = decode_and_diagnose(&seq, params, Some(&plan), steps, false)?;
        for (c, m) in clean.layers.iter().zip(&cama.layers) {
            for (i, (a, b)) in c.align.iter().zip(&m.align).enumerate() {
                if let (Some(a), Some(b)) = (a, b) {
                    align.push(AlignRow {
                        layer: c.layer,
                        element: i + 1,
                        clean: *a,
                        cama: *b,
                    });
                }
            }
        }
        if heatmaps {
            fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
            for (tag, report) in [("clean", &clean), ("cama", &cama)] {
                for i in 0..seq.layout.elements.len() {
                    let path = dir.join(format!("heat_{tag}_e{}.pgm", i + 1));
                    export_heatmap(heat_matrix(report, i).view(), &path)?;
                }
            }
        }
    }

    if which.contrib() {
        let positions: Vec<usize> = CONTRIB_POSITIONS
            .into_iter()
            .filter(|&p| p <= seq.layout.n_shots)
            .collect();
        let mut per_position = Vec::new();
        for &p in &positions {
            let distractor_seed = gt.task.seed.wrapping_mul(1_000_003).wrapping_add(p as u64);
            let variant = perturb_key_position(&seq, p, distractor_seed)?;
            let plan = cama_plan(&variant, params, config)?;
            let clean = decode_and_diagnose(&variant, params, None, steps, true)?;
            let cama = decode_and_diagnose(&variant, params, Some(&plan), steps, true)?;
            per_position.push((p, clean, cama));
        }
        let n_layers = params.dims.n_layers;
        for l in 0..n_layers {
            for (p, clean, cama) in &per_position {
                contrib.push(ContribRow {
                    layer: l + 1,
                    position: *p,
                    clean: clean.layers[l].contrib[p - 1],
                    cama: cama.layers[l].contrib[p - 1],
                });
            }
        }
    }

    let result = SequenceDiagnostics {
        sequence: input.name.clone(),
        align,
        contrib,
    };
    write_json(&dir.join("diagnostics.json"), &result)?;
    Ok(result)
}

fn write_csv<const N: usize>(
    path: &Path,
    header: [&str; N],
    rows: impl Iterator<Item = [String; N]>,
) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let fail = |e: csv::Error| CliError::Data(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(fail)?;
    for row in rows {
        w.write_record(&row).map_err(fail)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Per-layer alignment and contribution tables, clean and modulated side by
/// side. Writes `<out>/<name>/diagnostics.json` per input plus `align.csv`
/// and `contrib.csv` under `out`.
pub fn cmd_diagnose(
    config: &RunConfig,
    inputs: &[SequenceInput],
    out: &Path,
    which: Which,
    jobs: usize,
    heatmaps: bool,
) -> Result<DiagnoseSummary, CliError> {
    config.validate()?;
    if inputs.is_empty() {
        return Err(CliError::Usage("no input sequences".into()));
    }
    let params = config.params()?;
    let results: Vec<Result<SequenceDiagnostics, CliError>> = in_pool(jobs, || {
        inputs
            .par_iter()
            .map(|input| diagnose_one(config, &params, input, out, which, heatmaps))
            .collect()
    })?;
    let sequences = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;

    let align_csv = if which.align() {
        let path = out.join("align.csv");
        write_csv(
            &path,
            ALIGN_COLUMNS,
            sequences.iter().flat_map(|s| {
                s.align.iter().map(|r| {
                    [
                        s.sequence.clone(),
                        r.layer.to_string(),
                        r.element.to_string(),
                        r.clean.to_string(),
                        r.cama.to_string(),
                    ]
                })
            }),
        )?;
        Some(path)
    } else {
        None
    };
    let contrib_csv = if which.contrib() {
        let path = out.join("contrib.csv");
        write_csv(
            &path,
            CONTRIB_COLUMNS,
            sequences.iter().flat_map(|s| {
                s.contrib.iter().map(|r| {
                    [
                        s.sequence.clone(),
                        r.layer.to_string(),
                        r.position.to_string(),
                        r.clean.to_string(),
                        r.cama.to_string(),
                    ]
                })
            }),
        )?;
        Some(path)
    } else {
        None
    };
    Ok(DiagnoseSummary {
        sequences,
        align_csv,
        contrib_csv,
    })
}
