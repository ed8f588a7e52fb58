use std::path::{Path, PathBuf};

use cama_core::baselines::{run_cd, run_sofa};
use cama_core::cama::CamaReport;
use cama_core::decoder::{decode_greedy, export_trace, ModelParams, TraceExport};
use cama_core::sequence::read_sequence;
use cama_core::{run_cama, TokenizedSequence};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::{in_pool, write_json, SequenceInput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Vanilla,
    Cama,
    Cd,
    Sofa,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Vanilla => "vanilla",
            Mode::Cama => "cama",
            Mode::Cd => "cd",
            Mode::Sofa => "sofa",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub mode: Mode,
    pub emit_traces: bool,
    pub jobs: usize,
}

#[derive(Serialize)]
struct Decoding {
    prompt_len: usize,
    tokens: Vec<u32>,
}

#[derive(Serialize)]
struct VanillaReport<'a> {
    sequence: &'a str,
    mode: Mode,
    decoding: Decoding,
    next_token_logits: Vec<f64>,
}

#[derive(Serialize)]
struct CamaRunReport<'a> {
    sequence: &'a str,
    mode: Mode,
    decoding: Decoding,
    key_set_sizes: Vec<usize>,
    cama: CamaReport<'a>,
}

#[derive(Serialize)]
struct BaselineReport<'a, T> {
    sequence: &'a str,
    mode: Mode,
    #[serde(flatten)]
    result: T,
}

fn run_one(
    config: &RunConfig,
    params: &ModelParams,
    input: &SequenceInput,
    out: &Path,
    opts: &RunOptions,
) -> Result<PathBuf, CliError> {
    let seq: TokenizedSequence = read_sequence(&input.path)?;
    let dir = out.join(&input.name);
    let report_path = dir.join(format!("{}.json", opts.mode.name()));
    let traces = dir.join("traces");
    let steps = config.decode.steps;
    match opts.mode {
        Mode::Vanilla => {
            let decoded = decode_greedy(&seq, params, None, steps)?;
            let report = VanillaReport {
                sequence: &input.name,
                mode: opts.mode,
                next_token_logits: decoded.trace.output_logits.row(seq.len() - 1).to_vec(),
                decoding: Decoding {
                    prompt_len: decoded.prompt_len,
                    tokens: decoded.tokens.clone(),
                },
            };
            write_json(&report_path, &report)?;
            if opts.emit_traces {
                export_trace(
                    &decoded.trace,
                    &traces.join("vanilla"),
                    &TraceExport::default(),
                )?;
            }
        }
        Mode::Cama => {
            let result = run_cama(&seq, params, &config.cama)?;
            let decoded = decode_greedy(&seq, params, Some(&result.plan), steps)?;
            let report = CamaRunReport {
                sequence: &input.name,
                mode: opts.mode,
                decoding: Decoding {
                    prompt_len: decoded.prompt_len,
                    tokens: decoded.tokens,
                },
                key_set_sizes: result
                    .key_report
                    .elements
                    .iter()
                    .map(|e| e.key_set.len())
                    .collect(),
                cama: result.report(),
            };
            write_json(&report_path, &report)?;
            if opts.emit_traces {
                let all = TraceExport::default();
                if let Some(clean) = &result.trace_clean {
                    export_trace(clean, &traces.join("clean"), &all)?;
                }
                export_trace(&result.trace_modulated, &traces.join("modulated"), &all)?;
            }
        }
        Mode::Cd => {
            let result = run_cd(&seq, params, &config.cd)?;
            let report = BaselineReport {
                sequence: &input.name,
                mode: opts.mode,
                result,
            };
            write_json(&report_path, &report)?;
        }
        Mode::Sofa => {
            let (result, trace) = run_sofa(&seq, params, &config.sofa)?;
            let report = BaselineReport {
                sequence: &input.name,
                mode: opts.mode,
                result,
            };
            write_json(&report_path, &report)?;
            if opts.emit_traces {
                export_trace(&trace, &traces.join("sofa"), &TraceExport::default())?;
            }
        }
    }
    Ok(report_path)
}

/// Runs `opts.mode` over every input and writes `<out>/<name>/<mode>.json`
/// (plus traces on request). Returns the report paths in input order.
pub fn cmd_run(
    config: &RunConfig,
    inputs: &[SequenceInput],
    out: &Path,
    opts: &RunOptions,
) -> Result<Vec<PathBuf>, CliError> {
    config.validate()?;
    if inputs.is_empty() {
        return Err(CliError::Usage("no input sequences".into()));
    }
    let params = config.params()?;
    let results: Vec<Result<PathBuf, CliError>> = in_pool(opts.jobs, || {
        inputs
            .par_iter()
            .map(|input| run_one(config, &params, input, out, opts))
            .collect()
    })?;
    results.into_iter().collect()
}
