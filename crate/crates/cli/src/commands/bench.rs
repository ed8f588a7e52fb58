use std::time::Instant;

use cama_core::baselines::{run_cd, sofa_forward};
use cama_core::cama::PrefillMode;
use cama_core::decoder::{forward_pass_count, prefill};
use cama_core::sequence::generate_synthetic;
use cama_core::{run_cama, CamaConfig};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub mode: String,
    pub median_ms: f64,
    /// Median relative to vanilla prefill.
    pub ratio: f64,
    pub forward_passes: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub seq_len: usize,
    pub runs: usize,
    /// Sorted by mode name.
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, mode: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<18} {:>12} {:>8} {:>8}\n",
            "mode", "median_ms", "ratio", "passes"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<18} {:>12.3} {:>8.3} {:>8}\n",
                r.mode, r.median_ms, r.ratio, r.forward_passes
            ));
        }
        s
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Times one call of `f` per run after `warmup` untimed calls; returns the
/// median in milliseconds and the forward passes of a single call.
fn time<F: FnMut() -> Result<(), CliError>>(
    runs: usize,
    warmup: usize,
    mut f: F,
) -> Result<(f64, u64), CliError> {
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(runs);
    let mut passes = 0;
    for _ in 0..runs {
        let before = forward_pass_count();
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
        passes = forward_pass_count() - before;
    }
    Ok((median(samples), passes))
}

/// Wall-clock medians of every mode on one generated sequence. `runs`
/// overrides `bench.runs`.
pub fn cmd_bench(config: &RunConfig, runs: Option<usize>) -> Result<BenchReport, CliError> {
    config.validate()?;
    let runs = runs.unwrap_or(config.bench.runs);
    if runs == 0 {
        return Err(CliError::Usage("runs must be ≥ 1".into()));
    }
    let warmup = config.bench.warmup;
    let params = config.params()?;
    let seq = generate_synthetic(&config.task)?;
    let two_pass = CamaConfig {
        prefill_mode: PrefillMode::TwoPass,
        ..config.cama.clone()
    };
    let single_pass = CamaConfig {
        prefill_mode: PrefillMode::CumulativeSinglePass,
        ..config.cama.clone()
    };

    let mut timed: Vec<(&str, (f64, u64))> = vec![
        (
            "vanilla",
            time(runs, warmup, || {
                prefill(&seq, &params, None)?;
                Ok(())
            })?,
        ),
        (
            "cama_two_pass",
            time(runs, warmup, || {
                run_cama(&seq, &params, &two_pass)?;
                Ok(())
            })?,
        ),
        (
            "cama_single_pass",
            time(runs, warmup, || {
                run_cama(&seq, &params, &single_pass)?;
                Ok(())
            })?,
        ),
        (
            "sofa",
            time(runs, warmup, || {
                sofa_forward(&seq, &params, &config.sofa)?;
                Ok(())
            })?,
        ),
        (
            "cd",
            time(runs, warmup, || {
                run_cd(&seq, &params, &config.cd)?;
                Ok(())
            })?,
        ),
    ];
    timed.sort_by(|a, b| a.0.cmp(b.0));
    let base = timed
        .iter()
        .find(|(m, _)| *m == "vanilla")
        .map(|(_, (ms, _))| *ms)
        .expect("vanilla timed");
    let rows = timed
        .into_iter()
        .map(|(mode, (ms, passes))| BenchRow {
            mode: mode.to_string(),
            median_ms: ms,
            ratio: ms / base,
            forward_passes: passes,
        })
        .collect();
    Ok(BenchReport {
        seq_len: seq.len(),
        runs,
        rows,
    })
}
