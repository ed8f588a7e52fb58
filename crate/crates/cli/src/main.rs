use std::path::PathBuf;
use std::process::ExitCode;

use cama_cli::commands::{
    cmd_bench, cmd_diagnose, cmd_gen, cmd_gradcheck, cmd_run, Mode, RunOptions, Which,
};
use cama_cli::{resolve_inputs, CliError, RunConfig};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "cama",
    version,
    about = "Context-aware attention modulation on a toy decoder"
)]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `task.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; 0 picks one per core.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a corpus of synthetic sequences.
    Gen {
        #[arg(long, default_value_t = 10)]
        count: usize,
    },
    /// Prefill and decode every input in one mode.
    Run {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        emit_traces: bool,
        /// Contrastive strength, `cd` only.
        #[arg(long)]
        alpha: Option<f64>,
        /// Soft mask mixing weight, `sofa` only.
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Alignment and contribution tables, clean against modulated.
    Diagnose {
        #[arg(long, value_enum, default_value = "both")]
        which: Which,
        /// Also write per-element heat maps as PGM.
        #[arg(long)]
        heatmaps: bool,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Analytic attention gradients against finite differences.
    Gradcheck {
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Median wall time per mode.
    Bench {
        #[arg(long)]
        runs: Option<usize>,
    },
}

fn json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes")
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.task.seed = seed;
    }
    match cli.command {
        Command::Gen { count } => {
            if count == 0 {
                eprintln!("warning: --count 0, nothing written");
            }
            let summary = cmd_gen(&config, count, &cli.out)?;
            for s in &summary.sequences {
                println!("{}  seed={}  tokens={}", s.name, s.seed, s.tokens);
            }
        }
        Command::Run {
            mode,
            emit_traces,
            alpha,
            sigma,
            inputs,
        } => {
            if alpha.is_some() && mode != Mode::Cd {
                return Err(CliError::Usage("--alpha applies to --mode cd only".into()));
            }
            if sigma.is_some() && mode != Mode::Sofa {
                return Err(CliError::Usage(
                    "--sigma applies to --mode sofa only".into(),
                ));
            }
            if let Some(a) = alpha {
                config.cd.alpha = a;
            }
            if let Some(s) = sigma {
                config.sofa.sigma = s;
            }
            let inputs = resolve_inputs(&inputs)?;
            let opts = RunOptions {
                mode,
                emit_traces,
                jobs: cli.jobs,
            };
            for path in cmd_run(&config, &inputs, &cli.out, &opts)? {
                println!("{}", path.display());
            }
        }
        Command::Diagnose {
            which,
            heatmaps,
            inputs,
        } => {
            let inputs = resolve_inputs(&inputs)?;
            let summary = cmd_diagnose(&config, &inputs, &cli.out, which, cli.jobs, heatmaps)?;
            for path in summary.align_csv.iter().chain(&summary.contrib_csv) {
                println!("{}", path.display());
            }
        }
        Command::Gradcheck { threshold } => {
            let report = cmd_gradcheck(&config, threshold)?;
            println!("{}", json(&report));
            if !report.passed {
                return Err(CliError::Numeric(format!(
                    "max relative error {:.3e} exceeds {:.1e}",
                    report.max_rel_error, report.threshold
                )));
            }
        }
        Command::Bench { runs } => {
            let report = cmd_bench(&config, runs)?;
            print!("{}", report.table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
