use std::path::{Path, PathBuf};

use cama_core::sequence::{generate_synthetic, write_sequence};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::write_json;

#[derive(Debug, Clone, Serialize)]
pub struct GeneratedSequence {
    pub name: String,
    pub seed: u64,
    pub tokens: usize,
    pub key_icd: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GenSummary {
    pub out: PathBuf,
    pub sequences: Vec<GeneratedSequence>,
}

pub fn sequence_name(index: usize) -> String {
    format!("seq_{index:05}")
}

/// Writes `count` sequences under `out`; sequence `k` is seeded with
/// `task.seed + k`. Also writes `corpus.json` listing them.
pub fn cmd_gen(config: &RunConfig, count: usize, out: &Path) -> Result<GenSummary, CliError> {
    config.validate()?;
    let mut sequences = Vec::with_capacity(count);
    for k in 0..count {
        let seed = config.task.seed.wrapping_add(k as u64);
        let spec = cama_core::SyntheticTaskSpec {
            seed,
            ..config.task.clone()
        };
        let seq = generate_synthetic(&spec)?;
        let name = sequence_name(k);
        write_sequence(&seq, &out.join(&name))?;
        sequences.push(GeneratedSequence {
            name,
            seed,
            tokens: seq.len(),
            key_icd: seq.ground_truth.as_ref().and_then(|g| g.key_icd_index),
        });
    }
    let summary = GenSummary {
        out: out.to_path_buf(),
        sequences,
    };
    if count > 0 {
        write_json(&out.join("corpus.json"), &summary.sequences)?;
    }
    Ok(summary)
}
