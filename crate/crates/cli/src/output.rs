use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{io_err, CliError};

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Data(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceInput {
    pub name: String,
    pub path: PathBuf,
}

fn is_sequence_dir(p: &Path) -> bool {
    p.join("manifest.json").is_file()
}

/// Expands each argument into sequence directories: a sequence directory
/// stands for itself, any other directory for its sequence subdirectories in
/// name order.
pub fn resolve_inputs(paths: &[PathBuf]) -> Result<Vec<SequenceInput>, CliError> {
    let mut out = Vec::new();
    for p in paths {
        if is_sequence_dir(p) {
            out.push(SequenceInput {
                name: dir_name(p),
                path: p.clone(),
            });
            continue;
        }
        let entries = fs::read_dir(p).map_err(|e| io_err(p, e))?;
        let mut found: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|c| is_sequence_dir(c))
            .collect();
        if found.is_empty() {
            return Err(CliError::Data(format!(
                "{} holds no sequence directories",
                p.display()
            )));
        }
        found.sort();
        out.extend(found.into_iter().map(|path| SequenceInput {
            name: dir_name(&path),
            path,
        }));
    }
    Ok(out)
}

fn dir_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.display().to_string())
}

/// Runs `f` on a pool of `jobs` threads; `jobs == 0` uses the default pool
/// size.
pub(crate) fn in_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {jobs} workers: {e}")))?;
    Ok(pool.install(f))
}
