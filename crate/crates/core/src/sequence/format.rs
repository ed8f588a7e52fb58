//! Sequence container: a directory holding `manifest.json` and
//! `embeddings.bin` (little-endian f32, row-major `S × D`).

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{GroundTruth, SegmentLayout, TokenizedSequence};
use crate::error::{CamaError, Result};
use crate::io::{read_f32_blob, read_json, write_f32_blob, write_json};

pub const SEQUENCE_FORMAT: &str = "cama-sequence/1";
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "embeddings.bin";

#[derive(Debug, Serialize, Deserialize)]
struct SequenceManifest {
    format: String,
    rows: usize,
    dim: usize,
    blob: String,
    blob_bytes: usize,
    caption_mode: bool,
    seed: Option<u64>,
    layout: SegmentLayout,
    ground_truth: Option<GroundTruth>,
}

pub fn write_sequence(seq: &TokenizedSequence, dir: &Path) -> Result<()> {
    if seq.embeddings.iter().any(|v| !v.is_finite()) {
        return Err(CamaError::NonFiniteValue(dir.to_path_buf()));
    }
    fs::create_dir_all(dir).map_err(|e| CamaError::io(dir, e))?;
    let manifest = SequenceManifest {
        format: SEQUENCE_FORMAT.to_string(),
        rows: seq.len(),
        dim: seq.dim(),
        blob: BLOB.to_string(),
        blob_bytes: seq.len() * seq.dim() * 4,
        caption_mode: seq.layout.caption_mode,
        seed: seq.ground_truth.as_ref().map(|g| g.task.seed),
        layout: seq.layout.clone(),
        ground_truth: seq.ground_truth.clone(),
    };
    write_f32_blob(&dir.join(BLOB), seq.embeddings.iter().copied())?;
    write_json(&dir.join(MANIFEST), &manifest)
}

pub fn read_sequence(dir: &Path) -> Result<TokenizedSequence> {
    let manifest_path = dir.join(MANIFEST);
    let manifest: SequenceManifest = read_json(&manifest_path)?;
    if manifest.format != SEQUENCE_FORMAT {
        return Err(CamaError::MalformedHeader {
            path: manifest_path,
            reason: format!("unknown format {:?}", manifest.format),
        });
    }
    if manifest.rows != manifest.layout.total_len
        || manifest.blob_bytes != manifest.rows * manifest.dim * 4
        || manifest.caption_mode != manifest.layout.caption_mode
    {
        return Err(CamaError::InconsistentManifest(format!(
            "rows={} dim={} blob_bytes={} layout.total_len={}",
            manifest.rows, manifest.dim, manifest.blob_bytes, manifest.layout.total_len
        )));
    }
    let values = read_f32_blob(&dir.join(&manifest.blob), manifest.blob_bytes)?;
    let embeddings = Array2::from_shape_vec((manifest.rows, manifest.dim), values)
        .expect("blob size checked against manifest");
    let seq = TokenizedSequence {
        embeddings,
        layout: manifest.layout,
        ground_truth: manifest.ground_truth,
    };
    if let Some(v) = seq.layout.validate().first() {
        return Err(CamaError::InconsistentManifest(v.to_string()));
    }
    Ok(seq)
}
