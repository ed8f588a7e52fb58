//! Trace directory format.
//!
//! ```text
//! <dir>/manifest.json     dims, seq_len, plan digest, plan entries, layer list
//! <dir>/layer_<l>.bin     [H, S, S] logits after bias
//! <dir>/weights_<l>.bin   [H, S, S] attention weights   (optional)
//! <dir>/hidden_<l>.bin    [S, D] residual stream        (optional)
//! <dir>/prebias_<l>.bin   [H, S, S] logits before bias  (biased layers only)
//! ```
//!
//! All blobs are little-endian f32, row-major. `<l>` is the 1-based layer.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::forward::ForwardTrace;
use super::params::ModelDims;
use super::plan::BiasPlan;
use crate::error::{CamaError, Result};
use crate::io::{read_f32_blob, read_json, write_f32_blob, write_json};

pub const TRACE_FORMAT: &str = "cama-trace/1";

/// Which parts of a trace to write.
#[derive(Debug, Clone)]
pub struct TraceExport {
    /// 0-based layers; `None` writes all of them.
    pub layers: Option<Vec<usize>>,
    pub weights: bool,
    pub hidden: bool,
}

impl Default for TraceExport {
    fn default() -> Self {
        TraceExport {
            layers: None,
            weights: true,
            hidden: true,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerFiles {
    layer: usize,
    logits: String,
    weights: Option<String>,
    hidden: Option<String>,
    pre_bias: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceManifest {
    format: String,
    dims: ModelDims,
    seq_len: usize,
    plan_digest: String,
    plan: BiasPlan,
    layers: Vec<LayerFiles>,
}

/// One layer read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredLayer {
    pub logits: Array3<f32>,
    pub weights: Option<Array3<f32>>,
    pub hidden: Option<Array2<f32>>,
    pub pre_bias: Option<Array3<f32>>,
}

impl StoredLayer {
    pub fn raw_logits(&self) -> &Array3<f32> {
        self.pre_bias.as_ref().unwrap_or(&self.logits)
    }
}

/// A trace read back from disk; possibly a subset of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTrace {
    pub dims: ModelDims,
    pub seq_len: usize,
    pub plan: BiasPlan,
    /// Keyed by 0-based layer.
    pub layers: BTreeMap<usize, StoredLayer>,
}

pub fn export_trace(trace: &ForwardTrace, dir: &Path, what: &TraceExport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CamaError::io(dir, e))?;
    let layers: Vec<usize> = match &what.layers {
        Some(l) => l.clone(),
        None => (0..trace.logits.len()).collect(),
    };
    let mut files = Vec::with_capacity(layers.len());
    for &l in &layers {
        if l >= trace.logits.len() {
            return Err(CamaError::PlanLayerOutOfRange {
                layer: l + 1,
                n_layers: trace.logits.len(),
            });
        }
        let one = l + 1;
        let logits = format!("layer_{one}.bin");
        write_f32_blob(&dir.join(&logits), trace.logits[l].iter().copied())?;
        let weights = if what.weights {
            let name = format!("weights_{one}.bin");
            write_f32_blob(&dir.join(&name), trace.weights[l].iter().copied())?;
            Some(name)
        } else {
            None
        };
        let hidden = if what.hidden {
            let name = format!("hidden_{one}.bin");
            write_f32_blob(&dir.join(&name), trace.hidden[l].iter().copied())?;
            Some(name)
        } else {
            None
        };
        let pre_bias = match trace.pre_bias.get(&l) {
            Some(raw) => {
                let name = format!("prebias_{one}.bin");
                write_f32_blob(&dir.join(&name), raw.iter().copied())?;
                Some(name)
            }
            None => None,
        };
        files.push(LayerFiles {
            layer: one,
            logits,
            weights,
            hidden,
            pre_bias,
        });
    }
    let manifest = TraceManifest {
        format: TRACE_FORMAT.to_string(),
        dims: trace.dims,
        seq_len: trace.seq_len,
        plan_digest: trace.applied_plan.digest(),
        plan: trace.applied_plan.clone(),
        layers: files,
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn import_trace(dir: &Path) -> Result<StoredTrace> {
    let manifest_path = dir.join("manifest.json");
    let manifest: TraceManifest = read_json(&manifest_path)?;
    if manifest.format != TRACE_FORMAT {
        return Err(CamaError::MalformedHeader {
            path: manifest_path,
            reason: format!("unknown format {:?}", manifest.format),
        });
    }
    if manifest.plan.digest() != manifest.plan_digest {
        return Err(CamaError::InconsistentManifest(
            "plan digest does not match plan entries".into(),
        ));
    }
    let on_disk = fs::read_dir(dir)
        .map_err(|e| CamaError::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| {
            let name = e.file_name();
            let name = name.to_string_lossy();
            name.starts_with("layer_") && name.ends_with(".bin")
        })
        .count();
    if on_disk != manifest.layers.len() {
        return Err(CamaError::InconsistentManifest(format!(
            "manifest lists {} layers but {} layer blobs exist",
            manifest.layers.len(),
            on_disk
        )));
    }
    let dims = manifest.dims;
    let s = manifest.seq_len;
    let attn_shape = (dims.n_heads, s, s);
    let attn_bytes = dims.n_heads * s * s * 4;
    let read_attn = |name: &str| -> Result<Array3<f32>> {
        let values = read_f32_blob(&dir.join(name), attn_bytes)?;
        Ok(Array3::from_shape_vec(attn_shape, values).expect("size checked"))
    };
    let mut layers = BTreeMap::new();
    for f in &manifest.layers {
        if f.layer == 0 || f.layer > dims.n_layers {
            return Err(CamaError::InconsistentManifest(format!(
                "layer {} outside 1..={}",
                f.layer, dims.n_layers
            )));
        }
        let hidden = match &f.hidden {
            Some(name) => {
                let values = read_f32_blob(&dir.join(name), s * dims.model_dim * 4)?;
                Some(Array2::from_shape_vec((s, dims.model_dim), values).expect("size checked"))
            }
            None => None,
        };
        layers.insert(
            f.layer - 1,
            StoredLayer {
                logits: read_attn(&f.logits)?,
                weights: f.weights.as_deref().map(read_attn).transpose()?,
                hidden,
                pre_bias: f.pre_bias.as_deref().map(read_attn).transpose()?,
            },
        );
    }
    Ok(StoredTrace {
        dims,
        seq_len: s,
        plan: manifest.plan,
        layers,
    })
}
