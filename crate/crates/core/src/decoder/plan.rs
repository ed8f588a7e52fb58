//! Column-keyed additive biases on attention logits.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CamaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum HeadTarget {
    All,
    Head(usize),
}

impl HeadTarget {
    pub fn covers(&self, head: usize) -> bool {
        match self {
            HeadTarget::All => true,
            HeadTarget::Head(h) => *h == head,
        }
    }
}

/// Adds `value` to logit `(r, column)` of the targeted heads of `layer`
/// (0-based) for every row `r ≥ row_from`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "EntryRecord", try_from = "EntryRecord")]
pub struct BiasEntry {
    pub layer: usize,
    pub head: HeadTarget,
    pub column: usize,
    pub row_from: usize,
    pub value: f64,
}

/// Serialized form: 1-based layer, `head: null` for all heads.
#[derive(Serialize, Deserialize)]
struct EntryRecord {
    layer: usize,
    head: Option<usize>,
    column: usize,
    row_from: usize,
    value: f64,
}

impl From<BiasEntry> for EntryRecord {
    fn from(e: BiasEntry) -> Self {
        EntryRecord {
            layer: e.layer + 1,
            head: match e.head {
                HeadTarget::All => None,
                HeadTarget::Head(h) => Some(h),
            },
            column: e.column,
            row_from: e.row_from,
            value: e.value,
        }
    }
}

impl TryFrom<EntryRecord> for BiasEntry {
    type Error = String;

    fn try_from(r: EntryRecord) -> std::result::Result<Self, String> {
        if r.layer == 0 {
            return Err("layers are 1-based".into());
        }
        Ok(BiasEntry {
            layer: r.layer - 1,
            head: r.head.map_or(HeadTarget::All, HeadTarget::Head),
            column: r.column,
            row_from: r.row_from,
            value: r.value,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BiasPlan {
    entries: BTreeMap<(usize, HeadTarget, usize), (usize, f64)>,
}

impl BiasPlan {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers an entry. A second registration for the same
    /// `(layer, head, column)` accumulates its value.
    pub fn add(&mut self, entry: BiasEntry) -> Result<()> {
        if !entry.value.is_finite() {
            return Err(CamaError::InvalidBias(format!(
                "non-finite value at column {}",
                entry.column
            )));
        }
        if entry.column >= entry.row_from {
            return Err(CamaError::InvalidBias(format!(
                "column {} is not before row_from {}",
                entry.column, entry.row_from
            )));
        }
        let key = (entry.layer, entry.head, entry.column);
        match self.entries.get_mut(&key) {
            Some((row_from, value)) => {
                if *row_from != entry.row_from {
                    return Err(CamaError::InvalidBias(format!(
                        "conflicting row_from for column {}",
                        entry.column
                    )));
                }
                *value += entry.value;
            }
            None => {
                self.entries.insert(key, (entry.row_from, entry.value));
            }
        }
        Ok(())
    }

    pub fn extend(&mut self, entries: impl IntoIterator<Item = BiasEntry>) -> Result<()> {
        for e in entries {
            self.add(e)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = BiasEntry> + '_ {
        self.entries
            .iter()
            .map(|(&(layer, head, column), &(row_from, value))| BiasEntry {
                layer,
                head,
                column,
                row_from,
                value,
            })
    }

    pub fn for_layer(&self, layer: usize) -> impl Iterator<Item = BiasEntry> + '_ {
        self.entries().filter(move |e| e.layer == layer)
    }

    /// Distinct 0-based layers touched by the plan.
    pub fn layers(&self) -> Vec<usize> {
        let mut layers: Vec<usize> = self.entries.keys().map(|k| k.0).collect();
        layers.dedup();
        layers
    }

    pub fn check(&self, n_layers: usize, n_heads: usize, seq_len: usize) -> Result<()> {
        for e in self.entries() {
            if e.layer >= n_layers {
                return Err(CamaError::PlanLayerOutOfRange {
                    layer: e.layer + 1,
                    n_layers,
                });
            }
            if let HeadTarget::Head(h) = e.head {
                if h >= n_heads {
                    return Err(CamaError::InvalidBias(format!("head {h} out of range")));
                }
            }
            if e.row_from > seq_len {
                return Err(CamaError::InvalidBias(format!(
                    "row_from {} beyond sequence length {seq_len}",
                    e.row_from
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 of the serialized entry list.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(&self.entries().collect::<Vec<_>>())
            .expect("bias entries serialize");
        let hash = Sha256::digest(json.as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl Serialize for BiasPlan {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.entries())
    }
}

impl<'de> Deserialize<'de> for BiasPlan {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let entries = Vec::<BiasEntry>::deserialize(d)?;
        let mut plan = BiasPlan::new();
        plan.extend(entries).map_err(serde::de::Error::custom)?;
        Ok(plan)
    }
}
