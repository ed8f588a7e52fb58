//! TOML run configuration shared by every subcommand.

use std::fs;
use std::path::Path;

use cama_core::baselines::{CdConfig, SofaConfig};
use cama_core::decoder::{init_params, ModelDims, ModelParams};
use cama_core::{CamaConfig, SyntheticTaskSpec};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub n_heads: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl ModelSection {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            model_dim: self.model_dim,
            head_dim: self.head_dim,
            ffn_dim: self.ffn_dim,
            vocab_size: self.vocab_size,
        }
    }

    fn from_dims(d: ModelDims, seed: u64) -> Self {
        ModelSection {
            n_layers: d.n_layers,
            n_heads: d.n_heads,
            model_dim: d.model_dim,
            head_dim: d.head_dim,
            ffn_dim: d.ffn_dim,
            vocab_size: d.vocab_size,
            seed,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection::from_dims(ModelDims::default(), 7)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeSection {
    /// Tokens generated per sequence in `run` and `diagnose`.
    pub steps: usize,
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection { steps: 3 }
    }
}

/// Gradient check on its own small model and sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSection {
    pub model: ModelSection,
    pub task: SyntheticTaskSpec,
    pub samples: usize,
    pub step: f64,
    pub threshold: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        let dims = ModelDims::small();
        GradcheckSection {
            model: ModelSection::from_dims(dims, 11),
            task: SyntheticTaskSpec {
                n_shots: 3,
                image_tokens_per_icd: 12,
                question_len: 3,
                answer_len: 3,
                embed_dim: dims.model_dim,
                seed: 5,
                ..SyntheticTaskSpec::default()
            },
            samples: 120,
            step: 1e-3,
            threshold: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub runs: usize,
    pub warmup: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            runs: 20,
            warmup: 2,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    /// `task.seed` is the base seed; sequence `k` of a corpus uses
    /// `task.seed + k`.
    pub task: SyntheticTaskSpec,
    pub cama: CamaConfig,
    pub cd: CdConfig,
    pub sofa: SofaConfig,
    pub decode: DecodeSection,
    pub gradcheck: GradcheckSection,
    pub bench: BenchSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let dims = self.model.dims();
        dims.validate()?;
        self.task.validate()?;
        self.cama.validate(&dims)?;
        self.cd.validate()?;
        self.sofa.validate()?;
        if self.task.embed_dim != dims.model_dim {
            return Err(CliError::Usage(format!(
                "task.embed_dim {} does not match model.model_dim {}",
                self.task.embed_dim, dims.model_dim
            )));
        }
        if self.task.vocab_size() != dims.vocab_size {
            return Err(CliError::Usage(format!(
                "task vocabulary has {} tokens but model.vocab_size is {}",
                self.task.vocab_size(),
                dims.vocab_size
            )));
        }
        if self.decode.steps == 0 {
            return Err(CliError::Usage("decode.steps must be ≥ 1".into()));
        }
        if self.bench.runs == 0 {
            return Err(CliError::Usage("bench.runs must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn params(&self) -> Result<ModelParams, CliError> {
        Ok(init_params(self.model.dims(), self.model.seed)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_validates_and_round_trips() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn shipped_default_file_matches_defaults() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
        assert_eq!(RunConfig::load(&path).unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_file_keeps_other_defaults() {
        let c: RunConfig =
            toml::from_str("[cd]\nalpha = 1.0\ndistortion = \"blank_images\"\n").unwrap();
        assert_eq!(c.cd.alpha, 1.0);
        assert_eq!(c.cama, CamaConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[cama]\nk3_pct = 1.0\n").is_err());
        assert!(toml::from_str::<RunConfig>("bogus = 1\n").is_err());
    }

    #[test]
    fn cross_validation() {
        let mut c = RunConfig::default();
        c.task.embed_dim = 32;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.cama.stage2_layers = vec![30];
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.task.object_vocab_size = 20;
        assert!(c.validate().is_err());
    }
}
