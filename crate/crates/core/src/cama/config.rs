use serde::{Deserialize, Serialize};

use crate::decoder::ModelDims;
use crate::error::{CamaError, Result};

/// Which attention quantity the head flow sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoSource {
    RawLogits,
    /// Causal softmax of the layer's logits before any Stage II entry.
    SoftmaxWeights,
}

/// Position factor used for the query element in Stage I.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueryPositionFactor {
    #[serde(rename = "clamp_to_1_over_n")]
    ClampTo1OverN,
    #[serde(rename = "one")]
    One,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefillMode {
    /// Score on a clean pass, then modulate on a second pass.
    TwoPass,
    /// Score and modulate each Stage I layer within one pass.
    CumulativeSinglePass,
}

/// Layers here are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CamaConfig {
    pub stage1_layers: Vec<usize>,
    pub stage2_layers: Vec<usize>,
    pub k1_pct: f64,
    pub k2_pct: f64,
    pub epsilon: f64,
    pub rho_source: RhoSource,
    pub query_position_factor: QueryPositionFactor,
    pub prefill_mode: PrefillMode,
    pub caption_mode: bool,
}

impl Default for CamaConfig {
    fn default() -> Self {
        CamaConfig {
            stage1_layers: vec![2, 3],
            stage2_layers: (7..=19).step_by(2).collect(),
            k1_pct: 20.0,
            k2_pct: 20.0,
            epsilon: 1e-6,
            rho_source: RhoSource::RawLogits,
            query_position_factor: QueryPositionFactor::ClampTo1OverN,
            prefill_mode: PrefillMode::TwoPass,
            caption_mode: false,
        }
    }
}

fn check_layers(name: &str, layers: &[usize], n_layers: usize) -> Result<()> {
    if layers.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CamaError::InvalidConfig(format!(
            "{name} must be strictly ascending"
        )));
    }
    if let Some(&bad) = layers.iter().find(|&&l| l == 0 || l > n_layers) {
        return Err(CamaError::InvalidConfig(format!(
            "{name} contains layer {bad}, outside 1..={n_layers}"
        )));
    }
    Ok(())
}

impl CamaConfig {
    pub fn validate(&self, dims: &ModelDims) -> Result<()> {
        if self.stage1_layers.is_empty() {
            return Err(CamaError::InvalidConfig("stage1_layers is empty".into()));
        }
        check_layers("stage1_layers", &self.stage1_layers, dims.n_layers)?;
        check_layers("stage2_layers", &self.stage2_layers, dims.n_layers)?;
        if let (Some(&last1), Some(&first2)) =
            (self.stage1_layers.last(), self.stage2_layers.first())
        {
            if last1 >= first2 {
                return Err(CamaError::InvalidConfig(format!(
                    "stage1 layer {last1} is not below stage2 layer {first2}"
                )));
            }
        }
        for pct in [self.k1_pct, self.k2_pct] {
            if !(pct > 0.0 && pct <= 100.0) {
                return Err(CamaError::InvalidPercentage(pct));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(CamaError::InvalidConfig(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    pub(crate) fn stage1_zero_based(&self) -> Vec<usize> {
        self.stage1_layers.iter().map(|l| l - 1).collect()
    }

    pub(crate) fn stage2_zero_based(&self) -> Vec<usize> {
        self.stage2_layers.iter().map(|l| l - 1).collect()
    }
}

/// Position decay for element `i` (1-based) among `n` demonstrations.
/// `i == n + 1` is the query.
pub fn pos_factor(i: usize, n: usize, query: QueryPositionFactor) -> Result<f64> {
    if n == 0 || i == 0 || i > n + 1 {
        return Err(CamaError::PositionOutOfRange {
            position: i,
            shots: n,
        });
    }
    if i <= n {
        return Ok((n - i + 1) as f64 / n as f64);
    }
    Ok(match query {
        QueryPositionFactor::ClampTo1OverN => 1.0 / n as f64,
        QueryPositionFactor::One => 1.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = CamaConfig::default();
        assert_eq!(c.stage1_layers, vec![2, 3]);
        assert_eq!(c.stage2_layers, vec![7, 9, 11, 13, 15, 17, 19]);
        assert_eq!((c.k1_pct, c.k2_pct), (20.0, 20.0));
        assert_eq!(c.epsilon, 1e-6);
        c.validate(&ModelDims::default()).unwrap();
    }

    #[test]
    fn rejects_overlapping_stages() {
        let c = CamaConfig {
            stage1_layers: vec![2, 7],
            ..CamaConfig::default()
        };
        assert!(c.validate(&ModelDims::default()).is_err());
    }

    #[test]
    fn rejects_layers_beyond_model() {
        assert!(CamaConfig::default().validate(&ModelDims::small()).is_err());
        let c = CamaConfig {
            stage1_layers: vec![0],
            stage2_layers: vec![],
            ..CamaConfig::default()
        };
        assert!(c.validate(&ModelDims::small()).is_err());
    }

    #[test]
    fn rejects_bad_percentages_and_epsilon() {
        let dims = ModelDims::default();
        for (k1, eps) in [(0.0, 1e-6), (101.0, 1e-6), (20.0, 0.0), (20.0, f64::NAN)] {
            let c = CamaConfig {
                k1_pct: k1,
                epsilon: eps,
                ..CamaConfig::default()
            };
            assert!(c.validate(&dims).is_err());
        }
    }

    #[test]
    fn pos_factor_decays() {
        let q = QueryPositionFactor::ClampTo1OverN;
        assert_eq!(pos_factor(1, 8, q).unwrap(), 1.0);
        assert_eq!(pos_factor(8, 8, q).unwrap(), 0.125);
        assert_eq!(pos_factor(9, 8, q).unwrap(), 0.125);
        assert_eq!(pos_factor(9, 8, QueryPositionFactor::One).unwrap(), 1.0);
        assert!(pos_factor(10, 8, q).is_err());
        assert!(pos_factor(0, 8, q).is_err());
    }

    #[test]
    fn serde_names() {
        let json = serde_json::to_string(&CamaConfig::default()).unwrap();
        assert!(json.contains("\"clamp_to_1_over_n\""));
        assert!(json.contains("\"raw_logits\""));
        assert!(json.contains("\"two_pass\""));
        let back: CamaConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, CamaConfig::default());
    }
}
