use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CamaError, Result};

/// Shape of the toy decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_layers: usize,
    pub n_heads: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
}

impl Default for ModelDims {
    /// 24 layers leave room for shallow and middle-layer schedules up to
    /// layer 19 with headroom.
    fn default() -> Self {
        ModelDims {
            n_layers: 24,
            n_heads: 8,
            model_dim: 64,
            head_dim: 8,
            ffn_dim: 128,
            vocab_size: 19,
        }
    }
}

impl ModelDims {
    pub fn small() -> Self {
        ModelDims {
            n_layers: 6,
            n_heads: 4,
            model_dim: 32,
            head_dim: 8,
            ffn_dim: 64,
            vocab_size: 19,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0
            || self.n_heads == 0
            || self.head_dim == 0
            || self.ffn_dim == 0
            || self.vocab_size == 0
        {
            return Err(CamaError::InvalidDims("all dimensions must be ≥ 1".into()));
        }
        if self.n_heads * self.head_dim != self.model_dim {
            return Err(CamaError::InvalidDims(format!(
                "n_heads × head_dim = {} × {} ≠ model_dim {}",
                self.n_heads, self.head_dim, self.model_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub layers: Vec<LayerParams>,
    pub lnf_gain: Array1<f64>,
    pub lnf_bias: Array1<f64>,
    /// `D × V` output projection.
    pub unembed: Array2<f64>,
    /// `V × D` embeddings for generated tokens.
    pub token_embed: Array2<f64>,
}

struct Init(ChaCha8Rng);

impl Init {
    fn matrix(&mut self, rows: usize, cols: usize) -> Array2<f64> {
        let scale = 1.0 / (rows as f64).sqrt();
        Array2::from_shape_simple_fn((rows, cols), || {
            let z: f64 = StandardNormal.sample(&mut self.0);
            z * scale
        })
    }

    fn around(&mut self, center: f64, len: usize) -> Array1<f64> {
        Array1::from_shape_simple_fn(len, || {
            let z: f64 = StandardNormal.sample(&mut self.0);
            center + 0.1 * z
        })
    }
}

/// Seeded initialization; every weight matrix is scaled by `1/sqrt(fan_in)`.
pub fn init_params(dims: ModelDims, seed: u64) -> Result<ModelParams> {
    dims.validate()?;
    let mut init = Init(ChaCha8Rng::seed_from_u64(seed));
    let d = dims.model_dim;
    let f = dims.ffn_dim;
    let layers = (0..dims.n_layers)
        .map(|_| LayerParams {
            ln1_gain: init.around(1.0, d),
            ln1_bias: init.around(0.0, d),
            wq: init.matrix(d, d),
            wk: init.matrix(d, d),
            wv: init.matrix(d, d),
            wo: init.matrix(d, d),
            ln2_gain: init.around(1.0, d),
            ln2_bias: init.around(0.0, d),
            w1: init.matrix(d, f),
            b1: init.around(0.0, f),
            w2: init.matrix(f, d),
            b2: init.around(0.0, d),
        })
        .collect();
    Ok(ModelParams {
        dims,
        layers,
        lnf_gain: init.around(1.0, d),
        lnf_bias: init.around(0.0, d),
        unembed: init.matrix(d, dims.vocab_size),
        token_embed: init.matrix(dims.vocab_size, d) * (d as f64).sqrt(),
    })
}
