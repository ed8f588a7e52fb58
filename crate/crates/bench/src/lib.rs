//! Fixtures shared by the benchmarks.

use cama_core::decoder::{init_params, ModelDims};
use cama_core::sequence::generate_synthetic;
use cama_core::{ModelParams, SyntheticTaskSpec, TokenizedSequence};

/// Default toy model with a seeded sequence of `n_shots` demonstrations.
pub fn fixture(n_shots: usize) -> (TokenizedSequence, ModelParams) {
    let dims = ModelDims::default();
    let spec = SyntheticTaskSpec {
        n_shots,
        embed_dim: dims.model_dim,
        seed: 17,
        ..SyntheticTaskSpec::default()
    };
    let seq = generate_synthetic(&spec).expect("valid spec");
    let params = init_params(dims, 7).expect("valid dims");
    (seq, params)
}
