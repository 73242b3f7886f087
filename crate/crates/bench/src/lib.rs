//! Fixtures shared by the benchmarks.

use ledgerlm::model::{init_parameters, ModelConfig, ParameterSet};
use ledgerlm::rng::Rng;

/// Rows of uniformly random byte tokens.
pub fn random_rows(n: usize, len: usize, seed: u64) -> Vec<Vec<u16>> {
    let mut rng = Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..len).map(|_| rng.below(256) as u16).collect())
        .collect()
}

pub fn toy_model(seed: u64) -> (ModelConfig, ParameterSet) {
    let cfg = ModelConfig::toy();
    let params = init_parameters(&cfg, seed).expect("toy config is valid");
    (cfg, params)
}
