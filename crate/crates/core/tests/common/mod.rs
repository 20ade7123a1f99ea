#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ropelab_core::model::ModelConfigFile;
use ropelab_core::{ModelConfig, Tensor, TopologyKind};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn tokens(rng: &mut impl Rng, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..vocab)).collect()
}

pub fn small_config(
    kind: TopologyKind,
    n_layers: usize,
    fraction: f64,
    qk_norm: bool,
) -> ModelConfig {
    ModelConfigFile {
        vocab_size: 11,
        n_layers,
        model_dim: 16,
        n_heads: 2,
        n_kv_heads: None,
        qk_norm,
        rotary_fraction: fraction,
        rope_base: 10_000.0,
        max_positions: 16,
        topology: kind,
        norm: None,
        mlp: None,
        mlp_hidden: Some(12),
        tie_embeddings: false,
        norm_eps: 1e-5,
    }
    .try_into()
    .unwrap()
}
