#![allow(dead_code)]

use blockdiff::denoiser::{init_params, ModelConfig, ModelParams};
use blockdiff::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MASK: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;

pub fn tiny_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        ffn_mult: 2,
        max_positions: 64,
    }
}

/// Random model with weights scaled up so that outputs depend visibly on the
/// input.
pub fn random_model(cfg: &ModelConfig, seed: u64, scale: f64) -> ModelParams {
    let mut p = init_params(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for t in p.tensors_mut() {
        for x in t.data_mut() {
            *x = *x * scale + 0.01 * (rng.random::<f64>() - 0.5);
        }
    }
    p
}

pub fn random_tokens(rng: &mut impl Rng, n: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
