//! Shared helpers for the integration suites.
#![allow(dead_code)]

use pcl_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    Tensor::randn(vec![n, d], rng)
}

/// Random probability rows: softmax of standard-normal logits.
pub fn random_probs(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Tensor {
    randn_matrix(rng, n, c).softmax_rows().unwrap()
}

/// Random batch dimensions within the desk-scale envelope used throughout
/// the loss checks.
pub fn small_dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    let n = rng.gen_range(1..=4);
    let c = rng.gen_range(2..=5);
    let d = rng.gen_range(2..=6);
    (n, c, d)
}
