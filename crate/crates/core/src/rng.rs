//! Seed derivation. Every random draw in the crate comes from a ChaCha
//! stream selected by `(seed, label)`, so independent consumers never share
//! a sequence and results do not depend on call order across consumers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

pub type Rng = ChaCha8Rng;

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Generator for the stream named `label` under `seed`.
pub fn stream(seed: u64, label: &str) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(label));
    rng
}

/// Generator for item `index` of a labelled family of streams.
pub fn indexed(seed: u64, label: &str, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(fnv1a(label));
    rng
}

/// Gaussian tensor with the given standard deviation.
pub fn normal_tensor(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<f32> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Kaiming-normal init scaled by fan-in (gain for ReLU).
pub fn kaiming(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    normal_tensor(rng, shape, (2.0 / fan_in.max(1) as f64).sqrt())
}
