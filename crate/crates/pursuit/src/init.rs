//! Parameter initialization helpers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Xavier/Glorot uniform: U(-sqrt(6/(fan_in+fan_out)), +same).
pub fn xavier_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect()
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}
