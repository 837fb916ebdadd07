//! Seeded, splittable random streams.
//!
//! Every stochastic path draws from a `ChaCha8Rng` derived from one root seed
//! and a purpose tag, so runs are reproducible and parallel work can take
//! independent streams without coordinating.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Lower edge of the noise band; uniforms are clamped to `[NOISE_EPS, 1 - NOISE_EPS]`.
pub const NOISE_EPS: f64 = 1e-6;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for `tag` under `seed`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ tag.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Stream `stream` of the generator seeded with `seed`.
pub fn stream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Purpose tags for derived seeds.
pub mod tags {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const TRAIN_NOISE: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const ATTACK: u64 = 5;
    pub const NOISE_INPUT: u64 = 6;
    pub const RANDOM_INPUT: u64 = 7;
    pub const COMPETITION: u64 = 8;
}

/// Uniform draw clamped into the noise band.
pub fn uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    clamp_noise(rng.gen::<f64>())
}

pub fn clamp_noise(u: f64) -> f64 {
    u.clamp(NOISE_EPS, 1.0 - NOISE_EPS)
}

pub fn uniforms<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| uniform(rng)).collect()
}
