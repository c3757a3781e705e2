//! Deterministic, stateless RNG derivation.
//!
//! Every random draw in the crate comes from a stream derived as
//! `(master_seed, purpose, index)` — e.g. `("init", param_ordinal)` or
//! `("batch", iteration)`. No RNG state is carried across iterations, so
//! resuming a run from a checkpoint reproduces the exact draw sequence
//! without serializing generator state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// FNV-1a, used to fold purpose strings into the seed. Stable by definition,
/// unlike `DefaultHasher`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive an independent generator for `(master_seed, purpose, index)`.
pub fn stream(master_seed: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[0..8].copy_from_slice(&master_seed.to_le_bytes());
    seed[8..16].copy_from_slice(&fnv1a(purpose.as_bytes()).to_le_bytes());
    seed[16..24].copy_from_slice(&index.to_le_bytes());
    seed[24..32].copy_from_slice(&0x79746d74_u64.to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}

/// One standard-normal draw via Box–Muller. Consumes exactly two `f64`
/// draws from the generator, so sequences stay aligned across platforms.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1], keeps the log finite
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Fill with N(0, std^2) draws.
pub fn fill_normal<R: Rng>(rng: &mut R, std: f64, out: &mut [f32]) {
    for v in out {
        *v = (standard_normal(rng) * std) as f32;
    }
}

/// Kaiming (He) standard deviation for a ReLU-family layer.
pub fn kaiming_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}
