//! Deterministic random streams.
//!
//! Every stochastic component draws from its own named stream derived from the
//! master seed, so adding randomness to one component never shifts the draws
//! seen by another. Stream derivation hashes `(master_seed, name)` with
//! SHA-256; the digest becomes the ChaCha8 seed directly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// 32-byte seed for the stream `name` under `master_seed`.
pub fn stream_seed(master_seed: u64, name: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update([0u8]); // domain separator between seed bytes and name
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    seed
}

/// A fresh generator for the named stream.
pub fn named_stream(master_seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(stream_seed(master_seed, name))
}

/// Uniform draw in `(-bound, bound]`, used for weight init.
pub fn uniform_symmetric<R: Rng>(rng: &mut R, bound: f64) -> f64 {
    bound * (2.0 * rng.gen::<f64>() - 1.0)
}

/// Standard normal via Box-Muller. `1 - u` keeps the log argument in `(0, 1]`.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u: f64 = 1.0 - rng.gen::<f64>();
    let v: f64 = rng.gen();
    (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
}
