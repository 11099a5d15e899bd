//! Stateless derivation of random streams.
//!
//! Every source of randomness in a run is a ChaCha stream derived from
//! `(master seed, purpose label, index)`. A batch, a Gumbel draw, or an
//! evaluation cell can therefore be regenerated at any time without replaying
//! the steps before it, which is what makes runs resumable and evaluation
//! cells order-independent.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Derives an independent RNG for `(seed, label, index)`.
pub fn stream(seed: u64, label: &str, index: u64) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([0u8]);
    hasher.update(label.as_bytes());
    hasher.update([0u8]);
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(key)
}

/// Uniform draw from the open interval (0, 1).
pub fn uniform_open01(rng: &mut impl RngCore) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 && u < 1.0 {
            return u;
        }
    }
}

/// Standard Gumbel(0, 1) sample.
pub fn gumbel(rng: &mut impl RngCore) -> f64 {
    let u = uniform_open01(rng);
    -(-u.ln()).ln()
}

/// Standard normal sample (Box-Muller).
pub fn normal(rng: &mut impl RngCore) -> f64 {
    let u1 = uniform_open01(rng);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Seeded permutation of `0..n` (Fisher-Yates).
pub fn permutation(rng: &mut impl RngCore, n: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    perm
}
