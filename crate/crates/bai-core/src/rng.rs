//! Seeded random streams.
//!
//! Every stochastic choice in the crate draws from a ChaCha8 stream keyed by
//! (run seed, domain, indices…). Parallel rollouts get independent streams, so
//! outputs never depend on scheduling, and the raw-u64 helpers below are the
//! only bridge from bits to floats/ranges — no dependence on `rand`'s
//! distribution internals.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Stream domains. New domains get new constants; never reuse.
#[derive(Clone, Copy, Debug)]
pub enum Domain {
    ParamInit = 1,
    DataGen = 2,
    Markov = 3,
    SftBatch = 4,
    Rollout = 5,
    PpoShuffle = 6,
    Prompt = 7,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive an independent ChaCha8 stream from a seed, a domain and indices.
pub fn stream(seed: u64, domain: Domain, idx: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix(seed ^ 0xb5ad4eceda1ce2a9);
    state = splitmix(state ^ (domain as u64).wrapping_mul(0x9e3779b97f4a7c15));
    for (i, v) in idx.iter().enumerate() {
        state = splitmix(state ^ v.wrapping_add((i as u64 + 1).wrapping_mul(0x6a09e667f3bcc909)));
    }
    let mut key = [0u8; 32];
    let mut w = state;
    for chunk in key.chunks_mut(8) {
        w = splitmix(w);
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Uniform f64 in [0, 1), 53 random bits.
pub fn uniform_f64(rng: &mut ChaCha8Rng) -> f64 {
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    (rng.next_u64() >> 11) as f64 * SCALE
}

/// Uniform usize in [0, n), unbiased via rejection.
pub fn uniform_range(rng: &mut ChaCha8Rng, n: usize) -> usize {
    assert!(n > 0, "uniform_range over empty range");
    let n = n as u64;
    let zone = u64::MAX - (u64::MAX % n);
    loop {
        let v = rng.next_u64();
        if v < zone {
            return (v % n) as usize;
        }
    }
}

/// Standard normal via the Marsaglia polar method (deterministic ln/sqrt only).
/// One value per call; the spare is deliberately discarded to keep per-call
/// stream consumption simple to reason about.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u = 2.0 * uniform_f64(rng) - 1.0;
        let v = 2.0 * uniform_f64(rng) - 1.0;
        let s = u * u + v * v;
        if s > 0.0 && s < 1.0 {
            return u * (-2.0 * crate::det::ln(s) / s).sqrt();
        }
    }
}

/// Fisher–Yates shuffle driven by this module's range helper.
pub fn shuffle<T>(rng: &mut ChaCha8Rng, xs: &mut [T]) {
    for i in (1..xs.len()).rev() {
        let j = uniform_range(rng, i + 1);
        xs.swap(i, j);
    }
}
