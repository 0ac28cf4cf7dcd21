//! Deterministic, splittable randomness.
//!
//! Every randomized operation in the crate is a pure function of
//! `(inputs, seed)`. Streams for sub-tasks (one per example, per step,
//! per sweep point, ...) are derived by hashing a label and counters
//! into a fresh seed, so adding work in one place never perturbs the
//! draws made elsewhere and parallel scheduling cannot change results.

const GAMMA: u64 = 0x9e3779b97f4a7c15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a list of counters.
pub fn derive(seed: u64, parts: &[u64]) -> u64 {
    let mut h = mix64(seed ^ 0x6a09e667f3bcc908);
    for &p in parts {
        h = mix64(h.wrapping_add(GAMMA) ^ mix64(p));
    }
    h
}

/// Derive a child seed from a parent seed and a string label plus counters.
pub fn derive_labeled(seed: u64, label: &str, parts: &[u64]) -> u64 {
    // FNV-1a over the label bytes, then fold in the counters.
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in label.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    derive(seed ^ mix64(h), parts)
}

/// A small splitmix64 generator. Cheap to construct, so the idiom is one
/// short-lived `Rng` per derived stream rather than one long-lived one.
#[derive(Clone, Debug)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: mix64(seed) }
    }

    pub fn from_parts(seed: u64, label: &str, parts: &[u64]) -> Self {
        Rng::new(derive_labeled(seed, label, parts))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        mix64(self.state)
    }

    /// Uniform in [0, 1).
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    #[inline]
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). n must be positive.
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Widening multiply; bias is < 2^-53 for the small n used here.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn chance(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64().max(f64::MIN_POSITIVE);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// A random permutation of 0..n.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }

    /// Sample k distinct indices from 0..n without replacement.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        debug_assert!(k <= n);
        let mut p = self.permutation(n);
        p.truncate(k);
        p
    }
}
