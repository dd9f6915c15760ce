//! Deterministic random number generation.
//!
//! All stochastic code in the crate draws from [`DetRng`], a thin wrapper
//! around the counter-based ChaCha8 generator with an explicit Box-Muller
//! normal transform. ChaCha output is specified bit-exactly and the
//! uniform/normal constructions below use only portable f64 arithmetic, so
//! identical seeds give identical streams on every platform.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeded generator with independent streams.
#[derive(Debug, Clone)]
pub struct DetRng {
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl DetRng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// Independent stream for the same seed (parallel chains, per-epoch shuffles).
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            inner,
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on [0, 1) with 53 random mantissa bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n) via rejection-free scaling (n << 2^53).
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        let u = self.uniform();
        ((u * n as f64) as usize).min(n - 1)
    }

    /// Standard normal via the Box-Muller transform.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1]: avoids ln(0).
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal_scaled(&mut self, mean: f64, sd: f64) -> f64 {
        mean + sd * self.normal()
    }

    pub fn normal_pair(&mut self) -> [f64; 2] {
        [self.normal(), self.normal()]
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.index(i + 1);
            xs.swap(i, j);
        }
    }
}
