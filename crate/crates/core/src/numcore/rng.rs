//! Seeded random streams.
//!
//! The generator is ChaCha20 (RFC 7539 block function, 64-bit block counter)
//! as implemented by `rand_chacha`, keyed by `seed` expanded through
//! `SeedableRng::seed_from_u64`. Uniform draws on the open interval (0, 1) are
//! produced from one 64-bit word `w` as `((w >> 11) + 0.5) · 2⁻⁵³`, which never
//! returns 0 or 1. The stream position is a plain word counter, so a state can
//! be saved as `(seed, word_pos)` and restored exactly.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    inner: ChaCha20Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 32-bit words consumed so far.
    pub fn word_pos(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn restore(seed: u64, word_pos: u128) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_word_pos(word_pos);
        Self { seed, inner }
    }

    /// Derives an independent stream, e.g. one per worker or per purpose.
    pub fn fork(&mut self, tag: u64) -> Self {
        let s = self.inner.next_u64() ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        Self::new(s)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw strictly inside (0, 1).
    pub fn uniform_open(&mut self) -> f64 {
        let w = self.inner.next_u64() >> 11;
        (w as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in [lo, hi).
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        let w = self.inner.next_u64() >> 11;
        lo + (hi - lo) * (w as f64 * (1.0 / (1u64 << 53) as f64))
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        // Lemire's multiply-shift; bias is below 2⁻³² for the sizes used here.
        ((self.inner.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal draw (Box–Muller, one value per call).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform_open();
        let u2 = self.uniform_open();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `seed:word_pos`, the form stored in checkpoints.
    pub fn encode(&self) -> String {
        format!("{}:{}", self.seed, self.word_pos())
    }

    pub fn decode(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once(':')
            .ok_or_else(|| Error::Format(format!("bad rng state {s:?}")))?;
        let seed = a.parse().map_err(|_| Error::Format(format!("bad rng seed {a:?}")))?;
        let pos = b.parse().map_err(|_| Error::Format(format!("bad rng position {b:?}")))?;
        Ok(Self::restore(seed, pos))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = RngState::new(42);
        let mut b = RngState::new(42);
        for _ in 0..100 {
            assert_eq!(a.uniform_open().to_bits(), b.uniform_open().to_bits());
        }
    }

    #[test]
    fn restore_continues_stream() {
        let mut a = RngState::new(9);
        for _ in 0..37 {
            a.next_u64();
        }
        let mut b = RngState::decode(&a.encode()).unwrap();
        for _ in 0..10 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn uniform_is_open_interval() {
        let mut r = RngState::new(1);
        for _ in 0..10_000 {
            let u = r.uniform_open();
            assert!(u > 0.0 && u < 1.0);
        }
    }
}
