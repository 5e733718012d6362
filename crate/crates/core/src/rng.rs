//! Seeded, splittable random streams.
//!
//! Every [`Rng`] is a ChaCha8 keystream (a counter-based generator) keyed by
//! a 64-bit stream key. [`Rng::split`] derives a child key from the parent
//! key and a child id without touching the parent's counter, so rollout `i`
//! of seed `s` draws the same numbers no matter how work is scheduled.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct Rng {
    key: u64,
    inner: ChaCha8Rng,
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn expand_key(key: u64) -> [u8; 32] {
    let mut seed = [0u8; 32];
    let mut state = key;
    for chunk in seed.chunks_exact_mut(8) {
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        chunk.copy_from_slice(&mix64(state).to_le_bytes());
    }
    seed
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::from_key(mix64(seed ^ 0x5EED_0F5E_D5EE_D000))
    }

    fn from_key(key: u64) -> Self {
        Self {
            key,
            inner: ChaCha8Rng::from_seed(expand_key(key)),
        }
    }

    /// Independent child stream. Does not advance `self`.
    pub fn split(&self, child_id: u64) -> Self {
        let label = mix64(child_id.wrapping_add(0xA076_1D64_78BD_642F));
        Self::from_key(mix64(self.key ^ label).wrapping_add(child_id))
    }

    /// Child stream labelled by name, e.g. `rng.split_named("contrastive")`.
    pub fn split_named(&self, name: &str) -> Self {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for &b in name.as_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x100_0000_01b3);
        }
        self.split(h)
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform in the open interval `(0, 1)`.
    pub fn uniform_open(&mut self) -> f64 {
        loop {
            let u = self.uniform();
            if u > 0.0 {
                return u;
            }
        }
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn standard_normal(&mut self) -> f64 {
        rand_distr::Distribution::sample(&rand_distr::StandardNormal, self)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        rand::Rng::random_range(self, 0..n)
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn split_ignores_parent_position() {
        let a = Rng::new(3);
        let mut b = Rng::new(3);
        for _ in 0..17 {
            b.next_u64();
        }
        let mut ca = a.split(5);
        let mut cb = b.split(5);
        assert_eq!(ca.next_u64(), cb.next_u64());
    }

    #[test]
    fn children_differ() {
        let root = Rng::new(1);
        let mut c0 = root.split(0);
        let mut c1 = root.split(1);
        let xs: Vec<u64> = (0..8).map(|_| c0.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| c1.next_u64()).collect();
        assert_ne!(xs, ys);
        // grandchildren of different children differ too
        assert_ne!(root.split(0).split(1).key(), root.split(1).split(0).key());
    }

    #[test]
    fn split_streams_uncorrelated() {
        let root = Rng::new(11);
        let mut a = root.split(0);
        let mut b = root.split(1);
        let n = 20_000;
        let mut sxy = 0.0;
        for _ in 0..n {
            sxy += (a.uniform() - 0.5) * (b.uniform() - 0.5);
        }
        // var of the product is 1/144; 5 sigma band
        let corr = sxy / n as f64 * 12.0;
        assert!(corr.abs() < 5.0 / (n as f64).sqrt(), "corr {corr}");
    }

    #[test]
    fn uniform_range_bounds() {
        let mut r = Rng::new(2);
        for _ in 0..1000 {
            let u = r.uniform_open();
            assert!(u > 0.0 && u < 1.0);
        }
    }
}
