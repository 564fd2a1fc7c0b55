//! Seeded random streams with labeled, order-independent child streams.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

/// Deterministic random stream.
///
/// Identical seeds produce identical streams. Child streams are derived
/// from `(seed, label)` only — never from the parent's current position —
/// so per-subject work can run in any order (or in parallel) without
/// changing results.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream: ChaCha12Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            stream: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derive an independent child stream from this stream's seed and a
    /// label. Does not consume any state from `self`.
    pub fn child(&self, label: &str) -> Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(label.as_bytes());
        let digest = h.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        Rng::new(u64::from_le_bytes(bytes))
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.stream.random::<f64>()
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.stream)
    }

    /// Normal draw with the given mean and standard deviation.
    pub fn normal_with(&mut self, mean: f64, sd: f64) -> f64 {
        mean + sd * self.normal()
    }

    /// Bernoulli draw as 0/1.
    pub fn bernoulli(&mut self, p: f64) -> u8 {
        u8::from(self.uniform() < p)
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        // Fisher-Yates on the owned stream.
        for i in (1..xs.len()).rev() {
            let j = self.stream.random_range(0..=i);
            xs.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_seed_identical_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn children_depend_on_label_not_position() {
        let mut parent = Rng::new(7);
        let before = parent.child("sim");
        // Consume parent state; child derivation must not care.
        for _ in 0..10 {
            parent.uniform();
        }
        let after = parent.child("sim");
        let mut x = before.clone();
        let mut y = after.clone();
        for _ in 0..50 {
            assert_eq!(x.uniform().to_bits(), y.uniform().to_bits());
        }
    }

    #[test]
    fn distinct_labels_distinct_streams() {
        let parent = Rng::new(7);
        let mut a = parent.child("moe:1");
        let mut b = parent.child("moe:2");
        let same = (0..20).all(|_| a.uniform() == b.uniform());
        assert!(!same);
    }

    #[test]
    fn bernoulli_mean_concentrates() {
        let mut rng = Rng::new(3);
        let n = 20_000;
        let mean = (0..n).map(|_| rng.bernoulli(0.3) as f64).sum::<f64>() / n as f64;
        assert!((mean - 0.3).abs() < 0.02);
    }
}
