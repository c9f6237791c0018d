//! Counter-based deterministic random number generator.
//!
//! The generator emits `mix64(key ^ mix64(counter))` for an incrementing
//! counter, where `mix64` is the SplitMix64 finalizer. The same `(seed)`
//! therefore yields the same stream on every platform, the full state is two
//! `u64` words (trivially checkpointable), and independent substreams are
//! derived by key, not by jumping, so a substream's output never depends on
//! how much of the parent stream was consumed.
//!
//! ```
//! use ukd::rng::Rng;
//! let mut a = Rng::new(7);
//! let mut b = Rng::new(7);
//! assert_eq!(a.next_u64(), b.next_u64());
//! // Substreams with different tags are decorrelated but reproducible.
//! let mut s0 = Rng::new(7).substream(0);
//! let mut s1 = Rng::new(7).substream(1);
//! assert_ne!(s0.next_u64(), s1.next_u64());
//! ```

/// SplitMix64 finalizer: a bijective avalanche mix on `u64`.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based generator with an explicit two-word state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    key: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        // Mix the seed so nearby seeds produce unrelated keys.
        Rng { key: mix64(seed ^ 0xA076_1D64_78BD_642F), counter: 0 }
    }

    /// Derive an independent stream identified by `tag`.
    ///
    /// Derivation uses only the key, so substreams taken before or after
    /// consuming values are identical. Nested derivation is fine:
    /// `rng.substream(a).substream(b)` is a stable function of `(seed, a, b)`.
    pub fn substream(&self, tag: u64) -> Rng {
        Rng { key: mix64(self.key ^ mix64(tag ^ 0x8C5F_C2A5_4A86_3B1D)), counter: 0 }
    }

    /// Raw state, for checkpointing.
    pub fn state(&self) -> (u64, u64) {
        (self.key, self.counter)
    }

    /// Rebuild a generator from checkpointed state.
    pub fn from_state(key: u64, counter: u64) -> Self {
        Rng { key, counter }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let out = mix64(self.key ^ mix64(self.counter));
        self.counter = self.counter.wrapping_add(1);
        out
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`. `n` must be nonzero.
    ///
    /// Uses the fixed-point multiply reduction; the tiny modulo bias
    /// (< 2^-64 * n) is irrelevant here and the method is branch-free and
    /// platform-stable.
    #[inline]
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        (((self.next_u64() as u128) * (n as u128)) >> 64) as u64
    }

    pub fn below_usize(&mut self, n: usize) -> usize {
        self.below(n as u64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal via Box-Muller. Each call consumes two uniforms and
    /// discards the paired deviate, keeping the state exactly `(key, counter)`.
    pub fn normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.uniform();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Normal truncated to plus/minus two standard deviations by resampling.
    pub fn trunc_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below_usize(i + 1);
            xs.swap(i, j);
        }
    }

    /// `k` distinct indices drawn from `[0, n)`, in draw order.
    /// Partial Fisher-Yates over an index table; O(n) memory, exact.
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot draw {k} distinct from {n}");
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below_usize(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_seeds_give_identical_streams() {
        let mut a = Rng::new(123);
        let mut b = Rng::new(123);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn different_seeds_differ() {
        let mut a = Rng::new(1);
        let mut b = Rng::new(2);
        let same = (0..64).filter(|_| a.next_u64() == b.next_u64()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn substream_is_consumption_independent() {
        let mut parent = Rng::new(9);
        let early = parent.substream(42);
        for _ in 0..100 {
            parent.next_u64();
        }
        let late = parent.substream(42);
        assert_eq!(early, late);
    }

    #[test]
    fn state_roundtrip_resumes_stream() {
        let mut a = Rng::new(5);
        for _ in 0..17 {
            a.next_u64();
        }
        let (k, c) = a.state();
        let mut b = Rng::from_state(k, c);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn uniform_is_in_unit_interval_and_roughly_uniform() {
        let mut rng = Rng::new(77);
        let n = 20_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
            sum += u;
        }
        let mean = sum / n as f64;
        // Standard error is ~0.002; allow five of them.
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut rng = Rng::new(3);
        let n = 20_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let z = rng.normal();
            s1 += z;
            s2 += z * z;
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn below_covers_range_without_out_of_bounds() {
        let mut rng = Rng::new(11);
        let mut seen = [false; 7];
        for _ in 0..1000 {
            seen[rng.below_usize(7)] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn sample_distinct_is_distinct_and_in_range() {
        let mut rng = Rng::new(8);
        let picks = rng.sample_distinct(30, 12);
        assert_eq!(picks.len(), 12);
        let mut sorted = picks.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 12);
        assert!(picks.iter().all(|&i| i < 30));
    }

    #[test]
    fn shuffle_is_a_permutation_and_seed_stable() {
        let mut v1: Vec<u32> = (0..50).collect();
        let mut v2: Vec<u32> = (0..50).collect();
        Rng::new(4).shuffle(&mut v1);
        Rng::new(4).shuffle(&mut v2);
        assert_eq!(v1, v2);
        let mut sorted = v1.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }
}
