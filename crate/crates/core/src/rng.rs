//! Deterministic random streams.
//!
//! Every stochastic choice in the pipeline draws from a [`DetRng`] derived
//! from `(master seed, domain, index)`. Streams for different (domain, index)
//! pairs are independent, so per-sample and per-probe work can run in any
//! order — or in parallel — without changing a single draw. The generator is
//! xoshiro256** seeded through SplitMix64; both are implemented here so the
//! exact bit sequence never depends on an external crate version.

use alloc::vec::Vec;

/// Purpose tag mixed into stream derivation. Keeps draws for unrelated
/// pipeline stages independent even when they share an index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    DataGen = 1,
    Poison = 2,
    EvalSplit = 3,
    ParamInit = 4,
    TrainShuffle = 5,
    TrainMask = 6,
    Probe = 7,
    Purify = 8,
    Baseline = 9,
    AblationMask = 10,
    Test = 11,
}

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// xoshiro256** stream with Box-Muller normal sampling.
#[derive(Debug, Clone)]
pub struct DetRng {
    s: [u64; 4],
    /// Cached second output of the last Box-Muller pair.
    spare_normal: Option<f64>,
}

impl DetRng {
    /// Stream from a bare seed.
    pub fn new(seed: u64) -> Self {
        Self::from_key(seed)
    }

    /// Stream for one unit of work: `(seed, domain, index)` fully identify it.
    pub fn derive(seed: u64, domain: Domain, index: u64) -> Self {
        let mut key = seed;
        // Two rounds of mixing separate the three components; a plain sum
        // would alias (seed+1, idx) with (seed, idx+1).
        let mut s = splitmix64(&mut key);
        key = s ^ (domain as u64).wrapping_mul(0x9e3779b97f4a7c15);
        s = splitmix64(&mut key);
        key = s ^ index.wrapping_mul(0xd1342543de82ef95);
        Self::from_key(key)
    }

    fn from_key(mut key: u64) -> Self {
        // xoshiro must not start at the all-zero state; SplitMix64 expansion
        // guarantees that with probability 1 - 2^-256.
        let s = [
            splitmix64(&mut key),
            splitmix64(&mut key),
            splitmix64(&mut key),
            splitmix64(&mut key),
        ];
        DetRng { s, spare_normal: None }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). n = 0 is a caller bug.
    #[inline]
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        // Multiply-shift map of the full 64-bit range onto [0, n); bias is
        // O(n / 2^64), far below anything our statistics can see.
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Standard normal via Box-Muller (pair cached).
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] so the log is finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * core::f64::consts::PI * u2;
        self.spare_normal = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }

    /// k distinct indices drawn uniformly from 0..n, in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        debug_assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        // Partial Fisher-Yates: the first k slots end up a uniform k-subset.
        for i in 0..k {
            let j = i + self.below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }

    /// Categorical draw from an (unnormalized is a bug) probability vector,
    /// by inverse CDF walk. Ties and rounding resolve to the last index.
    pub fn categorical(&mut self, p: &[f64]) -> usize {
        debug_assert!(!p.is_empty());
        let u = self.uniform();
        let mut acc = 0.0;
        for (i, &pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                return i;
            }
        }
        p.len() - 1
    }
}
