//! Counter-based splittable RNG.
//!
//! Every consumer of randomness (a rollout, an eval episode, an estimator's
//! milestone perturbation) gets its own stream keyed by
//! `(seed, role, iteration, index, ...)`. The generator is stateless up to a
//! counter, so results never depend on thread scheduling or on how many
//! workers share the job. Output is stable across platforms. Not
//! cryptographic.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer: full-avalanche 64-bit mix.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream roles, folded into the stream key so distinct uses of the same
/// `(seed, iteration, index)` tuple never collide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Rollout,
    Eval,
    Estimator,
    Env,
    Test,
}

impl Role {
    fn tag(self) -> u64 {
        match self {
            Role::Rollout => 0x01,
            Role::Eval => 0x02,
            Role::Estimator => 0x03,
            Role::Env => 0x04,
            Role::Test => 0x05,
        }
    }
}

/// A deterministic random stream: a key (which stream) plus a counter
/// (position within the stream).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamRng {
    key: u64,
    counter: u64,
}

impl StreamRng {
    /// Stream identified by a bare seed.
    pub fn new(seed: u64) -> Self {
        Self {
            key: mix64(seed ^ GOLDEN_GAMMA),
            counter: 0,
        }
    }

    /// Stream identified by `(seed, role, parts...)`.
    pub fn stream(seed: u64, role: Role, parts: &[u64]) -> Self {
        let mut key = mix64(seed ^ GOLDEN_GAMMA);
        key = mix64(key.wrapping_add(GOLDEN_GAMMA) ^ mix64(role.tag()));
        for &p in parts {
            key = mix64(key.wrapping_add(GOLDEN_GAMMA) ^ mix64(p));
        }
        Self { key, counter: 0 }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(
            self.key
                .wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)),
        )
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        const DEN: f64 = (1u64 << 53) as f64;
        ((self.next_u64() >> 11) as f64) / DEN
    }

    /// Uniform in `0..n`. Multiply-shift; bias is negligible for n << 2^64.
    #[inline]
    pub fn gen_range(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Bernoulli(p).
    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// `k` distinct values sampled uniformly from `1..=n`, sorted ascending.
    /// Partial Fisher-Yates; `k` is clamped to `n`.
    pub fn sample_distinct_sorted(&mut self, n: usize, k: usize) -> Vec<usize> {
        let k = k.min(n);
        let mut pool: Vec<usize> = (1..=n).collect();
        for i in 0..k {
            let j = i + self.gen_range((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        let mut picked = pool[..k].to_vec();
        picked.sort_unstable();
        picked
    }
}
