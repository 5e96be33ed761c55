//! Deterministic pseudo-random number generation.
//!
//! Everything seeded flows through [`Rng`] (xoshiro256++ seeded via
//! splitmix64) so that the same seed reproduces the same experiment
//! bit-for-bit, independent of platform or feature flags. Derived streams
//! ([`Rng::derive`]) keep independent concerns (parameter init, batch
//! shuffling, scene synthesis, label noise) from perturbing each other.

use crate::math;
use alloc::vec::Vec;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct Rng {
    s: [u64; 4],
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng { s }
    }

    /// Independent stream labeled by `tag`; same (seed, tag) gives the same
    /// stream regardless of what other streams were drawn from.
    pub fn derive(seed: u64, tag: &str) -> Self {
        Rng::new(seed ^ math::fnv1a64(tag.as_bytes()))
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[0]
            .wrapping_add(self.s[3])
            .rotate_left(23)
            .wrapping_add(self.s[0]);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53-bit resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let mut u1 = self.uniform();
        if u1 <= 0.0 {
            u1 = f64::MIN_POSITIVE;
        }
        let u2 = self.uniform();
        math::sqrt(-2.0 * math::ln(u1)) * math::cos(2.0 * math::PI * u2)
    }

    /// Normal(0, sigma) truncated to [-2 sigma, 2 sigma] by rejection.
    pub fn trunc_normal(&mut self, sigma: f64) -> f64 {
        if sigma == 0.0 {
            return 0.0;
        }
        loop {
            let x = self.normal();
            if x.abs() <= 2.0 {
                return x * sigma;
            }
        }
    }

    /// Uniformly random unit 3-vector.
    pub fn unit_vector3(&mut self) -> [f64; 3] {
        loop {
            let v = [self.normal(), self.normal(), self.normal()];
            let n = math::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
            if n > 1e-12 {
                return [v[0] / n, v[1] / n, v[2] / n];
            }
        }
    }

    /// Fisher-Yates shuffle of indices 0..n.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }
}

/// Categorical sampler over class indices with uniform or Zipf weights.
#[derive(Clone, Debug)]
pub struct ClassSampler {
    cumulative: Vec<f64>,
}

impl ClassSampler {
    pub fn uniform(num_classes: usize) -> Self {
        Self::from_weights((0..num_classes).map(|_| 1.0).collect())
    }

    /// Zipf weights w_k = 1 / (k+1)^s over ranks 0..num_classes.
    pub fn zipf(num_classes: usize, s: f64) -> Self {
        Self::from_weights(
            (0..num_classes)
                .map(|k| 1.0 / math::powf((k + 1) as f64, s))
                .collect(),
        )
    }

    fn from_weights(weights: Vec<f64>) -> Self {
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();
        ClassSampler { cumulative }
    }

    pub fn sample(&self, rng: &mut Rng) -> usize {
        let u = rng.uniform();
        match self
            .cumulative
            .iter()
            .position(|&c| u < c)
        {
            Some(i) => i,
            None => self.cumulative.len() - 1,
        }
    }

    pub fn probability(&self, class: usize) -> f64 {
        let prev = if class == 0 {
            0.0
        } else {
            self.cumulative[class - 1]
        };
        self.cumulative[class] - prev
    }
}
