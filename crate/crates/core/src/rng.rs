//! Seeded pseudo random number generation.
//!
//! The generator is xoshiro256** whose 256-bit state is filled from four
//! consecutive SplitMix64 outputs. Both algorithms are reproduced here bit
//! for bit so that runs can be replayed by other implementations:
//!
//! ```text
//! splitmix64(state):
//!     state += 0x9E3779B97F4A7C15
//!     z = state
//!     z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//!     z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//!     return z ^ (z >> 31)
//!
//! xoshiro256**(s):
//!     result = rotl(s1 * 5, 7) * 9
//!     t = s1 << 17
//!     s2 ^= s0; s3 ^= s1; s1 ^= s2; s0 ^= s3
//!     s2 ^= t;  s3 = rotl(s3, 45)
//!     return result
//! ```
//!
//! All multiplications and additions wrap modulo 2^64.
//!
//! * `uniform()` is `(next_u64() >> 11) * 2^-53`, in `[0, 1)`.
//! * `normal()` is Box-Muller on `u1 = 1 - uniform()` and `u2 = uniform()`,
//!   returning `sqrt(-2 ln u1) * cos(2 pi u2)`; the sine branch is discarded.
//! * `below(n)` is `next_u64() % n`.
//! * Derived streams ([`Rng::derive`]) fold each tag into the seed with
//!   `seed = splitmix64(seed ^ tag)`, starting from the parent seed.

/// One SplitMix64 step on `state`, returning the mixed output.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
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
        Self { s }
    }

    /// Independent stream keyed by `seed` and a sequence of tags.
    pub fn derive(seed: u64, tags: &[u64]) -> Self {
        let mut acc = seed;
        for &tag in tags {
            let mut st = acc ^ tag;
            acc = splitmix64(&mut st);
        }
        Self::new(acc)
    }

    pub fn next_u64(&mut self) -> u64 {
        let [s0, s1, s2, s3] = &mut self.s;
        let result = s1.wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = *s1 << 17;
        *s2 ^= *s0;
        *s3 ^= *s1;
        *s1 ^= *s2;
        *s0 ^= *s3;
        *s2 ^= t;
        *s3 = s3.rotate_left(45);
        result
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw from the open interval `(0, 1)`.
    pub fn open_unit(&mut self) -> f64 {
        loop {
            let u = self.uniform();
            if u > 0.0 {
                return u;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        (self.next_u64() % n as u64) as usize
    }

    /// Samples an index from unnormalized nonnegative weights.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.uniform() * total;
        for (i, &w) in weights.iter().enumerate() {
            if u < w {
                return i;
            }
            u -= w;
        }
        weights.len() - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_values() {
        // Reference outputs of SplitMix64 seeded with 0.
        let mut s = 0u64;
        assert_eq!(splitmix64(&mut s), 0xE220_A839_7B1D_CDAF);
        assert_eq!(splitmix64(&mut s), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(splitmix64(&mut s), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        assert_ne!(Rng::derive(42, &[1]).next_u64(), Rng::derive(42, &[2]).next_u64());
    }

    #[test]
    fn uniform_in_range_and_normal_moments() {
        let mut r = Rng::new(7);
        let n = 20000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
            let z = r.normal();
            sum += z;
            sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
