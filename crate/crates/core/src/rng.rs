//! Deterministic, splittable random numbers.
//!
//! `SeededRng` is xoshiro256** whose 256-bit state is expanded from a 64-bit
//! seed with SplitMix64. Child generators are derived from the *seed* and a
//! list of integer keys (never from the parent's running state), so a child
//! depends only on `(seed, keys)` and not on how many siblings were created
//! before it or how far the parent has advanced.
//!
//! Floating-point draws use the top 53 bits of a `u64`, giving values on
//! `[0, 1)` with uniform spacing `2^-53`. Nothing here depends on platform
//! word size or on a third-party RNG's stability policy, so sequences are
//! bit-identical everywhere.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// The SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and an ordered list of keys.
///
/// `split_seed(s, &[a, b])` is a pure function; the same inputs always give
/// the same child and distinct key paths give (with overwhelming
/// probability) unrelated children.
pub fn split_seed(seed: u64, keys: &[u64]) -> u64 {
    let mut h = mix64(seed.wrapping_add(GOLDEN));
    for (depth, &k) in keys.iter().enumerate() {
        h = mix64(h ^ mix64(k.wrapping_add(GOLDEN.wrapping_mul(depth as u64 + 2))));
    }
    h
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeededRng {
    seed: u64,
    s: [u64; 4],
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        let mut x = seed;
        let mut s = [0u64; 4];
        for slot in &mut s {
            x = x.wrapping_add(GOLDEN);
            *slot = mix64(x);
        }
        // xoshiro must not start from the all-zero state.
        if s == [0; 4] {
            s[0] = GOLDEN;
        }
        SeededRng { seed, s }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child generator keyed by `keys`, independent of this generator's position.
    pub fn split(&self, keys: &[u64]) -> SeededRng {
        SeededRng::new(split_seed(self.seed, keys))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform on `[0, 1)`.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `[lo, hi)`. Caller guarantees `lo < hi`.
    #[inline]
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let v = lo + (hi - lo) * self.next_f64();
        // lo + (hi-lo)*u can round up to hi when the interval is tiny.
        if v >= hi {
            lo.max(prev_float(hi))
        } else {
            v
        }
    }

    /// Uniform integer on `[0, n)` by rejection sampling. `n` must be > 0.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Uniform integer on the closed range `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: i64, hi: i64) -> i64 {
        assert!(lo <= hi, "empty range {lo}..={hi}");
        lo + self.below((hi - lo) as u64 + 1) as i64
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

fn prev_float(x: f64) -> f64 {
    if x > 0.0 {
        f64::from_bits(x.to_bits() - 1)
    } else if x < 0.0 {
        f64::from_bits(x.to_bits() + 1)
    } else {
        -f64::from_bits(1)
    }
}
