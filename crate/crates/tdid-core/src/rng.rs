//! Seeded pseudo-random number generation.
//!
//! Everything random in this crate (weight init, anchor sampling, dataset
//! synthesis) flows through [`SplitMix64`] so that a run is reproducible
//! bit-for-bit from a single 64-bit seed, on any platform, and so that a
//! reimplementation in another language can reproduce the same datasets.
//! The constants below are the ones published with the splitmix64 reference
//! implementation.

/// splitmix64 generator.
///
/// State update: `s += 0x9E3779B97F4A7C15`. Output mixing:
/// `z ^= z >> 30; z *= 0xBF58476D1CE4E5B9; z ^= z >> 27;
///  z *= 0x94D049BB133111EB; z ^= z >> 31`.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

const GAMMA: u64 = 0x9E3779B97F4A7C15;

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 bits of precision: `(next_u64 >> 11) / 2^53`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). `n` must be nonzero; uses a plain modulo,
    /// whose bias at our pool sizes (< 2^32) is far below 2^-32.
    pub fn next_below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        self.next_u64() % n
    }

    /// Derive an independent stream for a sub-task (scene index, layer index).
    /// Defined as `SplitMix64::new(seed ^ tag)` advanced once, so nearby tags
    /// land in unrelated parts of the sequence.
    pub fn substream(seed: u64, tag: u64) -> Self {
        let mut r = SplitMix64::new(seed ^ tag);
        let s = r.next_u64();
        SplitMix64::new(s)
    }

    /// Sample `k` distinct elements of `pool` without replacement, by partial
    /// Fisher-Yates. Order of the result is the draw order.
    pub fn sample<T: Copy>(&mut self, pool: &[T], k: usize) -> Vec<T> {
        let mut items: Vec<T> = pool.to_vec();
        let k = k.min(items.len());
        for i in 0..k {
            let j = i + self.next_below((items.len() - i) as u64) as usize;
            items.swap(i, j);
        }
        items.truncate(k);
        items
    }
}
