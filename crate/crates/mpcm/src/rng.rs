//! Deterministic pseudo-random numbers.
//!
//! Everything stochastic in this crate (weight init, scene synthesis,
//! augmentation, shuffles) draws from [`Rng`], a SplitMix64 generator.
//! The entire state is a single `u64`, which makes checkpoint/resume
//! trivial and guarantees bit-identical streams for identical seeds.

/// SplitMix64: `state += 0x9E3779B97F4A7C15`, then two xor-shift/multiply
/// rounds of output mixing (Steele, Lea, Flood 2014).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Raw generator state, for serialization.
    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn from_state(state: u64) -> Self {
        Rng { state }
    }

    /// Derives an independent stream for a sub-task (e.g. one scene of a
    /// dataset) without disturbing this generator's own sequence.
    pub fn derive(&self, stream: u64) -> Rng {
        let mut r = Rng::new(
            self.state
                .wrapping_add(stream.wrapping_mul(0xA24B_AED4_963E_E407)),
        );
        r.next_u64();
        r
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Rejection-free modulo is fine here: n is tiny next to 2^64.
        (self.next_u64() % n as u64) as usize
    }

    pub fn chance(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
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
    fn unit_interval() {
        let mut r = Rng::new(1);
        for _ in 0..10_000 {
            let x = r.next_f64();
            assert!((0.0..1.0).contains(&x));
        }
    }

    #[test]
    fn chance_frequency_is_calibrated() {
        let mut r = Rng::new(42);
        let hits = (0..100_000).filter(|_| r.chance(0.3)).count();
        let freq = hits as f64 / 100_000.0;
        assert!((0.29..0.31).contains(&freq), "freq = {freq}");
    }

    #[test]
    fn derive_is_stable_and_does_not_advance() {
        let r = Rng::new(5);
        let mut d1 = r.derive(3);
        let mut d2 = r.derive(3);
        assert_eq!(d1.next_u64(), d2.next_u64());
        assert_eq!(r.state(), Rng::new(5).state());
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut r = Rng::new(9);
        let mut v: Vec<usize> = (0..50).collect();
        r.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }
}
