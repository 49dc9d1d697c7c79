//! Deterministic pseudo-random generator (splitmix64).
//!
//! Every stochastic choice in the crate (init, sampling, shuffling, page
//! content) flows through this generator, so a run is a pure function of its
//! seeds. splitmix64 is tiny, passes BigCrush, and has a trivially portable
//! definition, which matters more here than cryptographic strength.

use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1), 53-bit resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform<S: Scalar>(&mut self, lo: f64, hi: f64) -> S {
        S::from_f64(lo + (hi - lo) * self.next_f64())
    }

    /// Uniform integer in [0, n). Rejection-free modulo is fine at these sizes.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "Rng::below(0)");
        (self.next_u64() % n as u64) as usize
    }

    /// Derive an independent stream. Used to give each page / sample its own
    /// generator so corpus layout changes do not ripple across samples.
    pub fn split(&mut self) -> Rng {
        Rng::new(self.next_u64() ^ 0xA02B_DBF7_BB3C_0A7A)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// k distinct values from [0, n), ascending.
    pub fn distinct_below(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "Rng::distinct_below: k > n");
        let mut pool: Vec<usize> = (0..n).collect();
        self.shuffle(&mut pool);
        let mut picked: Vec<usize> = pool[..k].to_vec();
        picked.sort_unstable();
        picked
    }
}
