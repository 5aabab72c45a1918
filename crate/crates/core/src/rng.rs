//! Deterministic random numbers.
//!
//! Everything stochastic in this crate flows through [`Rng`], a splitmix64
//! generator. The algorithm is fixed and documented (README, "Randomness")
//! so that results are reproducible bit-for-bit across platforms and so
//! that other implementations can replay the same streams:
//!
//! * state update: `s += 0x9E3779B97F4A7C15`; output = `mix64(s)`
//! * `mix64(z)`: `z ^= z >> 30; z *= 0xBF58476D1CE4E5B9; z ^= z >> 27;
//!   z *= 0x94D049BB133111EB; z ^= z >> 31`
//! * uniform in [0,1): `(next() >> 11) as f64 * 2^-53`
//! * standard normal: Box–Muller, `sqrt(-2 ln(1-u1)) * cos(2 pi u2)`,
//!   one normal per uniform pair (the sine partner is discarded)
//! * bounded integer in [0, n): 128-bit multiply-shift `(next() * n) >> 64`
//!   (Lemire reduction without the rejection step; the modulo bias is below
//!   2^-40 for every n used here and is irrelevant next to Monte-Carlo noise)
//! * child stream b of seed s: seeded with `mix64(s + (b+1) * GOLDEN)`

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    z
}

/// Splitmix64 stream.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Deterministic child stream, independent of how many draws the parent
    /// has made. Used for bootstrap replicates and per-replication seeds so
    /// that work units can run in any order.
    pub fn child(seed: u64, index: u64) -> Self {
        Rng::new(Rng::child_seed(seed, index))
    }

    /// The seed value [`Rng::child`] starts from, for callers that need to
    /// derive further children from it.
    pub fn child_seed(seed: u64, index: u64) -> u64 {
        mix64(seed.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN)))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix64(self.state)
    }

    /// Uniform draw in [0, 1) with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box–Muller (cosine branch only).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Sample `n` indices uniformly from [0, len) with replacement.
    pub fn resample_indices(&mut self, len: usize, n: usize) -> Vec<usize> {
        (0..n).map(|_| self.below(len)).collect()
    }
}
