//! Counter-based deterministic random streams.
//!
//! Every random decision in the crate is drawn from a stream addressed by a
//! key path: a root seed plus a sequence of integer ids (domain, epoch, row,
//! column, ...). Streams with different paths are statistically independent,
//! and the same path always reproduces the same draws regardless of
//! evaluation order. That makes masks replayable entry by entry and lets
//! linked imputation share draws across thinning scales by construction.
//!
//! The generator is a splitmix64 sequence seeded by an avalanche mix of the
//! key path. Key derivation costs a few multiplies, so creating one stream
//! per matrix entry is cheap.

use rand::RngCore;

/// Base mask sampling, one Bernoulli per (row, column).
pub const DOMAIN_MASK: u64 = 1;
/// Thinning decisions, keyed by (level, epoch, row, column).
pub const DOMAIN_THIN: u64 = 2;
/// Imputation noise, keyed by (tag, draw, row, column).
pub const DOMAIN_XI: u64 = 3;
/// Synthetic data generation.
pub const DOMAIN_DATA: u64 = 4;
/// Per-epoch visit order shuffles.
pub const DOMAIN_SHUFFLE: u64 = 5;
/// Sign draws for mechanism-estimate perturbations.
pub const DOMAIN_PERTURB: u64 = 6;
/// Monte Carlo bias draws.
pub const DOMAIN_MC: u64 = 7;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Address of a deterministic stream: a seed with zero or more ids absorbed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamKey(u64);

impl StreamKey {
    pub fn root(seed: u64) -> Self {
        StreamKey(mix(seed ^ GOLDEN))
    }

    /// Absorb one id. Order matters: `child(a).child(b) != child(b).child(a)`.
    #[inline]
    pub fn child(self, id: u64) -> Self {
        StreamKey(mix(
            self.0 ^ id.wrapping_mul(GOLDEN).wrapping_add(0x1F83_D9AB_FB41_BD6B)
        ))
    }

    #[inline]
    pub fn stream(self) -> DetRng {
        DetRng { state: self.0 }
    }
}

/// Splitmix64 generator addressed by a [`StreamKey`].
#[derive(Clone, Debug)]
pub struct DetRng {
    state: u64,
}

impl DetRng {
    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform draw in `[0, 1)` with 53 random bits.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Uniform integer in `[0, n)`; used for shuffles.
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_f64() * n as f64) as usize % n
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        rand::Rng::sample(self, rand_distr::StandardNormal)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }
}

impl RngCore for DetRng {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        DetRng::next_u64(self)
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        for chunk in dest.chunks_mut(8) {
            let v = DetRng::next_u64(self).to_le_bytes();
            chunk.copy_from_slice(&v[..chunk.len()]);
        }
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.fill_bytes(dest);
        Ok(())
    }
}

/// Deterministic Fisher-Yates permutation of `0..n`.
pub fn permutation(key: StreamKey, n: usize) -> Vec<usize> {
    let mut rng = key.stream();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.below(i + 1);
        order.swap(i, j);
    }
    order
}
