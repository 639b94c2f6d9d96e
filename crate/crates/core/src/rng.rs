//! Seeded, splittable random streams.
//!
//! Every stochastic operation in the crate is a deterministic function of an
//! [`RngStream`]: the same `(seed, stream)` pair yields the same sequence on
//! every platform and under any thread schedule. Parallel work splits the
//! stream with [`RngStream::substream`] instead of sharing state.
//!
//! The generator is xoshiro256++ with its state seeded through SplitMix64,
//! which is the reference initialization for that family.

use crate::fmath;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A deterministic random stream identified by `(seed, stream)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    state: [u64; 4],
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut mix = seed ^ GOLDEN.wrapping_mul(stream ^ 0x5851_F42D_4C95_7F2D);
        let state = [
            splitmix64(&mut mix),
            splitmix64(&mut mix),
            splitmix64(&mut mix),
            splitmix64(&mut mix),
        ];
        RngStream { seed, stream, state }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Derives an independent child stream. The child depends only on
    /// `(seed, stream, id)`, never on how much of the parent was consumed.
    pub fn substream(&self, id: u64) -> RngStream {
        let mut mix = self.stream ^ GOLDEN.wrapping_mul(id.wrapping_add(1));
        RngStream::new(self.seed, splitmix64(&mut mix))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[0]
            .wrapping_add(s[3])
            .rotate_left(23)
            .wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    #[inline]
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal draw via Box-Muller. Two uniforms are consumed per
    /// call, so the stream position stays input-independent.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64(); // (0, 1], keeps ln finite
        let u2 = self.next_f64();
        fmath::sqrt(-2.0 * fmath::ln(u1)) * fmath::cos(2.0 * fmath::PI * u2)
    }

    /// Bernoulli draw with probability `p`.
    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Uniform index in `[0, n)` via rejection-free scaling (fine for the
    /// shuffle sizes used here).
    #[inline]
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        let i = (self.next_f64() * n as f64) as usize;
        if i >= n {
            n - 1
        } else {
            i
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, slice: &mut [T]) {
        for i in (1..slice.len()).rev() {
            let j = self.index(i + 1);
            slice.swap(i, j);
        }
    }
}
