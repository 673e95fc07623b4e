//! Deterministic random streams.
//!
//! Every source of randomness in the crate is a pure function of a
//! 64-bit key. Keys are derived by folding context words (seed, purpose
//! tag, iteration, record index, ...) through a splitmix64 chain, so
//! independent consumers never share a stream and results do not depend
//! on scheduling or worker count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::math;

/// Purpose tags for derived streams. Keeping them in one place avoids
/// accidental collisions between consumers.
pub mod tag {
    pub const INSTANCE: u64 = 0x01;
    pub const ROLLOUT_ACTIONS: u64 = 0x02;
    pub const SHUFFLE: u64 = 0x03;
    pub const ADV_SELECT: u64 = 0x04;
    pub const ATTACK: u64 = 0x05;
    pub const TRADES: u64 = 0x06;
    pub const MACER: u64 = 0x07;
    pub const CERT: u64 = 0x08;
    pub const BOOTSTRAP: u64 = 0x09;
    pub const INIT: u64 = 0x0a;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds context words into a single stream key.
pub fn mix(words: &[u64]) -> u64 {
    let mut acc = 0x243f_6a88_85a3_08d3u64; // arbitrary non-zero start
    for &w in words {
        acc = splitmix64(acc ^ w);
    }
    acc
}

/// A seeded ChaCha8 stream for general sampling.
pub fn stream(words: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(words))
}

/// A stream directly keyed by a caller-provided seed (used where an
/// external contract fixes the seed arithmetic, e.g. evaluation cells).
pub fn stream_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform draw in [0, 1).
#[inline]
pub fn unit_f32<R: Rng>(rng: &mut R) -> f32 {
    rng.random::<f32>()
}

/// Uniform draw in [lo, hi].
#[inline]
pub fn uniform_f32<R: Rng>(rng: &mut R, lo: f32, hi: f32) -> f32 {
    lo + (hi - lo) * rng.random::<f32>()
}

/// Counter-based Gaussian stream: Box-Muller over splitmix64 words.
///
/// The stream is a pure function of (key, draw index), so certificates
/// over distinct states can run in parallel while staying bit-identical
/// across runs.
#[derive(Clone, Debug)]
pub struct GaussianStream {
    key: u64,
    counter: u64,
    spare: Option<f64>,
}

impl GaussianStream {
    pub fn new(key: u64) -> Self {
        GaussianStream { key, counter: 0, spare: None }
    }

    #[inline]
    fn next_unit(&mut self) -> f64 {
        let word = splitmix64(self.key ^ splitmix64(self.counter));
        self.counter = self.counter.wrapping_add(1);
        // 53-bit mantissa in [0, 1)
        (word >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw.
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite.
        let u1 = 1.0 - self.next_unit();
        let u2 = self.next_unit();
        let r = math::sqrt(-2.0 * math::ln(u1));
        let theta = 2.0 * core::f64::consts::PI * u2;
        self.spare = Some(r * math::sin(theta));
        r * math::cos(theta)
    }

    pub fn next_gaussian_f32(&mut self) -> f32 {
        self.next_gaussian() as f32
    }
}
