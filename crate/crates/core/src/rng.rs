//! Deterministic random streams.
//!
//! Every stochastic site (initialization, weight noise, dropout masks,
//! shuffling, evaluation sampling) draws from its own ChaCha8 stream keyed by
//! `(global_seed, site, step)`. ChaCha is counter based, so a stream can be
//! reconstructed from those three numbers alone; no generator state needs to
//! be carried between steps or stored in checkpoints.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Scalar;

/// Stochastic site identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum Site {
    Init = 1,
    WeightNoise = 2,
    Dropout = 3,
    Shuffle = 4,
    Eval = 5,
    Synth = 6,
    Test = 7,
}

/// A reproducible random stream.
#[derive(Debug, Clone)]
pub struct RngStream {
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(global_seed: u64, site: Site, step: u64) -> Self {
        Self::with_site_id(global_seed, site as u32 as u64, step)
    }

    pub fn with_site_id(global_seed: u64, site_id: u64, step: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(global_seed);
        inner.set_stream(splitmix64(
            site_id.wrapping_mul(0x1000_0000_01B3) ^ splitmix64(step),
        ));
        Self { inner }
    }

    /// Quick stream for tests and one-off draws.
    pub fn from_seed(seed: u64) -> Self {
        Self::new(seed, Site::Test, 0)
    }

    pub fn normal<S: Scalar>(&mut self) -> S {
        S::standard_normal(&mut self.inner)
    }

    /// Uniform draw on `[lo, hi)`.
    pub fn uniform<S: Scalar>(&mut self, lo: S, hi: S) -> S {
        let u: f64 = self.inner.random();
        lo + (hi - lo) * S::c(u)
    }

    pub fn unit_f64(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
