use rand::distr::{Distribution, Open01};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

/// A reproducible random stream keyed by `(seed, stream_id)`.
///
/// Backed by ChaCha20: the seed expands into the key and the stream id
/// selects one of 2^64 independent keystreams, so different ids never
/// overlap. Gaussian draws use the ziggurat sampler of `rand_distr`
/// (`StandardNormal`); uniform draws on the open interval use `Open01`.
///
/// A stream is a plain value. Concurrent tasks must each derive their own
/// stream id rather than share an instance.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha20Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        RngStream {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Number of 32-bit words consumed so far.
    pub fn word_position(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn gaussian(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn gaussian_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.gaussian()).collect()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform on the open interval `(0, 1)`.
    pub fn uniform_open(&mut self) -> f64 {
        Open01.sample(&mut self.inner)
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }
}

/// Samples `n` i.i.d. standard normal draws from `rng`.
pub fn sample_gaussian(rng: &mut RngStream, n: usize) -> Vec<f64> {
    rng.gaussian_vec(n)
}

/// Stream-id layout. Every consumer of randomness draws from its own
/// namespace so adding draws in one place never shifts another.
pub mod streams {
    const NS_SHIFT: u32 = 48;

    /// Ground-truth feature matrix.
    pub const FEATURES: u64 = 0;

    /// Synthetic training batch `index`.
    pub fn batch(index: u64) -> u64 {
        (1 << NS_SHIFT) | index
    }

    /// Initialization `attempt` of SAE `sae` (attempt 0 is the first init).
    pub fn sae_init(sae: usize, attempt: u32) -> u64 {
        (2 << NS_SHIFT) | ((sae as u64) << 16) | attempt as u64
    }

    /// Held-out evaluation batches.
    pub fn eval(index: u64) -> u64 {
        (3 << NS_SHIFT) | index
    }
}
