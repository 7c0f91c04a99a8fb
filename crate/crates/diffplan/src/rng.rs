//! Named, splittable random streams on top of a counter-based generator.
//!
//! Every stochastic operation in the crate takes an explicit [`StreamRng`].
//! A stream is identified by the root seed plus a label path, so two pieces
//! of code that derive differently-named streams never share randomness, no
//! matter how much either one consumes. This is what makes whole pipelines
//! reproducible from a single seed.

use rand::Rng as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(mut hash: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// A seedable, splittable random stream.
///
/// Internally a ChaCha8 counter-based generator keyed by the root seed, with
/// the derived label path selecting the ChaCha stream. Cloning a `StreamRng`
/// clones its position, so a clone replays the exact same draws.
#[derive(Clone, Debug)]
pub struct StreamRng {
    root: u64,
    path: u64,
    chacha: ChaCha8Rng,
}

impl StreamRng {
    /// Root stream for a seed.
    pub fn seed(root: u64) -> Self {
        Self::with_path(root, FNV_OFFSET)
    }

    fn with_path(root: u64, path: u64) -> Self {
        let mut chacha = ChaCha8Rng::seed_from_u64(root);
        chacha.set_stream(path);
        StreamRng { root, path, chacha }
    }

    /// Derive an independent child stream named by `label`.
    ///
    /// Derivation depends only on the parent's identity, never on how much
    /// the parent has already been consumed.
    pub fn stream(&self, label: &str) -> StreamRng {
        Self::with_path(self.root, fnv1a(self.path, label.as_bytes()))
    }

    /// Derive an independent child stream named by `label` and an index.
    pub fn stream_indexed(&self, label: &str, index: u64) -> StreamRng {
        let h = fnv1a(self.path, label.as_bytes());
        Self::with_path(self.root, fnv1a(h, &index.to_le_bytes()))
    }

    /// One standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.chacha.sample(StandardNormal)
    }

    /// `n` independent standard normal draws.
    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.chacha.random::<f64>()
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`. Panics if `n == 0`.
    pub fn uniform_usize(&mut self, n: usize) -> usize {
        assert!(n > 0, "uniform_usize over empty range");
        self.chacha.random_range(0..n)
    }
}
