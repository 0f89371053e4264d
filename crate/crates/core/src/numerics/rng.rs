//! Seeded, splittable random source.
//!
//! Every stochastic stage (weight init, dataset sampling, training noise,
//! fusion noise, verification inputs) owns an [`Rng`] derived from a 64-bit
//! seed. `split` derives an independent child stream from a parent seed and a
//! tag, so per-layer training streams can run in any order (or on any thread)
//! and still reproduce bit-identically.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Matrix, Vector};

/// SplitMix64 finalizer; decorrelates nearby seeds and tags.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Counter-based generator (ChaCha8 core) identified by a 64-bit seed.
///
/// The identity seed is recoverable via [`Rng::seed`], so a stream recorded
/// in a checkpoint can be replayed later: `Rng::new(recorded_seed)` always
/// restarts the exact same sequence.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// The identity seed this stream started from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives an independent child stream. Pure function of `(seed, tag)`:
    /// unaffected by how much the parent has already drawn.
    pub fn split(&self, tag: u64) -> Rng {
        Rng::new(mix64(self.seed ^ mix64(tag)))
    }

    /// One standard normal draw.
    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Vector of iid standard normal draws.
    pub fn gaussian(&mut self, dim: usize) -> Vector {
        Vector::from_vec((0..dim).map(|_| self.standard_normal()).collect())
    }

    /// Matrix of iid standard normal draws, filled row-major.
    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| self.standard_normal()).collect();
        Matrix::from_vec(rows, cols, data).expect("buffer length matches by construction")
    }
}

/// Free-function form of [`Rng::gaussian`].
pub fn gaussian(rng: &mut Rng, dim: usize) -> Vector {
    rng.gaussian(dim)
}
