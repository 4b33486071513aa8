//! Hierarchical, counter-based random-number streams.
//!
//! Every consumer of randomness derives its own generator from a master seed
//! plus a key path (repetition, replanning window, realization, role, ...).
//! Streams never share mutable state, so repetitions and realizations can be
//! simulated in parallel while staying bit-reproducible: the same master seed
//! and key path always yields the same increments.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

/// Stream roles, used as the last component of a key path.
pub mod role {
    pub const INITIAL_ENSEMBLE: u64 = 1;
    pub const FORWARD_NOISE: u64 = 2;
    pub const TWIN_INIT: u64 = 3;
    pub const TWIN_NOISE: u64 = 4;
    pub const OBS_NOISE: u64 = 5;
    pub const SOLVER: u64 = 6;
}

/// Factory for independent sub-streams of a master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStreams {
    state: u64,
}

// splitmix64 finalizer; a full-avalanche mixer, so nearby key paths yield
// unrelated seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl RngStreams {
    pub fn new(master_seed: u64) -> Self {
        Self {
            state: mix(master_seed),
        }
    }

    /// Narrows the stream family by one key component.
    pub fn scoped(&self, key: u64) -> Self {
        Self {
            state: mix(self.state ^ mix(key)),
        }
    }

    /// Generator for the given key path relative to this scope.
    pub fn stream(&self, keys: &[u64]) -> ChaCha12Rng {
        let mut scope = *self;
        for &k in keys {
            scope = scope.scoped(k);
        }
        ChaCha12Rng::seed_from_u64(scope.state)
    }
}

/// Draws a `dim`-vector of independent `N(0, scale^2)` entries.
pub fn normal_vector(rng: &mut impl Rng, dim: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        scale * z
    })
}

/// Fills an existing vector with independent `N(0, scale^2)` entries.
pub fn fill_normal_vector(rng: &mut impl Rng, out: &mut DVector<f64>, scale: f64) {
    for v in out.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = scale * z;
    }
}

/// Draws a `rows x cols` matrix of independent standard normals
/// (column-major fill order, matching ensemble member layout).
pub fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    DMatrix::from_column_slice(rows, cols, &data)
}
