//! Seeded random streams. Every consumer of randomness gets its own ChaCha
//! stream derived from the single user seed, so enabling one component
//! never shifts the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    EncoderInit = 1,
    HlrInit = 2,
    Shuffle = 3,
    Pairing = 4,
    MixupWeights = 5,
    Generator = 6,
    Split = 7,
    Check = 8,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Matrix of independent `N(0, std^2)` draws, filled row-major.
pub fn gaussian_matrix<R: rand::Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            x * std
        })
        .collect();
    Matrix::from_vec(rows, cols, data)
}
