//! Dense linear algebra and seeded randomness shared by every other module.

mod matrix;
mod rng;

pub use matrix::Matrix;
pub use rng::{SimRng, Stream};

/// Squared Frobenius norm of `m`.
pub fn frobenius_sq(m: &Matrix) -> f64 {
    m.frobenius_sq()
}

pub fn gaussian_matrix(rng: &mut SimRng, rows: usize, cols: usize, stddev: f64) -> Matrix {
    rng.gaussian_matrix(rows, cols, stddev)
}
