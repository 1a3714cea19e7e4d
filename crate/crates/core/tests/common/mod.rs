//! Oracles shared by the integration tests. They go through nalgebra and
//! never call into the library's own linear algebra.

#![allow(dead_code)]

use fedsoft::{Matrix, SimRng};
use nalgebra::DMatrix;

pub fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

pub fn from_na(m: &DMatrix<f64>) -> Matrix {
    Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn off_diag_sq(g: &DMatrix<f64>) -> f64 {
    let mut s = 0.0;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            if i != j {
                s += g[(i, j)].powi(2);
            }
        }
    }
    s
}

/// Penalty value computed from scratch.
pub fn penalty(b: &DMatrix<f64>, a: &DMatrix<f64>) -> f64 {
    off_diag_sq(&(b.transpose() * b)) + off_diag_sq(&(a * a.transpose()))
}

/// Central finite differences of [`penalty`] in every entry of `B` and `A`.
pub fn penalty_fd_grad(b: &DMatrix<f64>, a: &DMatrix<f64>, h: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut gb = DMatrix::zeros(b.nrows(), b.ncols());
    for i in 0..b.nrows() {
        for j in 0..b.ncols() {
            let (mut up, mut dn) = (b.clone(), b.clone());
            up[(i, j)] += h;
            dn[(i, j)] -= h;
            gb[(i, j)] = (penalty(&up, a) - penalty(&dn, a)) / (2.0 * h);
        }
    }
    let mut ga = DMatrix::zeros(a.nrows(), a.ncols());
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            let (mut up, mut dn) = (a.clone(), a.clone());
            up[(i, j)] += h;
            dn[(i, j)] -= h;
            ga[(i, j)] = (penalty(b, &up) - penalty(b, &dn)) / (2.0 * h);
        }
    }
    (gb, ga)
}

pub fn gaussian(rng: &mut SimRng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.standard_normal())
}

/// `n × k` matrix with orthonormal columns.
pub fn orthonormal_cols(rng: &mut SimRng, n: usize, k: usize) -> DMatrix<f64> {
    let q = gaussian(rng, n, k).qr().q();
    q.columns(0, k).into_owned()
}

/// Factors with mutually orthogonal columns of `B` and rows of `A`:
/// `B = U diag(sb)`, `A = diag(sa) Vᵀ`.
pub fn orthogonal_factors(rng: &mut SimRng, d: usize, l: usize, r: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let u = orthonormal_cols(rng, d, r);
    let v = orthonormal_cols(rng, l, r);
    let sb: Vec<f64> = (0..r).map(|_| rng.uniform_range(0.2, 3.0)).collect();
    let sa: Vec<f64> = (0..r).map(|_| rng.uniform_range(0.2, 3.0)).collect();
    let b = u * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(sb));
    let a = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(sa)) * v.transpose();
    (b, a)
}

/// Squared singular values of `m`, descending.
pub fn squared_singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = m.singular_values().iter().map(|s| s * s).collect();
    s.sort_by(|x, y| y.partial_cmp(x).unwrap());
    s
}

pub fn rel_err(got: &DMatrix<f64>, want: &DMatrix<f64>) -> f64 {
    (got - want).norm() / want.norm().max(f64::MIN_POSITIVE)
}
