//! LoRA adapters: forward pass, orthogonality penalty and per-rank scores.
//!
//! An adapter adapts a frozen `d x l` weight `theta_p` through the product of
//! `B` (`d x r`) and `A` (`r x l`), scaled by `alpha / r`. The penalty
//! `|BᵀB - diag(BᵀB)|² + |AAᵀ - diag(AAᵀ)|²` pushes the columns of `B` and
//! rows of `A` towards mutual orthogonality; under exact orthogonality
//! `|BA|² = Σᵢ |B[:,i]|² |A[i,:]|²`, so the per-rank score
//! `|B[:,i]|² |A[i,:]|²` behaves like a squared singular value of `BA`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::{Matrix, SimRng};

/// A pair of LoRA-shaped matrices: a `d x r` left factor and an `r x l`
/// right factor. Used for adapters, updates and error memories alike.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Factors {
    pub b: Matrix,
    pub a: Matrix,
}

impl Factors {
    pub fn new(b: Matrix, a: Matrix) -> Result<Self> {
        if b.cols() != a.rows() {
            return Err(Error::DimensionMismatch {
                op: "lora factors",
                left: b.shape(),
                right: a.shape(),
            });
        }
        Ok(Self { b, a })
    }

    pub fn zeros(d: usize, l: usize, rank: usize) -> Self {
        Self {
            b: Matrix::zeros(d, rank),
            a: Matrix::zeros(rank, l),
        }
    }

    pub fn rank(&self) -> usize {
        self.b.cols()
    }

    pub fn d(&self) -> usize {
        self.b.rows()
    }

    pub fn l(&self) -> usize {
        self.a.cols()
    }

    /// Number of parameters, `r (d + l)`.
    pub fn param_count(&self) -> usize {
        self.rank() * (self.d() + self.l())
    }

    /// `|B|² + |A|²`, the squared norm of the concatenated factors.
    pub fn frobenius_sq(&self) -> f64 {
        self.b.frobenius_sq() + self.a.frobenius_sq()
    }

    pub fn count_nonzero(&self) -> usize {
        self.b.count_nonzero() + self.a.count_nonzero()
    }

    pub fn add(&self, rhs: &Factors) -> Result<Factors> {
        Ok(Factors {
            b: self.b.add(&rhs.b)?,
            a: self.a.add(&rhs.a)?,
        })
    }

    pub fn sub(&self, rhs: &Factors) -> Result<Factors> {
        Ok(Factors {
            b: self.b.sub(&rhs.b)?,
            a: self.a.sub(&rhs.a)?,
        })
    }

    pub fn scale(&self, s: f64) -> Factors {
        Factors {
            b: self.b.scale(s),
            a: self.a.scale(s),
        }
    }

    pub fn axpy(&mut self, s: f64, rhs: &Factors) -> Result<()> {
        self.b.axpy(s, &rhs.b)?;
        self.a.axpy(s, &rhs.a)
    }

    pub fn product(&self) -> Matrix {
        self.b.matmul(&self.a).expect("factor shapes are checked on construction")
    }

    pub fn is_finite(&self) -> bool {
        self.b.is_finite() && self.a.is_finite()
    }

    /// Rank component `i` as the concatenation `[B[:,i] ‖ A[i,:]]`.
    pub fn rank_vector(&self, i: usize) -> Vec<f64> {
        let mut v = self.b.col(i);
        v.extend_from_slice(self.a.row(i));
        v
    }

    /// Inverse of [`Factors::rank_vector`].
    pub fn set_rank_vector(&mut self, i: usize, v: &[f64]) {
        let d = self.d();
        debug_assert_eq!(v.len(), d + self.l());
        for (row, &x) in v[..d].iter().enumerate() {
            self.b[(row, i)] = x;
        }
        self.a.row_mut(i).copy_from_slice(&v[d..]);
    }

    pub fn orth_penalty(&self) -> f64 {
        orth_penalty(&self.b, &self.a)
    }

    pub fn per_rank_scores(&self) -> RankScores {
        per_rank_scores(&self.b, &self.a)
    }
}

/// LoRA adapter `(B, A, alpha)` with rank `r = B.cols() = A.rows()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub factors: Factors,
    pub alpha: f64,
}

impl LoraAdapter {
    /// Fresh adapter: `B = 0`, `A ~ N(0, 1/r)`, so `BA = 0` and the adapted
    /// model starts at the pretrained weight.
    pub fn init(rng: &mut SimRng, d: usize, l: usize, rank: usize, alpha: f64) -> Self {
        assert!(rank >= 1, "rank must be positive");
        let a = rng.gaussian_matrix(rank, l, 1.0 / (rank as f64).sqrt());
        Self {
            factors: Factors {
                b: Matrix::zeros(d, rank),
                a,
            },
            alpha,
        }
    }

    pub fn from_factors(b: Matrix, a: Matrix, alpha: f64) -> Result<Self> {
        Ok(Self {
            factors: Factors::new(b, a)?,
            alpha,
        })
    }

    pub fn b(&self) -> &Matrix {
        &self.factors.b
    }

    pub fn a(&self) -> &Matrix {
        &self.factors.a
    }

    pub fn rank(&self) -> usize {
        self.factors.rank()
    }

    /// `alpha / r`.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// Batched forward pass `x theta_p + (alpha/r) x B A` for `x` of shape
    /// `n x d`.
    pub fn forward(&self, theta_p: &Matrix, x: &Matrix) -> Result<Matrix> {
        let (d, l) = (self.factors.d(), self.factors.l());
        if theta_p.shape() != (d, l) {
            return Err(Error::DimensionMismatch {
                op: "forward (theta_p)",
                left: theta_p.shape(),
                right: (d, l),
            });
        }
        if x.cols() != d {
            return Err(Error::DimensionMismatch {
                op: "forward (x)",
                left: x.shape(),
                right: (d, l),
            });
        }
        let mut y = x.matmul(theta_p)?;
        let xb = x.matmul(&self.factors.b)?;
        let xba = xb.matmul(&self.factors.a)?;
        y.axpy(self.scaling(), &xba)?;
        Ok(y)
    }

    pub fn orth_penalty(&self) -> f64 {
        self.factors.orth_penalty()
    }

    pub fn orth_penalty_grad(&self) -> Factors {
        orth_penalty_grad(&self.factors.b, &self.factors.a)
    }

    pub fn per_rank_scores(&self) -> RankScores {
        self.factors.per_rank_scores()
    }

    pub fn norm_identity_residual(&self) -> f64 {
        norm_identity_residual(&self.factors.b, &self.factors.a)
    }
}

/// Per-rank surrogate squared singular values `|B[:,i]|² |A[i,:]|²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankScores(pub Vec<f64>);

impl RankScores {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }
}

/// `M` restricted to its off-diagonal entries, squared Frobenius norm.
fn off_diag_sq(gram: &Matrix) -> f64 {
    let n = gram.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += gram[(i, j)] * gram[(i, j)];
            }
        }
    }
    s
}

pub fn orth_penalty(b: &Matrix, a: &Matrix) -> f64 {
    let btb = b.t_matmul(b).expect("square gram");
    let aat = a.matmul_t(a).expect("square gram");
    off_diag_sq(&btb) + off_diag_sq(&aat)
}

/// Analytic gradient of [`orth_penalty`]: `(4 B off(BᵀB), 4 off(AAᵀ) A)`.
pub fn orth_penalty_grad(b: &Matrix, a: &Matrix) -> Factors {
    let off_btb = b.t_matmul(b).expect("square gram").off_diagonal();
    let off_aat = a.matmul_t(a).expect("square gram").off_diagonal();
    Factors {
        b: b.matmul(&off_btb).expect("gram shape").scale(4.0),
        a: off_aat.matmul(a).expect("gram shape").scale(4.0),
    }
}

pub fn per_rank_scores(b: &Matrix, a: &Matrix) -> RankScores {
    let r = b.cols();
    RankScores(
        (0..r)
            .map(|i| {
                b.col_norm_sq(i).expect("rank index in range")
                    * a.row_norm_sq(i).expect("rank index in range")
            })
            .collect(),
    )
}

/// `| |BA|² - Σᵢ scoreᵢ |`, zero when the factors are exactly orthogonal.
pub fn norm_identity_residual(b: &Matrix, a: &Matrix) -> f64 {
    let prod = b.matmul(a).expect("factor shapes");
    (prod.frobenius_sq() - per_rank_scores(b, a).total()).abs()
}
