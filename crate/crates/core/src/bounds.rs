//! Convergence-bound terms and sparsification-error bounds.
//!
//! All functions are pure. `theorem1_gamma_term` evaluates the per-round
//! bracket of the optimality-gap bound: the rank term `2S²H(r_max-r)W²`,
//! the covariance term `4S²φrW²`, the local-drift terms `ηSE²G²` and
//! `E(E-1)(2E-1)S²η²G²/6`, the client-sampling term
//! `8(N-K)η²S²E²G²/(K(N-1))` and the sparsification term
//! `4N(1-O)²rS²W⁴/(K O⁴)`.

use serde::{Deserialize, Serialize};

use crate::controller::TheoryConsts;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GammaBreakdown {
    /// `2 (F(θ⁰) - F*) / (η T)`; zero unless set through [`GammaBreakdown::with_init_gap`].
    pub init_gap: f64,
    pub rank: f64,
    pub covariance: f64,
    pub local_drift: f64,
    pub drift_sum: f64,
    pub sampling: f64,
    pub sparsification: f64,
    pub total: f64,
}

impl GammaBreakdown {
    fn summed(mut self) -> Self {
        self.total = self.init_gap
            + self.rank
            + self.covariance
            + self.local_drift
            + self.drift_sum
            + self.sampling
            + self.sparsification;
        self
    }

    /// Adds the initial-gap term `2 gap / (η T)`.
    pub fn with_init_gap(mut self, gap: f64, lr: f64, rounds: usize) -> Self {
        self.init_gap = if rounds == 0 || lr <= 0.0 {
            0.0
        } else {
            2.0 * gap.max(0.0) / (lr * rounds as f64)
        };
        self.summed()
    }

    /// Every term except the sparsification one.
    pub fn ratio_independent(&self) -> f64 {
        self.total - self.sparsification
    }

    /// Term-wise mean of a sequence of breakdowns.
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a GammaBreakdown>) -> GammaBreakdown {
        let mut acc = GammaBreakdown::default();
        let mut n = 0usize;
        for g in items {
            acc.init_gap += g.init_gap;
            acc.rank += g.rank;
            acc.covariance += g.covariance;
            acc.local_drift += g.local_drift;
            acc.drift_sum += g.drift_sum;
            acc.sampling += g.sampling;
            acc.sparsification += g.sparsification;
            n += 1;
        }
        if n == 0 {
            return acc;
        }
        let inv = 1.0 / n as f64;
        GammaBreakdown {
            init_gap: acc.init_gap * inv,
            rank: acc.rank * inv,
            covariance: acc.covariance * inv,
            local_drift: acc.local_drift * inv,
            drift_sum: acc.drift_sum * inv,
            sampling: acc.sampling * inv,
            sparsification: acc.sparsification * inv,
            total: 0.0,
        }
        .summed()
    }
}

/// Sparsification coefficient `4 N r S² W⁴ / K`, multiplying `(1-O)²/O⁴`.
pub fn sparsification_coeff(consts: &TheoryConsts, rank: usize, k: usize, n: usize) -> f64 {
    4.0 * n as f64 * rank as f64 * consts.s.powi(2) * consts.w.powi(4) / k as f64
}

/// The bracketed per-round terms of the optimality-gap bound.
pub fn theorem1_gamma_term(
    consts: &TheoryConsts,
    rank: usize,
    ratio: f64,
    k: usize,
    n: usize,
) -> Result<GammaBreakdown> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid(format!("ratio must lie in (0, 1], got {ratio}")));
    }
    if k == 0 || k > n {
        return Err(Error::invalid(format!("need 1 <= K <= N, got K={k}, N={n}")));
    }
    if rank > consts.r_max {
        return Err(Error::invalid(format!(
            "rank {rank} exceeds r_max {}",
            consts.r_max
        )));
    }
    let TheoryConsts {
        s,
        w,
        g,
        h,
        phi,
        r_max,
        local_epochs,
        lr,
    } = *consts;
    let (s2, w2, g2) = (s * s, w * w, g * g);
    let e = local_epochs as f64;
    let r = rank as f64;
    let (kf, nf) = (k as f64, n as f64);

    let sampling = if k == n {
        0.0
    } else {
        8.0 * (nf - kf) / (kf * (nf - 1.0)) * lr * lr * s2 * e * e * g2
    };
    Ok(GammaBreakdown {
        init_gap: 0.0,
        rank: 2.0 * s2 * h * (r_max - rank) as f64 * w2,
        covariance: 4.0 * s2 * phi * r * w2,
        local_drift: lr * s * e * e * g2,
        drift_sum: e * (e - 1.0) * (2.0 * e - 1.0) * s2 * lr * lr * g2 / 6.0,
        sampling,
        sparsification: sparsification_coeff(consts, rank, k, n) * (1.0 - ratio).powi(2)
            / ratio.powi(4),
        total: 0.0,
    }
    .summed())
}

fn check_open_ratio(ratio: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid(format!("ratio must lie in (0, 1], got {ratio}")));
    }
    Ok(())
}

/// `4 (1-O)/O² · max_delta_sq`, bounding the squared error-memory norm.
pub fn memory_bound(ratio: f64, max_delta_sq: f64) -> Result<f64> {
    check_open_ratio(ratio)?;
    if ratio == 1.0 {
        return Ok(0.0);
    }
    Ok(4.0 * (1.0 - ratio) / (ratio * ratio) * max_delta_sq)
}

/// `2 (1-O)/O² · max_delta_sq`, bounding `|m_B m_A|_F`.
pub fn memory_product_bound(ratio: f64, max_delta_sq: f64) -> Result<f64> {
    check_open_ratio(ratio)?;
    if ratio == 1.0 {
        return Ok(0.0);
    }
    Ok(2.0 * (1.0 - ratio) / (ratio * ratio) * max_delta_sq)
}

/// Drift constant `½ (D̄ - D_th)²`.
pub fn drift_bound_b(d_bar: f64, d_th: f64) -> f64 {
    0.5 * (d_bar - d_th).powi(2)
}
