//! Two-stage control: offline structural-rank selection and per-round
//! drift-plus-penalty choice of the sparsification ratio and bandwidth.
//!
//! Offline, the channel is replaced by its average and, for each candidate
//! rank, the ratio that makes the expected round delay meet the budget is
//! `O⁰(r) = clamp(N D_th / (A K⁰ r), O_min, 1)` with
//! `A = Σ_k v (d + l) / (B E[g_k])`. The rank minimising the bound at that
//! ratio is kept for the whole run.
//!
//! Online, a virtual queue `Q ← max(Q + D - D_th, 0)` tracks accumulated
//! latency overshoot, and each round picks `O` minimising
//! `Q · D(O) + V · γ(O)`, with bandwidth shares equalising the client delays.

use serde::{Deserialize, Serialize};

use crate::bounds::{sparsification_coeff, theorem1_gamma_term, GammaBreakdown};
use crate::channel::{ChannelDraw, Schedule};
use crate::error::{Error, Result};

/// Constants of the convergence bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryConsts {
    /// Smoothness `S`.
    pub s: f64,
    /// Singular-value bound `W`.
    pub w: f64,
    /// Gradient-norm bound `G`.
    pub g: f64,
    /// LoRA-error constant `H`.
    pub h: f64,
    /// Heterogeneity constant `φ`.
    pub phi: f64,
    pub r_max: usize,
    pub local_epochs: usize,
    pub lr: f64,
}

impl TheoryConsts {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("s", self.s),
            ("w", self.w),
            ("g", self.g),
            ("h", self.h),
            ("phi", self.phi),
        ];
        for (name, v) in named {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("theory.{name}"), "must be positive and finite"));
            }
        }
        if self.r_max == 0 {
            return Err(Error::config("control.r_max", "must be at least 1"));
        }
        Ok(())
    }
}

/// System dimensions needed by the controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    pub n_clients: usize,
    pub k0: usize,
    pub bits_per_param: f64,
    pub d: usize,
    pub l: usize,
    pub bandwidth_hz: f64,
}

/// `A = Σ_k v (d + l) / (B E[g_k])`.
pub fn delay_coefficient(avg_gains: &[f64], sys: &SystemParams) -> Result<f64> {
    if let Some(g) = avg_gains.iter().find(|g| !(**g > 0.0)) {
        return Err(Error::invalid(format!("average spectral efficiency must be positive, got {g}")));
    }
    let per_param = sys.bits_per_param * (sys.d + sys.l) as f64 / sys.bandwidth_hz;
    Ok(avg_gains.iter().map(|g| per_param / g).sum())
}

/// Closed-form initial ratio `clamp(N D_th / (A K⁰ r), O_min, 1)`.
pub fn initial_ratio(a_coeff: f64, sys: &SystemParams, rank: usize, d_th: f64, o_min: f64) -> f64 {
    let raw = sys.n_clients as f64 * d_th / (a_coeff * sys.k0 as f64 * rank as f64);
    raw.min(1.0).max(o_min)
}

/// Expected round delay under the average channel,
/// `(K⁰/N) Σ_k v O r (d + l) / (B E[g_k])`.
pub fn average_channel_delay(a_coeff: f64, sys: &SystemParams, rank: usize, ratio: f64) -> f64 {
    sys.k0 as f64 / sys.n_clients as f64 * a_coeff * ratio * rank as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankCandidate {
    pub rank: usize,
    pub ratio: f64,
    pub gamma: GammaBreakdown,
}

/// Result of the offline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineChoice {
    pub rank: usize,
    pub ratio: f64,
    pub delay_coeff: f64,
    pub candidates: Vec<RankCandidate>,
}

/// Enumerates `r = 1..=r_max` and keeps the rank with the smallest bound
/// at its closed-form ratio. Ties go to the smaller rank.
pub fn offline_select_rank(
    consts: &TheoryConsts,
    avg_gains: &[f64],
    sys: &SystemParams,
    d_th: f64,
    o_min: f64,
) -> Result<OfflineChoice> {
    consts.validate()?;
    if !(d_th > 0.0) {
        return Err(Error::invalid("delay threshold must be positive"));
    }
    let a_coeff = delay_coefficient(avg_gains, sys)?;
    let mut candidates = Vec::with_capacity(consts.r_max);
    for rank in 1..=consts.r_max {
        let ratio = initial_ratio(a_coeff, sys, rank, d_th, o_min);
        let gamma = theorem1_gamma_term(consts, rank, ratio, sys.k0, sys.n_clients)?;
        candidates.push(RankCandidate { rank, ratio, gamma });
    }
    let best = candidates
        .iter()
        .min_by(|a, b| {
            a.gamma
                .total
                .partial_cmp(&b.gamma.total)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.rank.cmp(&b.rank))
        })
        .expect("r_max >= 1");
    Ok(OfflineChoice {
        rank: best.rank,
        ratio: best.ratio,
        delay_coeff: a_coeff,
        candidates: candidates.clone(),
    })
}

/// `max(Q + D - D_th, 0)`.
pub fn queue_update(q: f64, delay: f64, d_th: f64) -> f64 {
    (q + delay - d_th).max(0.0)
}

/// Per-round objective `J(O) = Q c_D O + V (c_S (1-O)²/O⁴ + const)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotProblem {
    pub queue: f64,
    pub v: f64,
    /// Round delay per unit ratio under equalising bandwidth.
    pub c_delay: f64,
    /// Sparsification coefficient of the bound.
    pub c_sparse: f64,
    /// Ratio-independent bound terms; irrelevant to the argmin.
    pub constant: f64,
}

impl SlotProblem {
    /// Builds the problem for the scheduled clients of one round.
    pub fn for_round(
        queue: f64,
        v: f64,
        draw: &ChannelDraw,
        schedule: &Schedule,
        consts: &TheoryConsts,
        rank: usize,
        sys: &SystemParams,
    ) -> Result<Self> {
        let k = schedule.k();
        if k == 0 {
            return Err(Error::invalid("no scheduled clients"));
        }
        let mut inv_gain = 0.0;
        for &c in &schedule.selected {
            let g = draw.gains[c];
            if !(g > 0.0) {
                return Err(Error::UnreachableClient { client: c });
            }
            inv_gain += 1.0 / g;
        }
        let c_delay =
            sys.bits_per_param * (rank * (sys.d + sys.l)) as f64 / sys.bandwidth_hz * inv_gain;
        let c_sparse = sparsification_coeff(consts, rank, k, sys.n_clients);
        let constant = theorem1_gamma_term(consts, rank, 1.0, k, sys.n_clients)?.total;
        Ok(Self {
            queue,
            v,
            c_delay,
            c_sparse,
            constant,
        })
    }

    pub fn delay(&self, ratio: f64) -> f64 {
        self.c_delay * ratio
    }

    pub fn objective(&self, ratio: f64) -> Result<f64> {
        if !(ratio > 0.0) {
            return Err(Error::invalid(format!("ratio must be positive, got {ratio}")));
        }
        let penalty = self.c_sparse * (1.0 - ratio).powi(2) / ratio.powi(4) + self.constant;
        Ok(self.queue * self.c_delay * ratio + self.v * penalty)
    }
}

/// Golden-section width at which the ratio search stops.
pub const RATIO_TOLERANCE: f64 = 1e-8;

/// Minimises a unimodal `f` on `[lo, hi]`; the endpoints are always
/// considered, so boundary optima come back exactly.
pub fn golden_section_min(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let (mut a, mut b) = (lo, hi);
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while b - a > tol {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = f(x2);
        }
    }
    let interior = 0.5 * (a + b);
    [(hi, f(hi)), (lo, f(lo)), (interior, f(interior))]
        .into_iter()
        .fold((hi, f64::INFINITY), |best, cand| {
            if cand.1 < best.1 {
                cand
            } else {
                best
            }
        })
        .0
}

/// Per-round ratio: argmin of [`SlotProblem::objective`] over `[O_min, 1]`.
pub fn solve_ratio(problem: &SlotProblem, o_min: f64) -> Result<f64> {
    if !(o_min > 0.0 && o_min < 1.0) {
        return Err(Error::invalid(format!("O_min must lie in (0, 1), got {o_min}")));
    }
    if problem.queue == 0.0 || problem.c_delay == 0.0 {
        // No delay pressure: the penalty alone is minimised at O = 1.
        return Ok(1.0);
    }
    let f = |o: f64| problem.objective(o).expect("ratio stays positive");
    Ok(golden_section_min(f, o_min, 1.0, RATIO_TOLERANCE).clamp(o_min, 1.0))
}

/// Outcome of bandwidth allocation; `dropped` lists selected clients with a
/// zero-rate channel that were removed from the schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub schedule: Schedule,
    pub dropped: Vec<usize>,
}

/// Delay-equalising shares `b_k = (1/g_k) / Σ_j (1/g_j)`.
pub fn allocate_bandwidth(schedule: &Schedule, draw: &ChannelDraw) -> Result<Allocation> {
    let (reachable, dropped): (Vec<usize>, Vec<usize>) = schedule
        .selected
        .iter()
        .partition(|&&k| draw.gains[k] > 0.0);
    if reachable.is_empty() {
        return Err(Error::UnreachableClient {
            client: schedule.selected.first().copied().unwrap_or(0),
        });
    }
    let total_inv: f64 = reachable.iter().map(|&k| 1.0 / draw.gains[k]).sum();
    let mut shares = vec![0.0; schedule.n()];
    for &k in &reachable {
        shares[k] = (1.0 / draw.gains[k]) / total_inv;
    }
    Ok(Allocation {
        schedule: Schedule {
            selected: reachable,
            shares,
        },
        dropped,
    })
}

/// Single-owner controller state mutated by the coordinator between rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    pub queue: f64,
    pub v: f64,
    pub d_th: f64,
    pub o_min: f64,
    pub rank: usize,
    pub consts: TheoryConsts,
}

impl ControllerState {
    pub fn slot_problem(
        &self,
        draw: &ChannelDraw,
        schedule: &Schedule,
        sys: &SystemParams,
    ) -> Result<SlotProblem> {
        SlotProblem::for_round(self.queue, self.v, draw, schedule, &self.consts, self.rank, sys)
    }

    pub fn decide_ratio(&self, draw: &ChannelDraw, schedule: &Schedule, sys: &SystemParams) -> Result<f64> {
        solve_ratio(&self.slot_problem(draw, schedule, sys)?, self.o_min)
    }

    pub fn observe_delay(&mut self, delay: f64) {
        self.queue = queue_update(self.queue, delay, self.d_th);
    }
}
