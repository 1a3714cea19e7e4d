//! Rank-aware sparsification of LoRA updates with error feedback.
//!
//! The sparsifier keeps `round(O r (d + l))` of the `r (d + l)` entries of an
//! update. The budget is split across rank components proportionally to the
//! per-rank scores of the memory-compensated update, and each component
//! `[B[:,i] ‖ A[i,:]]` keeps its largest-magnitude entries. Whatever is not
//! transmitted is carried in an error memory and added to the next update.
//!
//! Baseline sparsifiers with the same element budget live alongside for
//! comparison runs.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{Factors, RankScores};
use crate::matcore::SimRng;

/// Per-client residual memory `(m_B, m_A)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMemory(pub Factors);

impl ErrorMemory {
    pub fn zeros(d: usize, l: usize, rank: usize) -> Self {
        Self(Factors::zeros(d, l, rank))
    }

    pub fn factors(&self) -> &Factors {
        &self.0
    }

    /// Squared norm of the concatenated memory `[m_Bᵀ m_A]`.
    pub fn concat_norm_sq(&self) -> f64 {
        self.0.frobenius_sq()
    }

    /// `|m_B m_A|_F`, the memory seen through the LoRA product.
    pub fn product_norm(&self) -> f64 {
        self.0.product().frobenius()
    }
}

/// Integer element budget split across rank components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityBudget {
    pub ratio: f64,
    pub per_rank: Vec<usize>,
    pub total: usize,
}

/// Sparsified update together with the memory to carry into the next round.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOutcome {
    pub sparse: Factors,
    pub memory: ErrorMemory,
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid(format!(
            "sparsification ratio must lie in (0, 1], got {ratio}"
        )));
    }
    Ok(())
}

/// `round(O r (d + l))`.
pub fn budget_total(ratio: f64, rank: usize, d: usize, l: usize) -> usize {
    let full = rank * (d + l);
    ((ratio * full as f64).round() as usize).min(full)
}

/// Proportional budget split. See [`allocate_counts`] for the rounding rule.
pub fn allocate_budget(scores: &RankScores, ratio: f64, d: usize, l: usize) -> Result<SparsityBudget> {
    check_ratio(ratio)?;
    let r = scores.len();
    if r == 0 {
        return Err(Error::invalid("cannot allocate a budget over zero ranks"));
    }
    let total = budget_total(ratio, r, d, l);
    let per_rank = allocate_counts(scores.as_slice(), total, d + l)?;
    Ok(SparsityBudget {
        ratio,
        per_rank,
        total,
    })
}

/// Splits `total` units over `weights.len()` bins proportionally to the
/// weights, capping each bin at `cap`.
///
/// Shares that would exceed the cap are pinned to it and the excess is
/// re-split over the remaining bins. Fractional shares are rounded with the
/// largest-remainder method, ties going to the lowest index. All-zero
/// weights split uniformly.
pub fn allocate_counts(weights: &[f64], total: usize, cap: usize) -> Result<Vec<usize>> {
    let r = weights.len();
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::invalid("budget weights must be finite and non-negative"));
    }
    if total > r * cap {
        return Err(Error::invalid(format!(
            "budget {total} exceeds capacity {r} x {cap}"
        )));
    }

    let mut shares = vec![0.0_f64; r];
    let mut pinned = vec![false; r];
    let mut remaining = total as f64;
    loop {
        let active: Vec<usize> = (0..r).filter(|&i| !pinned[i]).collect();
        if active.is_empty() {
            break;
        }
        let mass: f64 = active.iter().map(|&i| weights[i]).sum();
        for &i in &active {
            shares[i] = if mass > 0.0 {
                remaining * weights[i] / mass
            } else {
                remaining / active.len() as f64
            };
        }
        let over: Vec<usize> = active
            .iter()
            .copied()
            .filter(|&i| shares[i] > cap as f64)
            .collect();
        if over.is_empty() {
            break;
        }
        for i in over {
            pinned[i] = true;
            shares[i] = cap as f64;
            remaining -= cap as f64;
        }
    }

    let mut counts: Vec<usize> = shares
        .iter()
        .map(|s| (s.floor() as usize).min(cap))
        .collect();
    let assigned: usize = counts.iter().sum();
    let mut deficit = total - assigned;
    if deficit > 0 {
        let mut order: Vec<usize> = (0..r).collect();
        order.sort_by(|&i, &j| {
            let fi = shares[i] - shares[i].floor();
            let fj = shares[j] - shares[j].floor();
            fj.partial_cmp(&fi).unwrap_or(Ordering::Equal).then(i.cmp(&j))
        });
        // A second pass covers bins whose share was numerically just below
        // an integer; it only triggers when float round-off left a gap.
        for pass in 0..2 {
            for &i in &order {
                if deficit == 0 {
                    break;
                }
                let eligible = counts[i] < cap && (pass == 1 || shares[i] > counts[i] as f64);
                if eligible {
                    counts[i] += 1;
                    deficit -= 1;
                }
            }
        }
    }
    debug_assert_eq!(counts.iter().sum::<usize>(), total);
    Ok(counts)
}

/// Indices of the `u` largest-magnitude entries, ties to the lowest index.
fn topk_indices(x: &[f64], u: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    if u == 0 {
        return Vec::new();
    }
    if u < x.len() {
        let cmp = |&i: &usize, &j: &usize| {
            x[j].abs()
                .partial_cmp(&x[i].abs())
                .unwrap_or(Ordering::Equal)
                .then(i.cmp(&j))
        };
        idx.select_nth_unstable_by(u - 1, cmp);
        idx.truncate(u);
    }
    idx
}

fn keep_topk(x: &[f64], u: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in topk_indices(x, u) {
        out[i] = x[i];
    }
    out
}

/// Top-`u` sparsification: the `u` largest-magnitude entries survive,
/// everything else is zeroed.
pub fn sparsify_topk(x: &[f64], u: usize) -> Result<Vec<f64>> {
    if u == 0 {
        return Err(Error::invalid("top-k requires u >= 1"));
    }
    if u > x.len() {
        return Err(Error::invalid(format!(
            "top-k with u = {u} exceeds vector length {}",
            x.len()
        )));
    }
    Ok(keep_topk(x, u))
}

fn compensate(update: &Factors, memory: &ErrorMemory) -> Result<Factors> {
    memory.0.add(update)
}

fn finish(compensated: Factors, sparse: Factors) -> SparseOutcome {
    let memory = ErrorMemory(compensated.sub(&sparse).expect("same shapes"));
    SparseOutcome { sparse, memory }
}

/// Rank-aware sparsification with error feedback.
///
/// Returns the transmitted update and the residual memory
/// `m + update - sparse`.
pub fn soft_sparsify(update: &Factors, memory: &ErrorMemory, ratio: f64) -> Result<SparseOutcome> {
    check_ratio(ratio)?;
    let compensated = compensate(update, memory)?;
    let scores = compensated.per_rank_scores();
    let budget = allocate_budget(&scores, ratio, compensated.d(), compensated.l())?;
    let mut sparse = Factors::zeros(compensated.d(), compensated.l(), compensated.rank());
    for (i, &o) in budget.per_rank.iter().enumerate() {
        if o == 0 {
            continue;
        }
        let v = compensated.rank_vector(i);
        sparse.set_rank_vector(i, &keep_topk(&v, o));
    }
    Ok(finish(compensated, sparse))
}

/// Which sparsifier a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsifierKind {
    /// Rank-aware, score-proportional joint top-k.
    Soft,
    /// Independent magnitude top-k in each factor, half the budget each.
    Flasc,
    /// Uniformly random entries.
    Random,
    /// Lowest rank indices kept whole until the budget runs out.
    Het,
    /// `floor(O r)` randomly chosen whole rank components.
    Rankdrop,
    /// No sparsification.
    Dense,
}

impl SparsifierKind {
    pub const ALL: [SparsifierKind; 6] = [
        SparsifierKind::Soft,
        SparsifierKind::Flasc,
        SparsifierKind::Random,
        SparsifierKind::Het,
        SparsifierKind::Rankdrop,
        SparsifierKind::Dense,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SparsifierKind::Soft => "soft",
            SparsifierKind::Flasc => "flasc",
            SparsifierKind::Random => "random",
            SparsifierKind::Het => "het",
            SparsifierKind::Rankdrop => "rankdrop",
            SparsifierKind::Dense => "dense",
        }
    }

    /// Applies this sparsifier. `rng` is only consumed by the random kinds.
    pub fn apply(
        self,
        update: &Factors,
        memory: &ErrorMemory,
        ratio: f64,
        rng: &mut SimRng,
    ) -> Result<SparseOutcome> {
        match self {
            SparsifierKind::Soft => soft_sparsify(update, memory, ratio),
            _ => baseline_sparsify(self, update, memory, ratio, rng),
        }
    }
}

impl fmt::Display for SparsifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SparsifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(SparsifierKind::Soft),
            "flasc" | "flasc_topq" => Ok(SparsifierKind::Flasc),
            "random" => Ok(SparsifierKind::Random),
            "het" | "het_lowrank" => Ok(SparsifierKind::Het),
            "rankdrop" => Ok(SparsifierKind::Rankdrop),
            "dense" => Ok(SparsifierKind::Dense),
            other => Err(Error::UnknownSparsifier(other.to_string())),
        }
    }
}

/// Comparison sparsifiers sharing the error-feedback memory rule.
pub fn baseline_sparsify(
    kind: SparsifierKind,
    update: &Factors,
    memory: &ErrorMemory,
    ratio: f64,
    rng: &mut SimRng,
) -> Result<SparseOutcome> {
    check_ratio(ratio)?;
    let compensated = compensate(update, memory)?;
    let (d, l, r) = (compensated.d(), compensated.l(), compensated.rank());
    let total = budget_total(ratio, r, d, l);
    let mut sparse = Factors::zeros(d, l, r);

    match kind {
        SparsifierKind::Soft => return soft_sparsify(update, memory, ratio),
        SparsifierKind::Dense => sparse = compensated.clone(),
        SparsifierKind::Flasc => {
            let (nb, na) = (d * r, r * l);
            let mut take_b = (total / 2).min(nb);
            let take_a = (total - take_b).min(na);
            take_b = total - take_a;
            sparse.b.as_mut_slice().copy_from_slice(&keep_topk(compensated.b.as_slice(), take_b));
            sparse.a.as_mut_slice().copy_from_slice(&keep_topk(compensated.a.as_slice(), take_a));
        }
        SparsifierKind::Random => {
            let nb = d * r;
            for idx in rng.sample_indices(r * (d + l), total) {
                if idx < nb {
                    sparse.b.as_mut_slice()[idx] = compensated.b.as_slice()[idx];
                } else {
                    sparse.a.as_mut_slice()[idx - nb] = compensated.a.as_slice()[idx - nb];
                }
            }
        }
        SparsifierKind::Het => {
            let width = d + l;
            let whole = total / width;
            for i in 0..whole {
                sparse.set_rank_vector(i, &compensated.rank_vector(i));
            }
            let rest = total % width;
            if rest > 0 {
                let v = compensated.rank_vector(whole);
                sparse.set_rank_vector(whole, &keep_topk(&v, rest));
            }
        }
        SparsifierKind::Rankdrop => {
            // The epsilon keeps products like 0.29 * 100 from flooring to 28.
            let keep = ((ratio * r as f64 + 1e-9).floor() as usize).min(r);
            let mut chosen = rng.sample_indices(r, keep);
            chosen.sort_unstable();
            for i in chosen {
                sparse.set_rank_vector(i, &compensated.rank_vector(i));
            }
        }
    }
    Ok(finish(compensated, sparse))
}
