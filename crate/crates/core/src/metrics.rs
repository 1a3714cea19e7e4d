//! Per-round records, run summaries and their CSV form.

use std::fmt::Write as _;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::bounds::GammaBreakdown;
use crate::controller::RankCandidate;

/// Column order of `rounds.csv`.
pub const CSV_COLUMNS: [&str; 14] = [
    "t",
    "loss",
    "grad_norm",
    "orth_penalty",
    "cov_norm",
    "O",
    "D",
    "Q",
    "gamma_total",
    "gamma_sparsification",
    "gamma_rank",
    "gamma_cov",
    "gamma_sampling",
    "selected_ids",
];

/// Error-memory diagnostics over the clients updated in a round.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MemoryDiag {
    /// Largest `|m̃_k|²` after the round.
    pub max_memory_sq: f64,
    /// Smallest `bound - |m̃_k|²`, with the bound built from the client's
    /// largest update so far. Negative means a violation.
    pub memory_bound_slack: f64,
    /// Smallest `½|m̃_k|² - |m_B m_A|_F`.
    pub product_bound_slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub t: usize,
    /// Global loss after aggregation.
    pub loss: f64,
    pub grad_norm: f64,
    pub orth_penalty: f64,
    pub cov_norm: f64,
    pub ratio: f64,
    pub delay: f64,
    /// Queue after this round's update.
    pub queue: f64,
    pub gamma: GammaBreakdown,
    pub selected: Vec<usize>,
    pub dropped: Vec<usize>,
    pub memory: MemoryDiag,
}

impl RoundRecord {
    pub fn csv_header() -> String {
        CSV_COLUMNS.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut ids = String::new();
        for (i, id) in self.selected.iter().enumerate() {
            if i > 0 {
                ids.push(';');
            }
            write!(ids, "{id}").unwrap();
        }
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.t,
            self.loss,
            self.grad_norm,
            self.orth_penalty,
            self.cov_norm,
            self.ratio,
            self.delay,
            self.queue,
            self.gamma.total,
            self.gamma.sparsification,
            self.gamma.rank,
            self.gamma.covariance,
            self.gamma.sampling,
            ids
        )
    }
}

/// Streams records as CSV, header first.
pub struct CsvWriter<W: Write> {
    inner: W,
}

impl<W: Write> CsvWriter<W> {
    pub fn new(mut inner: W) -> io::Result<Self> {
        writeln!(inner, "{}", RoundRecord::csv_header())?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, rec: &RoundRecord) -> io::Result<()> {
        writeln!(self.inner, "{}", rec.csv_row())
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

pub fn records_to_csv(records: &[RoundRecord]) -> String {
    let mut out = RoundRecord::csv_header();
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Running estimates of `W` and `G`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimates {
    pub w: f64,
    pub g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub rounds: usize,
    pub rank: usize,
    pub initial_ratio: f64,
    pub offline_candidates: Vec<RankCandidate>,
    pub delay_coeff: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub min_loss: f64,
    pub final_grad_norm: f64,
    pub mean_cov_norm: f64,
    pub mean_ratio: f64,
    pub mean_delay: f64,
    pub final_queue: f64,
    /// Worst-case round delay: full ratio, smallest share, weakest channel.
    pub d_bar: f64,
    pub drift_b: f64,
    /// Mean breakdown with the initial-gap term filled from the observed
    /// loss range.
    pub gamma_mean: GammaBreakdown,
    /// `F(θ⁰) - min_t F(θ^t)`, standing in for the unknown optimum.
    pub init_gap_proxy: f64,
    /// Largest `|Σ sparse + m^T - Σ update|` over clients; `None` without
    /// error feedback.
    pub telescoping_residual: Option<f64>,
    pub memory_bound_violations: usize,
    pub product_bound_violations: usize,
    pub dropped_clients: usize,
    pub estimates: Option<Estimates>,
}
