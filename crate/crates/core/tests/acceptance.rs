//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Criteria listed in `KNOWN_FAILURES` are reported as FAIL but do not fail
//! the process; any other failure does. A known failure that starts passing
//! is reported so the list can be pruned.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::*;
use fedsoft::bounds::{memory_product_bound, memory_bound, theorem1_gamma_term};
use fedsoft::channel::{round_delay, sample_channel, schedule_clients, ChannelDraw, Payload, Schedule};
use fedsoft::config::{ExperimentConfig, Mode, TaskConfig};
use fedsoft::controller::{
    allocate_bandwidth, average_channel_delay, initial_ratio, solve_ratio, SlotProblem, SystemParams, TheoryConsts,
};
use fedsoft::fedloop::{run, Simulation};
use fedsoft::lora::{orth_penalty_grad, per_rank_scores, LoraAdapter};
use fedsoft::metrics::records_to_csv;
use fedsoft::soft::{sparsify_topk, SparsifierKind};
use fedsoft::SimRng;

/// Criteria expected to fail with the current model; see the README.
const KNOWN_FAILURES: &[u32] = &[10, 11];

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn base(seed: u64) -> ExperimentConfig {
    ExperimentConfig { seed, threads: 1, ..ExperimentConfig::default() }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean final loss and covariance norm over `SEEDS`.
fn seed_means(make: impl Fn(u64) -> ExperimentConfig) -> (f64, f64) {
    let (mut loss, mut cov) = (Vec::new(), Vec::new());
    for s in SEEDS {
        let out = run(&make(s)).expect("run succeeds");
        loss.push(out.summary.final_loss);
        cov.push(out.summary.mean_cov_norm);
    }
    (mean(&loss), mean(&cov))
}

fn c01_topk_contraction() -> Outcome {
    let start = Instant::now();
    let mut rng = SimRng::new(101, 0);
    let (mut checks, mut violations) = (0, 0);
    for q in [10usize, 37, 128] {
        for u in [1, q / 4, q / 2, q - 1, q] {
            for _ in 0..1000 {
                let x: Vec<f64> = (0..q).map(|_| rng.standard_normal()).collect();
                let s = sparsify_topk(&x, u).unwrap();
                let err: f64 = x.iter().zip(&s).map(|(a, b)| (a - b).powi(2)).sum();
                let norm: f64 = x.iter().map(|a| a * a).sum();
                checks += 1;
                if err > (1.0 - u as f64 / q as f64) * norm * (1.0 + 1e-12) {
                    violations += 1;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        violations == 0 && secs < 1.0,
        format!("{violations} violations in {checks} checks, {secs:.3}s (limit 1s, rel slack 1e-12)"),
    )
}

fn fixed_half(seed: u64) -> ExperimentConfig {
    let mut cfg = base(seed);
    cfg.control.mode = Mode::Fixed(0.5);
    cfg
}

fn c02_memory_bounds() -> Outcome {
    let start = Instant::now();
    let out = run(&fixed_half(0)).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let s = &out.summary;
    let min_slack = out.records.iter().map(|r| r.memory.memory_bound_slack).fold(f64::INFINITY, f64::min);
    let min_prod = out.records.iter().map(|r| r.memory.product_bound_slack).fold(f64::INFINITY, f64::min);
    let consistent = memory_product_bound(0.5, 1.0).unwrap() * 2.0 == memory_bound(0.5, 1.0).unwrap();
    outcome(
        s.memory_bound_violations == 0 && s.product_bound_violations == 0 && consistent && secs < 60.0,
        format!(
            "T={} O=0.5: memory violations {}, product violations {}, min slacks {min_slack:.3e}/{min_prod:.3e}, {secs:.1}s",
            s.rounds, s.memory_bound_violations, s.product_bound_violations
        ),
    )
}

fn c03_telescoping() -> Outcome {
    let mut worst = 0.0_f64;
    let mut runs = 0;
    let long = run(&fixed_half(0)).unwrap();
    worst = worst.max(long.summary.telescoping_residual.unwrap());
    runs += 1;
    for kind in SparsifierKind::ALL {
        let mut cfg = base(3);
        cfg.control.sparsifier = kind;
        cfg.control.mode = Mode::Fixed(0.3);
        cfg.task.rounds = 50;
        worst = worst.max(run(&cfg).unwrap().summary.telescoping_residual.unwrap());
        runs += 1;
    }
    let mut tsfa = base(1);
    tsfa.task.rounds = 100;
    worst = worst.max(run(&tsfa).unwrap().summary.telescoping_residual.unwrap());
    runs += 1;
    outcome(worst <= 1e-12, format!("max residual {worst:.2e} over {runs} runs (limit 1e-12)"))
}

fn c04_penalty_gradient() -> Outcome {
    let mut rng = SimRng::new(104, 0);
    let mut worst = 0.0_f64;
    for _ in 0..20 {
        let b = gaussian(&mut rng, 16, 6);
        let a = gaussian(&mut rng, 6, 12);
        let g = orth_penalty_grad(&from_na(&b), &from_na(&a));
        let (fb, fa) = penalty_fd_grad(&b, &a, 1e-6);
        worst = worst.max(rel_err(&to_na(&g.b), &fb)).max(rel_err(&to_na(&g.a), &fa));
    }
    outcome(worst <= 1e-5, format!("max relative error {worst:.2e} over 20 adapters (limit 1e-5)"))
}

fn c05_score_proxy() -> Outcome {
    let mut rng = SimRng::new(105, 0);
    let (mut worst, mut worst_identity) = (0.0_f64, 0.0_f64);
    for r in [1, 3, 8, 16] {
        let (b, a) = orthogonal_factors(&mut rng, 32, 24, r);
        let mut scores = per_rank_scores(&from_na(&b), &from_na(&a)).0;
        scores.sort_by(|x, y| y.partial_cmp(x).unwrap());
        let sv = squared_singular_values(&(&b * &a));
        for (s, v) in scores.iter().zip(&sv) {
            worst = worst.max((s - v).abs() / sv[0]);
        }
        let adapter = LoraAdapter::from_factors(from_na(&b), from_na(&a), 1.0).unwrap();
        worst_identity = worst_identity.max(adapter.norm_identity_residual() / sv[0]);
    }
    outcome(
        worst <= 1e-9 && worst_identity <= 1e-9,
        format!("max |score - sigma^2| {worst:.2e}, norm identity {worst_identity:.2e} (relative, limit 1e-9)"),
    )
}

fn c06_initial_ratio_meets_threshold() -> Outcome {
    let mut rng = SimRng::new(106, 0);
    let (mut checked, mut worst) = (0, 0.0_f64);
    let mut clamped_ok = true;
    for _ in 0..200 {
        let n = 10 + (rng.uniform() * 90.0) as usize;
        let k0 = 1 + (rng.uniform() * (n - 1) as f64) as usize;
        let sys = SystemParams { n_clients: n, k0, bits_per_param: 32.0, d: 64, l: 64, bandwidth_hz: 1e6 };
        let a_coeff = rng.uniform_range(0.01, 1.0);
        let rank = 1 + (rng.uniform() * 16.0) as usize;
        let d_th = rng.uniform_range(0.001, 0.5);
        let o = initial_ratio(a_coeff, &sys, rank, d_th, 0.05);
        let delay = average_channel_delay(a_coeff, &sys, rank, o);
        if o > 0.05 && o < 1.0 {
            checked += 1;
            worst = worst.max((delay - d_th).abs() / d_th);
        } else if o == 1.0 {
            clamped_ok &= delay <= d_th * (1.0 + 1e-12);
        } else {
            clamped_ok &= delay >= d_th * (1.0 - 1e-12);
        }
    }
    let sim = Simulation::new(&base(0)).unwrap();
    let cfg = base(0);
    for cand in &sim.offline().candidates {
        let delay = average_channel_delay(sim.offline().delay_coeff, &cfg.system_params(), cand.rank, cand.ratio);
        if cand.ratio > cfg.control.o_min && cand.ratio < 1.0 {
            checked += 1;
            worst = worst.max((delay - cfg.control.d_th).abs() / cfg.control.d_th);
        }
    }
    outcome(
        worst <= 1e-9 && clamped_ok && checked > 0,
        format!("{checked} interior cases, max relative gap {worst:.2e} (limit 1e-9), clamped cases ok: {clamped_ok}"),
    )
}

fn c07_ratio_solver() -> Outcome {
    let cfg = base(0);
    let sys = cfg.system_params();
    let consts = cfg.theory_consts();
    let distances: Vec<f64> = (0..sys.n_clients).map(|k| 50.0 + k as f64).collect();
    let mut rng = SimRng::new(107, 0);
    let (mut worst_j, mut worst_o) = (0.0_f64, 0.0_f64);
    let mut zero_queue_ok = true;
    let o_min = 0.05;
    let points = 10_000;
    for t in 0..100 {
        let draw = sample_channel(&mut rng, t, &distances, &cfg.channel_params()).unwrap();
        let schedule = schedule_clients(&mut rng, sys.n_clients, cfg.k0()).unwrap();
        let schedule = allocate_bandwidth(&schedule, &draw).unwrap().schedule;
        let queue = 10f64.powf(rng.uniform_range(-3.0, 1.5));
        let v = 10f64.powf(rng.uniform_range(-6.0, -2.0));
        let p = SlotProblem::for_round(queue, v, &draw, &schedule, &consts, 8, &sys).unwrap();
        let (mut best_o, mut best_j) = (o_min, f64::INFINITY);
        for i in 0..points {
            let o = o_min + (1.0 - o_min) * i as f64 / (points - 1) as f64;
            let j = p.objective(o).unwrap();
            if j < best_j {
                best_o = o;
                best_j = j;
            }
        }
        let got = solve_ratio(&p, o_min).unwrap();
        worst_j = worst_j.max((p.objective(got).unwrap() - best_j) / best_j.abs().max(1e-300));
        worst_o = worst_o.max((got - best_o).abs());
        let idle = SlotProblem { queue: 0.0, ..p };
        zero_queue_ok &= solve_ratio(&idle, o_min).unwrap() == 1.0;
    }
    let step = (1.0 - o_min) / (points - 1) as f64;
    outcome(
        worst_j <= 1e-6 && worst_o <= step + 1e-6 && zero_queue_ok,
        format!(
            "100 instances: objective excess over grid {worst_j:.2e} (limit 1e-6 relative), \
             argmin gap {worst_o:.2e} (limit one grid step {step:.2e}), Q=0 gives O=1: {zero_queue_ok}"
        ),
    )
}

fn c08_bandwidth() -> Outcome {
    let hand = allocate_bandwidth(
        &Schedule { selected: vec![0, 2], shares: vec![0.0; 3] },
        &ChannelDraw { round: 0, gains: vec![1.0, 5.0, 3.0] },
    )
    .unwrap();
    let hand_ok = hand
        .schedule
        .shares
        .iter()
        .zip([0.75, 0.0, 0.25])
        .all(|(a, b)| (a - b).abs() < 1e-15);
    let pair = allocate_bandwidth(
        &Schedule { selected: vec![0, 1], shares: vec![0.0; 2] },
        &ChannelDraw { round: 0, gains: vec![1.0, 3.0] },
    )
    .unwrap();
    let hand_ok = hand_ok && (pair.schedule.shares[0] - 0.75).abs() < 1e-15 && (pair.schedule.shares[1] - 0.25).abs() < 1e-15;
    let mut rng = SimRng::new(108, 0);
    let (mut sum_err, mut spread) = (0.0_f64, 0.0_f64);
    for t in 0..500 {
        let n = 5 + t % 50;
        let gains: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.05, 15.0)).collect();
        let sched = schedule_clients(&mut rng, n, 1 + t % n).unwrap();
        let draw = ChannelDraw { round: t, gains };
        let s = allocate_bandwidth(&sched, &draw).unwrap().schedule;
        sum_err = sum_err.max((s.shares.iter().sum::<f64>() - 1.0).abs());
        let payload = Payload { bits_per_param: 32.0, rank: 8, d: 64, l: 64, ratio: 0.4 };
        let worst = round_delay(&s, &draw, &payload, 1e6).unwrap();
        for &k in &s.selected {
            let dk = payload.bits() / (s.shares[k] * 1e6 * draw.gains[k]);
            spread = spread.max((worst - dk) / worst);
        }
    }
    outcome(
        hand_ok && sum_err <= 1e-12 && spread <= 1e-9,
        format!("hand example ok: {hand_ok}, max |sum b - 1| {sum_err:.1e} (limit 1e-12), delay spread {spread:.1e} (limit 1e-9)"),
    )
}

fn c09_lyapunov() -> Outcome {
    let start = Instant::now();
    let mut cfg = base(0);
    cfg.task.rounds = 2000;
    let out = run(&cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let s = &out.summary;
    let d_th = cfg.control.d_th;
    let avg_ratio = s.mean_delay / d_th;
    let q_ratio = s.final_queue / (s.rounds as f64 * d_th);
    outcome(
        avg_ratio <= 1.05 && q_ratio < 0.01 && secs < 300.0,
        format!(
            "T=2000 seed 0: mean D / D_th = {avg_ratio:.4} (limit 1.05), Q_T/(T D_th) = {q_ratio:.4} (limit 0.01), {secs:.1}s"
        ),
    )
}

fn c10_sparsifier_ordering() -> Outcome {
    let mut means = Vec::new();
    for kind in SparsifierKind::ALL {
        let (loss, _) = seed_means(|s| {
            let mut cfg = fixed_half(s);
            cfg.control.sparsifier = kind;
            cfg
        });
        means.push((kind, loss));
    }
    let get = |k: SparsifierKind| means.iter().find(|(kk, _)| *kk == k).unwrap().1;
    let soft = get(SparsifierKind::Soft);
    let baselines_ok = [SparsifierKind::Flasc, SparsifierKind::Random, SparsifierKind::Het, SparsifierKind::Rankdrop]
        .into_iter()
        .all(|k| soft <= get(k));
    let dense_ok = get(SparsifierKind::Dense) <= soft;
    let table: Vec<String> = means.iter().map(|(k, l)| format!("{k}={l:.5}")).collect();
    outcome(
        baselines_ok && dense_ok,
        format!("mean final loss over 5 seeds at O=0.5: {}", table.join(" ")),
    )
}

fn c11_rank_selection() -> Outcome {
    let mk = |mode: Mode| {
        move |s: u64| {
            let mut cfg = base(s);
            cfg.control.mode = mode;
            cfg
        }
    };
    let r_max = base(0).control.r_max;
    let (tsfa, _) = seed_means(mk(Mode::Tsfa));
    let (low, _) = seed_means(mk(Mode::Osfa(1)));
    let (high, _) = seed_means(mk(Mode::Osfa(r_max)));
    let rank = Simulation::new(&base(0)).unwrap().rank();
    outcome(
        tsfa <= low && tsfa <= high,
        format!("mean final loss over 5 seeds: tsfa(r*={rank})={tsfa:.5} osfa:1={low:.5} osfa:{r_max}={high:.5}"),
    )
}

fn c12_heterogeneity() -> Outcome {
    // Fewer shards per client means more heterogeneous local data.
    let levels = [1usize, 2, 4];
    let mut rows = Vec::new();
    for shards in levels {
        let (loss, cov) = seed_means(|s| {
            let mut cfg = base(s);
            cfg.task.shards = shards;
            cfg
        });
        rows.push((shards, loss, cov));
    }
    let cov_down = rows.windows(2).all(|w| w[1].2 < w[0].2);
    let loss_down = rows.windows(2).all(|w| w[1].1 < w[0].1);
    let table: Vec<String> = rows
        .iter()
        .map(|(s, l, c)| format!("shards={s}: cov={c:.6} loss={l:.5}"))
        .collect();
    outcome(cov_down && loss_down, format!("{} (both must fall as shards grow)", table.join("; ")))
}

fn c13_plug_in() -> Outcome {
    let unit = TheoryConsts { s: 1.0, w: 1.0, g: 1.0, h: 1.0, phi: 1.0, r_max: 2, local_epochs: 1, lr: 1.0 };
    let hand = theorem1_gamma_term(&unit, 1, 0.5, 1, 2).unwrap();
    let full = theorem1_gamma_term(&unit, 1, 1.0, 1, 2).unwrap();
    let all_clients = theorem1_gamma_term(&unit, 1, 0.5, 2, 2).unwrap();
    let ok = (hand.total - 47.0).abs() < 1e-12 && full.sparsification == 0.0 && all_clients.sampling == 0.0;
    outcome(
        ok,
        format!(
            "unit example total {} (want 47), O=1 sparsification {}, K=N sampling {}",
            hand.total, full.sparsification, all_clients.sampling
        ),
    )
}

fn c14_determinism() -> Outcome {
    let mut cfg = base(7);
    cfg.task = TaskConfig { rounds: 60, ..cfg.task };
    let csv = |threads: usize| {
        let mut c = cfg.clone();
        c.threads = threads;
        let out = run(&c).unwrap();
        (records_to_csv(&out.records), serde_json::to_string(&out.summary).unwrap())
    };
    let a = csv(1);
    let b = csv(1);
    let c = csv(4);
    outcome(
        a == b && a == c,
        format!("repeat identical: {}, 1 vs 4 threads identical: {} ({} CSV bytes)", a == b, a == c, a.0.len()),
    )
}

fn main() -> ExitCode {
    let criteria: Vec<(u32, &str, fn() -> Outcome)> = vec![
        (1, "top-k contraction", c01_topk_contraction),
        (2, "error-memory bounds", c02_memory_bounds),
        (3, "error-feedback telescoping", c03_telescoping),
        (4, "penalty gradient", c04_penalty_gradient),
        (5, "score proxy vs SVD", c05_score_proxy),
        (6, "initial ratio meets threshold", c06_initial_ratio_meets_threshold),
        (7, "ratio solver vs grid", c07_ratio_solver),
        (8, "bandwidth allocation", c08_bandwidth),
        (9, "delay queue stability", c09_lyapunov),
        (10, "sparsifier ordering", c10_sparsifier_ordering),
        (11, "two-stage rank selection", c11_rank_selection),
        (12, "heterogeneity trend", c12_heterogeneity),
        (13, "bound plug-in", c13_plug_in),
        (14, "determinism", c14_determinism),
    ];
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut unexpected = Vec::new();
    for (id, name, check) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let known = KNOWN_FAILURES.contains(&id);
        let o = check();
        let note = match (o.pass, known) {
            (true, true) => " [listed as known failure but passed]",
            (false, true) => " [known failure]",
            _ => "",
        };
        println!("criterion {id:02} {} {name}: {}{note}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass && !known {
            unexpected.push(id);
        }
    }
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected failures: {unexpected:?}");
        ExitCode::FAILURE
    }
}
