//! Synthetic regression task and the federated training loop.
//!
//! Each client holds samples `y = x (θ_P + Δ* + U_g) + ε`, where `Δ*` is a
//! shared rank-`r_true` target and `U_g` a low-rank shift of the sample's
//! data group. Samples are sorted by group and cut into shards, so fewer
//! shards per client means more heterogeneous clients.
//!
//! A round samples the channel and the schedule, picks the sparsification
//! ratio, trains the scheduled clients from the broadcast adapter in
//! parallel, sparsifies their updates with error feedback and aggregates
//! what was received.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{drift_bound_b, memory_bound, theorem1_gamma_term, GammaBreakdown};
use crate::channel::{
    expected_gains, round_delay, sample_channel, sample_distances, schedule_clients, ChannelDraw,
    Payload,
};
use crate::config::{ExperimentConfig, Mode, TaskConfig, Weighting};
use crate::controller::{allocate_bandwidth, offline_select_rank, ControllerState, OfflineChoice};
use crate::error::{Error, Result};
use crate::lora::{orth_penalty_grad, Factors, LoraAdapter};
use crate::matcore::{Matrix, SimRng, Stream};
use crate::metrics::{Estimates, MemoryDiag, RoundRecord, RunSummary};
use crate::soft::{ErrorMemory, SparsifierKind};

/// Ground truth of the synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTask {
    pub theta_p: Matrix,
    pub delta_star: Matrix,
    /// Per-group low-rank shift added to `delta_star`.
    pub group_shifts: Vec<Matrix>,
    pub noise_std: f64,
    pub shards: usize,
    /// Data group of every sample, per client.
    pub client_groups: Vec<Vec<usize>>,
}

impl SynthTask {
    /// Full-rank target `θ_P + Δ* + U_g` of one group.
    pub fn group_target(&self, g: usize) -> Matrix {
        self.theta_p
            .add(&self.delta_star)
            .and_then(|m| m.add(&self.group_shifts[g]))
            .expect("task matrices share a shape")
    }
}

/// One client's samples, with the residual target `Z = Y - X θ_P` that the
/// adapter has to fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientData {
    pub id: usize,
    pub x: Matrix,
    pub y: Matrix,
    pub z: Matrix,
}

impl ClientData {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }
}

fn scaled_to_norm(m: Matrix, norm_sq: f64) -> Matrix {
    let cur = m.frobenius_sq();
    if cur == 0.0 || norm_sq == 0.0 {
        return Matrix::zeros(m.rows(), m.cols());
    }
    m.scale((norm_sq / cur).sqrt())
}

fn low_rank(rng: &mut SimRng, d: usize, l: usize, rank: usize, norm_sq: f64) -> Matrix {
    let b = rng.gaussian_matrix(d, rank, 1.0);
    let a = rng.gaussian_matrix(rank, l, 1.0);
    scaled_to_norm(b.matmul(&a).expect("inner dims agree"), norm_sq)
}

/// Builds the task and the per-client datasets from the `Task` stream.
///
/// `Δ*` is normalised to `|Δ*|_F² = l` and each raw shift to
/// `hetero_scale² l` before the shifts are centred across groups, so with
/// standard-normal inputs the shared target contributes unit variance per
/// output.
pub fn make_task(seed: u64, cfg: &TaskConfig) -> Result<(SynthTask, Vec<ClientData>)> {
    let (d, l, n, per) = (cfg.d, cfg.l, cfg.n_clients, cfg.samples_per_client);
    if cfg.shards > 0 && per % cfg.shards != 0 {
        return Err(Error::config("task.shards", "must divide samples_per_client"));
    }
    if cfg.groups == 0 {
        return Err(Error::config("task.groups", "must be at least 1"));
    }
    let mut rng = SimRng::stream(seed, Stream::Task);
    let theta_p = rng.gaussian_matrix(d, l, 1.0 / (d as f64).sqrt());
    let delta_star = low_rank(&mut rng, d, l, cfg.r_true, l as f64);
    let shift_sq = cfg.hetero_scale * cfg.hetero_scale * l as f64;
    let raw_shifts: Vec<Matrix> = (0..cfg.groups)
        .map(|_| low_rank(&mut rng, d, l, cfg.hetero_rank, shift_sq))
        .collect();
    // Groups are equally sized, so centred shifts leave Δ* as the global optimum.
    let mut mean_shift = Matrix::zeros(d, l);
    for u in &raw_shifts {
        mean_shift.axpy(1.0 / cfg.groups as f64, u)?;
    }
    let group_shifts: Vec<Matrix> = raw_shifts
        .iter()
        .map(|u| u.sub(&mean_shift))
        .collect::<Result<_>>()?;

    let client_groups: Vec<Vec<usize>> = if cfg.shards == 0 {
        vec![(0..per).map(|i| i % cfg.groups).collect(); n]
    } else {
        let total = n * per;
        let shard_len = per / cfg.shards;
        let mut order: Vec<usize> = (0..n * cfg.shards).collect();
        rng.shuffle(&mut order);
        order
            .chunks(cfg.shards)
            .map(|mine| {
                mine.iter()
                    .flat_map(|&s| (s * shard_len..(s + 1) * shard_len).map(|j| j * cfg.groups / total))
                    .collect()
            })
            .collect()
    };

    let task = SynthTask {
        theta_p,
        delta_star,
        group_shifts,
        noise_std: cfg.noise_std,
        shards: cfg.shards,
        client_groups,
    };
    let targets: Vec<Matrix> = (0..cfg.groups).map(|g| task.group_target(g)).collect();

    let mut clients = Vec::with_capacity(n);
    for (id, groups) in task.client_groups.iter().enumerate() {
        let x = rng.gaussian_matrix(per, d, 1.0);
        let mut y = Matrix::zeros(per, l);
        for (i, &g) in groups.iter().enumerate() {
            let xi = x.row(i);
            let yi = y.row_mut(i);
            for (p, &xp) in xi.iter().enumerate() {
                if xp == 0.0 {
                    continue;
                }
                for (yj, &t) in yi.iter_mut().zip(targets[g].row(p)) {
                    *yj += xp * t;
                }
            }
            if cfg.noise_std > 0.0 {
                for yj in yi.iter_mut() {
                    *yj += cfg.noise_std * rng.standard_normal();
                }
            }
        }
        let z = y.sub(&x.matmul(&task.theta_p)?)?;
        clients.push(ClientData { id, x, y, z });
    }
    Ok((task, clients))
}

/// Hyper-parameters of local training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalParams {
    pub epochs: usize,
    pub lr: f64,
    pub zeta: f64,
    pub batch: usize,
    /// LoRA scaling `α / r`.
    pub scaling: f64,
}

/// Result of a client's local training.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalResult {
    pub factors: Factors,
    /// Mean norm of the task-loss gradient over the steps taken.
    pub mean_grad_norm: f64,
    pub initial_loss: f64,
}

fn select_rows(m: &Matrix, idx: &[usize]) -> Matrix {
    let mut data = Vec::with_capacity(idx.len() * m.cols());
    for &i in idx {
        data.extend_from_slice(m.row(i));
    }
    Matrix::from_vec(idx.len(), m.cols(), data).expect("sizes agree")
}

/// Mean-squared error `|s X B A - Z|² / (n l)` and its factor gradients.
pub fn mse_and_grad(x: &Matrix, z: &Matrix, f: &Factors, scaling: f64) -> Result<(f64, Factors)> {
    let xb = x.matmul(&f.b)?;
    let mut resid = xb.matmul(&f.a)?;
    resid.scale_in_place(scaling);
    let resid = resid.sub(z)?;
    let denom = (x.rows() * z.cols()) as f64;
    let loss = resid.frobenius_sq() / denom;
    let g_out = resid.scale(2.0 / denom);
    let mut grad_a = xb.t_matmul(&g_out)?;
    grad_a.scale_in_place(scaling);
    let mut grad_b = x.t_matmul(&g_out.matmul_t(&f.a)?)?;
    grad_b.scale_in_place(scaling);
    Ok((loss, Factors { b: grad_b, a: grad_a }))
}

/// Mini-batch SGD on `MSE + ζ · orth_penalty`, starting from `start`.
/// Batches are reshuffled every epoch from `rng`.
pub fn local_train(
    rng: &mut SimRng,
    data: &ClientData,
    start: &Factors,
    params: &LocalParams,
    round: usize,
) -> Result<LocalResult> {
    let (initial_loss, _) = mse_and_grad(&data.x, &data.z, start, params.scaling)?;
    let mut f = start.clone();
    if params.epochs == 0 || params.lr == 0.0 || data.is_empty() {
        return Ok(LocalResult {
            factors: f,
            mean_grad_norm: 0.0,
            initial_loss,
        });
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let (mut grad_sum, mut steps) = (0.0, 0usize);
    for _ in 0..params.epochs {
        rng.shuffle(&mut order);
        for idx in order.chunks(params.batch.max(1)) {
            let xb = select_rows(&data.x, idx);
            let zb = select_rows(&data.z, idx);
            let (loss, mut grad) = mse_and_grad(&xb, &zb, &f, params.scaling)?;
            if !loss.is_finite() || (initial_loss > 0.0 && loss > 1e6 * initial_loss) {
                return Err(Error::Divergence {
                    round,
                    client: data.id,
                    loss,
                    initial: initial_loss,
                });
            }
            grad_sum += grad.frobenius_sq().sqrt();
            steps += 1;
            if params.zeta != 0.0 {
                grad.axpy(params.zeta, &orth_penalty_grad(&f.b, &f.a))?;
            }
            f.axpy(-params.lr, &grad)?;
        }
    }
    if !f.is_finite() {
        return Err(Error::Divergence {
            round,
            client: data.id,
            loss: f64::INFINITY,
            initial: initial_loss,
        });
    }
    Ok(LocalResult {
        factors: f,
        mean_grad_norm: grad_sum / steps as f64,
        initial_loss,
    })
}

fn check_weights(n_updates: usize, weights: &[f64]) -> Result<()> {
    if n_updates == 0 {
        return Err(Error::invalid("need at least one update"));
    }
    if weights.len() != n_updates {
        return Err(Error::invalid(format!(
            "{} weights for {n_updates} updates",
            weights.len()
        )));
    }
    Ok(())
}

/// Factor-wise weighted sum `(Σ w_k B_k, Σ w_k A_k)`.
pub fn aggregate(updates: &[Factors], weights: &[f64]) -> Result<Factors> {
    check_weights(updates.len(), weights)?;
    let first = &updates[0];
    let mut acc = Factors::zeros(first.d(), first.l(), first.rank());
    for (u, &w) in updates.iter().zip(weights) {
        acc.axpy(w, u)?;
    }
    Ok(acc)
}

/// `Σ w_k B_k A_k - (Σ w_k B_k)(Σ w_k A_k)` and its Frobenius norm.
pub fn covariance_diag(updates: &[Factors], weights: &[f64]) -> Result<(Matrix, f64)> {
    let mean = aggregate(updates, weights)?;
    let mut cov = Matrix::zeros(mean.d(), mean.l());
    for (u, &w) in updates.iter().zip(weights) {
        cov.axpy(w, &u.product())?;
    }
    let cov = cov.sub(&mean.product())?;
    let norm = cov.frobenius();
    Ok((cov, norm))
}

/// Global objective `Σ_k p_k |X_k M - Z_k|² / (n_k l)` held as sufficient
/// statistics, so evaluating it never touches the raw samples.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalObjective {
    gram: Matrix,
    cross: Matrix,
    z_sq: f64,
    l: usize,
}

impl GlobalObjective {
    pub fn new(clients: &[ClientData], weights: &[f64]) -> Result<Self> {
        check_weights(clients.len(), weights)?;
        let (d, l) = (clients[0].x.cols(), clients[0].z.cols());
        let mut gram = Matrix::zeros(d, d);
        let mut cross = Matrix::zeros(d, l);
        let mut z_sq = 0.0;
        for (c, &p) in clients.iter().zip(weights) {
            let w = p / c.len() as f64;
            gram.axpy(w, &c.x.t_matmul(&c.x)?)?;
            cross.axpy(w, &c.x.t_matmul(&c.z)?)?;
            z_sq += w * c.z.frobenius_sq();
        }
        Ok(Self { gram, cross, z_sq, l })
    }

    fn inner(a: &Matrix, b: &Matrix) -> f64 {
        a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
    }

    /// Loss at the weight update `M`.
    pub fn loss(&self, m: &Matrix) -> Result<f64> {
        let cm = self.gram.matmul(m)?;
        Ok((Self::inner(m, &cm) - 2.0 * Self::inner(m, &self.cross) + self.z_sq) / self.l as f64)
    }

    /// Gradient with respect to `M`: `(2 / l)(C M - C_z)`.
    pub fn grad_update(&self, m: &Matrix) -> Result<Matrix> {
        let mut g = self.gram.matmul(m)?.sub(&self.cross)?;
        g.scale_in_place(2.0 / self.l as f64);
        Ok(g)
    }

    /// Loss and gradient norm with respect to the adapter factors.
    pub fn eval_adapter(&self, adapter: &LoraAdapter) -> Result<(f64, f64)> {
        let s = adapter.scaling();
        let m = adapter.factors.product().scale(s);
        let loss = self.loss(&m)?;
        let g = self.grad_update(&m)?;
        let gb = g.matmul_t(adapter.a())?.frobenius_sq();
        let ga = adapter.b().t_matmul(&g)?.frobenius_sq();
        Ok((loss, s * (gb + ga).sqrt()))
    }
}

/// Per-client state that persists across rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub data: ClientData,
    pub memory: ErrorMemory,
    pub weight: f64,
    max_update_sq: f64,
    sum_sparse: Factors,
    sum_update: Factors,
}

/// Records and summary of a finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    pub summary: RunSummary,
}

/// A run in progress; [`Simulation::step`] advances one round.
pub struct Simulation {
    cfg: ExperimentConfig,
    task: SynthTask,
    clients: Vec<ClientState>,
    distances: Vec<f64>,
    offline: OfflineChoice,
    controller: ControllerState,
    global: LoraAdapter,
    objective: GlobalObjective,
    pool: rayon::ThreadPool,
    round: usize,
    initial_loss: f64,
    last_loss: f64,
    last_grad_norm: f64,
    min_loss: f64,
    sums: Sums,
    gammas: Vec<GammaBreakdown>,
    grad_ema: Option<f64>,
}

#[derive(Debug, Clone, Default)]
struct Sums {
    cov: f64,
    ratio: f64,
    delay: f64,
    d_bar: f64,
    memory_violations: usize,
    product_violations: usize,
    dropped: usize,
}

struct ClientOutcome {
    update: Factors,
    sparse: Factors,
    memory: ErrorMemory,
    grad_norm: f64,
}

impl Simulation {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let (task, data) = make_task(cfg.seed, &cfg.task)?;
        let n = cfg.task.n_clients;
        let weights = vec![1.0 / n as f64; n];
        let objective = GlobalObjective::new(&data, &weights)?;

        let distances = sample_distances(
            &mut SimRng::stream(cfg.seed, Stream::Distances),
            n,
            cfg.channel.dist_min,
            cfg.channel.dist_max,
        );
        let avg_gains = expected_gains(
            &mut SimRng::stream(cfg.seed, Stream::OfflineChannel),
            &distances,
            &cfg.channel_params(),
            cfg.control.offline_draws,
        );
        let consts = cfg.theory_consts();
        let offline = offline_select_rank(
            &consts,
            &avg_gains,
            &cfg.system_params(),
            cfg.control.d_th,
            cfg.control.o_min,
        )?;
        let rank = match cfg.control.mode {
            Mode::Tsfa => offline.rank,
            Mode::Osfa(r) => r,
            Mode::Fixed(_) => cfg.control.rank,
        };
        let alpha = cfg.task.alpha.unwrap_or(2.0 * rank as f64);
        let global = LoraAdapter::init(
            &mut SimRng::stream(cfg.seed, Stream::AdapterInit),
            cfg.task.d,
            cfg.task.l,
            rank,
            alpha,
        );
        let (initial_loss, grad) = objective.eval_adapter(&global)?;
        let (d, l) = (cfg.task.d, cfg.task.l);
        let clients = data
            .into_iter()
            .zip(weights)
            .map(|(data, weight)| ClientState {
                data,
                memory: ErrorMemory::zeros(d, l, rank),
                weight,
                max_update_sq: 0.0,
                sum_sparse: Factors::zeros(d, l, rank),
                sum_update: Factors::zeros(d, l, rank),
            })
            .collect();
        let mut builder = rayon::ThreadPoolBuilder::new();
        if cfg.threads > 0 {
            builder = builder.num_threads(cfg.threads);
        }
        let pool = builder
            .build()
            .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
        let controller = ControllerState {
            queue: 0.0,
            v: cfg.control.v,
            d_th: cfg.control.d_th,
            o_min: cfg.control.o_min,
            rank,
            consts,
        };
        Ok(Self {
            cfg: cfg.clone(),
            task,
            clients,
            distances,
            offline,
            controller,
            global,
            objective,
            pool,
            round: 0,
            initial_loss,
            last_loss: initial_loss,
            last_grad_norm: grad,
            min_loss: initial_loss,
            sums: Sums::default(),
            gammas: Vec::new(),
            grad_ema: None,
        })
    }

    pub fn task(&self) -> &SynthTask {
        &self.task
    }

    pub fn global(&self) -> &LoraAdapter {
        &self.global
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn distances(&self) -> &[f64] {
        &self.distances
    }

    pub fn offline(&self) -> &OfflineChoice {
        &self.offline
    }

    pub fn controller(&self) -> &ControllerState {
        &self.controller
    }

    pub fn objective(&self) -> &GlobalObjective {
        &self.objective
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn rank(&self) -> usize {
        self.controller.rank
    }

    fn local_params(&self) -> LocalParams {
        LocalParams {
            epochs: self.cfg.task.local_epochs,
            lr: self.cfg.task.lr,
            zeta: self.cfg.task.zeta,
            batch: self.cfg.task.batch,
            scaling: self.global.scaling(),
        }
    }

    fn weights(&self, selected: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let p: Vec<f64> = selected.iter().map(|&k| self.clients[k].weight).collect();
        let total: f64 = p.iter().sum();
        let renorm: Vec<f64> = p.iter().map(|w| w / total).collect();
        let applied = match self.cfg.weighting {
            Weighting::Renormalized => renorm.clone(),
            Weighting::Raw => p,
            Weighting::Rescaled => {
                let s = self.cfg.task.n_clients as f64 / selected.len() as f64;
                p.iter().map(|w| w * s).collect()
            }
        };
        (applied, renorm)
    }

    fn choose_ratio(&self, draw: &ChannelDraw, schedule: &crate::channel::Schedule) -> Result<f64> {
        if self.cfg.control.sparsifier == SparsifierKind::Dense {
            return Ok(1.0);
        }
        match self.cfg.control.mode {
            Mode::Fixed(o) => Ok(o),
            Mode::Tsfa | Mode::Osfa(_) => {
                self.controller.decide_ratio(draw, schedule, &self.cfg.system_params())
            }
        }
    }

    /// Runs one round and returns its record.
    pub fn step(&mut self) -> Result<RoundRecord> {
        let t = self.round;
        let seed = self.cfg.seed;
        let n = self.cfg.task.n_clients;
        let draw = sample_channel(
            &mut SimRng::stream(seed, Stream::Channel { round: t }),
            t,
            &self.distances,
            &self.cfg.channel_params(),
        )?;
        let picked = schedule_clients(
            &mut SimRng::stream(seed, Stream::Schedule { round: t }),
            n,
            self.cfg.task.clients_per_round,
        )?;
        let alloc = allocate_bandwidth(&picked, &draw)?;
        let schedule = alloc.schedule;
        self.sums.dropped += alloc.dropped.len();

        if self.cfg.theory.estimate {
            let w = self.global.per_rank_scores().max().sqrt();
            if w > 0.0 {
                self.controller.consts.w = w;
            }
            if let Some(g) = self.grad_ema.filter(|g| *g > 0.0) {
                self.controller.consts.g = g;
            }
        }
        let ratio = self.choose_ratio(&draw, &schedule)?;

        let params = self.local_params();
        let kind = self.cfg.control.sparsifier;
        let feedback = self.cfg.error_feedback;
        let rank = self.rank();
        let (d, l) = (self.cfg.task.d, self.cfg.task.l);
        let start = &self.global.factors;
        let clients = &self.clients;
        let outcomes: Vec<Result<ClientOutcome>> = self.pool.install(|| {
            schedule
                .selected
                .par_iter()
                .map(|&k| {
                    let c = &clients[k];
                    let mut rng = SimRng::stream(seed, Stream::Client { id: k, round: t });
                    let local = local_train(&mut rng, &c.data, start, &params, t)?;
                    let update = local.factors.sub(start)?;
                    let zero;
                    let memory = if feedback {
                        &c.memory
                    } else {
                        zero = ErrorMemory::zeros(d, l, rank);
                        &zero
                    };
                    let mut srng = SimRng::stream(seed, Stream::Sparsifier { id: k, round: t });
                    let out = kind.apply(&update, memory, ratio, &mut srng)?;
                    Ok(ClientOutcome {
                        update,
                        sparse: out.sparse,
                        memory: out.memory,
                        grad_norm: local.mean_grad_norm,
                    })
                })
                .collect()
        });
        let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;

        let mut memory = MemoryDiag {
            max_memory_sq: 0.0,
            memory_bound_slack: f64::INFINITY,
            product_bound_slack: f64::INFINITY,
        };
        let mut grad_sum = 0.0;
        for (&k, out) in schedule.selected.iter().zip(&outcomes) {
            let c = &mut self.clients[k];
            c.max_update_sq = c.max_update_sq.max(out.update.frobenius_sq());
            c.memory = if feedback {
                out.memory.clone()
            } else {
                ErrorMemory::zeros(d, l, rank)
            };
            c.sum_sparse.axpy(1.0, &out.sparse)?;
            c.sum_update.axpy(1.0, &out.update)?;
            let m_sq = c.memory.concat_norm_sq();
            let slack = memory_bound(ratio, c.max_update_sq)? - m_sq;
            let prod_slack = 0.5 * m_sq - c.memory.product_norm();
            memory.max_memory_sq = memory.max_memory_sq.max(m_sq);
            memory.memory_bound_slack = memory.memory_bound_slack.min(slack);
            memory.product_bound_slack = memory.product_bound_slack.min(prod_slack);
            self.sums.memory_violations += usize::from(slack < 0.0);
            self.sums.product_violations += usize::from(prod_slack < 0.0);
            grad_sum += out.grad_norm;
        }
        if !outcomes.is_empty() {
            let g = grad_sum / outcomes.len() as f64;
            let a = self.cfg.theory.ema;
            self.grad_ema = Some(match self.grad_ema {
                None => g,
                Some(prev) => (1.0 - a) * prev + a * g,
            });
        }

        let payload = Payload {
            bits_per_param: self.cfg.channel.bits_per_param,
            rank,
            d,
            l,
            ratio,
        };
        let bandwidth = self.cfg.channel.bandwidth_hz;
        let delay = round_delay(&schedule, &draw, &payload, bandwidth)?;
        let full_bits = Payload { ratio: 1.0, ..payload }.bits();
        let min_share = schedule
            .selected
            .iter()
            .map(|&k| schedule.shares[k])
            .fold(f64::INFINITY, f64::min);
        let min_gain = schedule
            .selected
            .iter()
            .map(|&k| draw.gains[k])
            .fold(f64::INFINITY, f64::min);
        self.sums.d_bar = self.sums.d_bar.max(full_bits / (min_share * bandwidth * min_gain));
        self.controller.observe_delay(delay);

        let (applied, renorm) = self.weights(&schedule.selected);
        let sparse: Vec<Factors> = outcomes.iter().map(|o| o.sparse.clone()).collect();
        let step = aggregate(&sparse, &applied)?;
        let received: Vec<Factors> = sparse
            .iter()
            .map(|s| start.add(s))
            .collect::<Result<_>>()?;
        let (_, cov_norm) = covariance_diag(&received, &renorm)?;
        self.global.factors.axpy(1.0, &step)?;

        let (loss, grad_norm) = self.objective.eval_adapter(&self.global)?;
        let gamma = theorem1_gamma_term(&self.controller.consts, rank, ratio, schedule.k(), n)?;
        self.last_loss = loss;
        self.last_grad_norm = grad_norm;
        self.min_loss = self.min_loss.min(loss);
        self.sums.cov += cov_norm;
        self.sums.ratio += ratio;
        self.sums.delay += delay;
        self.gammas.push(gamma);
        self.round += 1;

        Ok(RoundRecord {
            t,
            loss,
            grad_norm,
            orth_penalty: self.global.orth_penalty(),
            cov_norm,
            ratio,
            delay,
            queue: self.controller.queue,
            gamma,
            selected: schedule.selected.clone(),
            dropped: alloc.dropped,
            memory,
        })
    }

    /// Largest entry of `Σ sparse + m - Σ update` over all clients.
    pub fn telescoping_residual(&self) -> f64 {
        self.clients
            .iter()
            .map(|c| {
                let recon = c.sum_sparse.add(&c.memory.0).expect("same shapes");
                recon
                    .b
                    .max_abs_diff(&c.sum_update.b)
                    .max(recon.a.max_abs_diff(&c.sum_update.a))
            })
            .fold(0.0, f64::max)
    }

    pub fn summary(&self) -> RunSummary {
        let t = self.round;
        let mean = |x: f64| if t == 0 { 0.0 } else { x / t as f64 };
        let init_gap_proxy = self.initial_loss - self.min_loss;
        let gamma_mean = GammaBreakdown::mean(&self.gammas).with_init_gap(
            init_gap_proxy,
            self.cfg.task.lr,
            t,
        );
        RunSummary {
            rounds: t,
            rank: self.rank(),
            initial_ratio: self.offline.candidates[self.rank() - 1].ratio,
            offline_candidates: self.offline.candidates.clone(),
            delay_coeff: self.offline.delay_coeff,
            initial_loss: self.initial_loss,
            final_loss: self.last_loss,
            min_loss: self.min_loss,
            final_grad_norm: self.last_grad_norm,
            mean_cov_norm: mean(self.sums.cov),
            mean_ratio: mean(self.sums.ratio),
            mean_delay: mean(self.sums.delay),
            final_queue: self.controller.queue,
            d_bar: self.sums.d_bar,
            drift_b: drift_bound_b(self.sums.d_bar, self.cfg.control.d_th),
            gamma_mean,
            init_gap_proxy,
            telescoping_residual: self.cfg.error_feedback.then(|| self.telescoping_residual()),
            memory_bound_violations: self.sums.memory_violations,
            product_bound_violations: self.sums.product_violations,
            dropped_clients: self.sums.dropped,
            estimates: self.cfg.theory.estimate.then_some(Estimates {
                w: self.controller.consts.w,
                g: self.controller.consts.g,
            }),
        }
    }
}

/// Runs `task.rounds` rounds, handing each record to `sink` as it is
/// produced. On failure the records already emitted stay with the sink.
pub fn run_with_sink(cfg: &ExperimentConfig, mut sink: impl FnMut(&RoundRecord)) -> Result<RunSummary> {
    let mut sim = Simulation::new(cfg)?;
    for _ in 0..cfg.task.rounds {
        let rec = sim.step()?;
        sink(&rec);
    }
    Ok(sim.summary())
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let mut records = Vec::with_capacity(cfg.task.rounds);
    let summary = run_with_sink(cfg, |r| records.push(r.clone()))?;
    Ok(RunOutput { records, summary })
}
