//! Experiment configuration.
//!
//! Every field has a default, unknown keys are rejected and
//! [`ExperimentConfig::validate`] reports the first offending field by its
//! dotted path.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelParams, Fading};
use crate::controller::{SystemParams, TheoryConsts};
use crate::error::{Error, Result};
use crate::soft::SparsifierKind;

/// How the rank and per-round ratio are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Mode {
    /// Offline rank selection followed by online ratio control.
    Tsfa,
    /// Online ratio control at a forced rank.
    Osfa(usize),
    /// Constant ratio at `control.rank`.
    Fixed(f64),
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config("control.mode", format!("expected tsfa, osfa:<rank> or fixed:<ratio>, got `{s}`"));
        match s.split_once(':') {
            None if s == "tsfa" => Ok(Mode::Tsfa),
            Some(("osfa", r)) => r.trim().parse().map(Mode::Osfa).map_err(|_| bad()),
            Some(("fixed", o)) => o.trim().parse().map(Mode::Fixed).map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Tsfa => f.write_str("tsfa"),
            Mode::Osfa(r) => write!(f, "osfa:{r}"),
            Mode::Fixed(o) => write!(f, "fixed:{o}"),
        }
    }
}

impl TryFrom<String> for Mode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Mode> for String {
    fn from(m: Mode) -> String {
        m.to_string()
    }
}

/// Aggregation weights over the scheduled set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `p_k / Σ_{j scheduled} p_j`.
    #[default]
    Renormalized,
    /// Global `p_k`; the update is under-weighted under partial participation.
    Raw,
    /// `p_k N / K`.
    Rescaled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub d: usize,
    pub l: usize,
    pub r_true: usize,
    pub n_clients: usize,
    pub clients_per_round: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub lr: f64,
    /// Orthogonality-penalty weight.
    pub zeta: f64,
    /// LoRA scaling numerator; `None` means `2 r`.
    pub alpha: Option<f64>,
    pub batch: usize,
    pub samples_per_client: usize,
    /// Shards per client; `0` gives every client the same group mix.
    pub shards: usize,
    /// Number of data groups, each with its own target shift.
    pub groups: usize,
    /// Norm of each group shift relative to the shared target.
    pub hetero_scale: f64,
    pub hetero_rank: usize,
    pub noise_std: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            d: 64,
            l: 64,
            r_true: 8,
            n_clients: 100,
            clients_per_round: 10,
            rounds: 300,
            local_epochs: 1,
            lr: 0.2,
            zeta: 1e-3,
            alpha: None,
            batch: 16,
            samples_per_client: 64,
            shards: 2,
            groups: 10,
            hetero_scale: 0.5,
            hetero_rank: 2,
            noise_std: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    pub bandwidth_hz: f64,
    pub noise_power: f64,
    pub pathloss_exp: f64,
    pub bits_per_param: f64,
    pub dist_min: f64,
    pub dist_max: f64,
    pub fading: Fading,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            bandwidth_hz: 1e6,
            noise_power: 1e-12,
            pathloss_exp: 2.2,
            bits_per_param: 32.0,
            dist_min: 50.0,
            dist_max: 150.0,
            fading: Fading::Rayleigh,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    pub mode: Mode,
    pub sparsifier: SparsifierKind,
    /// Per-round latency budget in seconds.
    pub d_th: f64,
    pub v: f64,
    pub o_min: f64,
    pub r_max: usize,
    /// Rank used by `fixed:<ratio>`.
    pub rank: usize,
    /// Clients per round assumed offline; `None` means `clients_per_round`.
    pub k0: Option<usize>,
    pub offline_draws: usize,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Tsfa,
            sparsifier: SparsifierKind::Soft,
            d_th: 0.036,
            v: 1e-4,
            o_min: 0.05,
            r_max: 16,
            rank: 8,
            k0: None,
            offline_draws: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    pub s: f64,
    pub w: f64,
    pub g: f64,
    pub h: f64,
    pub phi: f64,
    /// Replace `W` and `G` by running estimates.
    pub estimate: bool,
    /// Smoothing factor of the gradient-norm moving average.
    pub ema: f64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            s: 1.0,
            w: 1.0,
            g: 1.0,
            h: 1.0,
            phi: 0.1,
            estimate: false,
            ema: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Worker threads for client training; `0` uses all cores.
    pub threads: usize,
    pub error_feedback: bool,
    pub weighting: Weighting,
    pub task: TaskConfig,
    pub channel: ChannelConfig,
    pub control: ControlConfig,
    pub theory: TheoryConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            error_feedback: true,
            weighting: Weighting::Renormalized,
            task: TaskConfig::default(),
            channel: ChannelConfig::default(),
            control: ControlConfig::default(),
            theory: TheoryConfig::default(),
        }
    }
}

/// Dotted paths accepted by sweeps.
pub const SWEEPABLE: &[&str] = &[
    "seed",
    "error_feedback",
    "weighting",
    "task.d",
    "task.l",
    "task.r_true",
    "task.n_clients",
    "task.clients_per_round",
    "task.rounds",
    "task.local_epochs",
    "task.lr",
    "task.zeta",
    "task.alpha",
    "task.batch",
    "task.samples_per_client",
    "task.shards",
    "task.groups",
    "task.hetero_scale",
    "task.hetero_rank",
    "task.noise_std",
    "channel.bandwidth_hz",
    "channel.noise_power",
    "channel.pathloss_exp",
    "channel.bits_per_param",
    "channel.dist_min",
    "channel.dist_max",
    "channel.fading",
    "control.mode",
    "control.sparsifier",
    "control.d_th",
    "control.v",
    "control.o_min",
    "control.r_max",
    "control.rank",
    "control.k0",
    "control.offline_draws",
    "theory.s",
    "theory.w",
    "theory.g",
    "theory.h",
    "theory.phi",
    "theory.estimate",
    "theory.ema",
];

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be positive and finite, got {v}")))
    }
}

fn at_least_one(field: &str, v: usize) -> Result<()> {
    if v >= 1 {
        Ok(())
    } else {
        Err(Error::config(field, "must be at least 1"))
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::config("<toml>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::config("<json>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.task;
        for (f, v) in [
            ("task.d", t.d),
            ("task.l", t.l),
            ("task.r_true", t.r_true),
            ("task.n_clients", t.n_clients),
            ("task.clients_per_round", t.clients_per_round),
            ("task.batch", t.batch),
            ("task.samples_per_client", t.samples_per_client),
            ("task.groups", t.groups),
            ("task.hetero_rank", t.hetero_rank),
        ] {
            at_least_one(f, v)?;
        }
        if t.clients_per_round > t.n_clients {
            return Err(Error::config("task.clients_per_round", "cannot exceed task.n_clients"));
        }
        if t.r_true > t.d.min(t.l) || t.hetero_rank > t.d.min(t.l) {
            return Err(Error::config("task.r_true", "ranks cannot exceed min(d, l)"));
        }
        if !(t.lr >= 0.0 && t.lr.is_finite()) {
            return Err(Error::config("task.lr", "must be non-negative and finite"));
        }
        if !(t.zeta >= 0.0 && t.zeta.is_finite()) {
            return Err(Error::config("task.zeta", "must be non-negative and finite"));
        }
        if let Some(a) = t.alpha {
            if !a.is_finite() {
                return Err(Error::config("task.alpha", "must be finite"));
            }
        }
        if !(t.noise_std >= 0.0 && t.hetero_scale >= 0.0) {
            return Err(Error::config("task.noise_std", "noise_std and hetero_scale must be non-negative"));
        }
        if t.shards > 0 && t.samples_per_client % t.shards != 0 {
            return Err(Error::config(
                "task.shards",
                format!(
                    "must divide samples_per_client ({}) or be 0 for the mixed split",
                    t.samples_per_client
                ),
            ));
        }

        let c = &self.channel;
        positive("channel.bandwidth_hz", c.bandwidth_hz)?;
        positive("channel.noise_power", c.noise_power)?;
        positive("channel.bits_per_param", c.bits_per_param)?;
        positive("channel.dist_min", c.dist_min)?;
        if !(c.pathloss_exp >= 0.0) {
            return Err(Error::config("channel.pathloss_exp", "must be non-negative"));
        }
        if !(c.dist_max >= c.dist_min && c.dist_max.is_finite()) {
            return Err(Error::config("channel.dist_max", "must be finite and at least dist_min"));
        }

        let k = &self.control;
        positive("control.d_th", k.d_th)?;
        if !(k.v >= 0.0 && k.v.is_finite()) {
            return Err(Error::config("control.v", "must be non-negative and finite"));
        }
        if !(k.o_min > 0.0 && k.o_min < 1.0) {
            return Err(Error::config("control.o_min", "must lie in (0, 1)"));
        }
        at_least_one("control.r_max", k.r_max)?;
        at_least_one("control.offline_draws", k.offline_draws)?;
        if let Some(k0) = k.k0 {
            if k0 == 0 || k0 > t.n_clients {
                return Err(Error::config("control.k0", "must lie in 1..=task.n_clients"));
            }
        }
        match k.mode {
            Mode::Tsfa => {}
            Mode::Osfa(r) => {
                if r == 0 || r > k.r_max {
                    return Err(Error::config("control.mode", "osfa rank must lie in 1..=control.r_max"));
                }
            }
            Mode::Fixed(o) => {
                if !(o > 0.0 && o <= 1.0) {
                    return Err(Error::config("control.mode", "fixed ratio must lie in (0, 1]"));
                }
                if k.rank == 0 || k.rank > k.r_max {
                    return Err(Error::config("control.rank", "must lie in 1..=control.r_max"));
                }
            }
        }
        if k.r_max > t.d.min(t.l) {
            return Err(Error::config("control.r_max", "cannot exceed min(d, l)"));
        }

        let th = &self.theory;
        for (f, v) in [
            ("theory.s", th.s),
            ("theory.w", th.w),
            ("theory.g", th.g),
            ("theory.h", th.h),
            ("theory.phi", th.phi),
        ] {
            positive(f, v)?;
        }
        if !(th.ema > 0.0 && th.ema <= 1.0) {
            return Err(Error::config("theory.ema", "must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn k0(&self) -> usize {
        self.control.k0.unwrap_or(self.task.clients_per_round)
    }

    pub fn theory_consts(&self) -> TheoryConsts {
        TheoryConsts {
            s: self.theory.s,
            w: self.theory.w,
            g: self.theory.g,
            h: self.theory.h,
            phi: self.theory.phi,
            r_max: self.control.r_max,
            local_epochs: self.task.local_epochs,
            lr: self.task.lr,
        }
    }

    pub fn system_params(&self) -> SystemParams {
        SystemParams {
            n_clients: self.task.n_clients,
            k0: self.k0(),
            bits_per_param: self.channel.bits_per_param,
            d: self.task.d,
            l: self.task.l,
            bandwidth_hz: self.channel.bandwidth_hz,
        }
    }

    pub fn channel_params(&self) -> ChannelParams {
        ChannelParams {
            pathloss_exp: self.channel.pathloss_exp,
            noise_power: self.channel.noise_power,
            fading: self.channel.fading,
        }
    }

    /// Returns a copy with the dotted `path` set to `raw`, parsed as JSON
    /// when possible and as a bare string otherwise.
    pub fn with_override(&self, path: &str, raw: &str) -> Result<Self> {
        if !SWEEPABLE.contains(&path) {
            return Err(Error::config(
                path,
                format!("not sweepable; choose one of: {}", SWEEPABLE.join(", ")),
            ));
        }
        let mut root = serde_json::to_value(self).expect("config serializes");
        let mut slot = &mut root;
        for part in path.split('.') {
            slot = slot
                .get_mut(part)
                .ok_or_else(|| Error::config(path, "missing from config"))?;
        }
        let raw = raw.trim();
        *slot = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let cfg: Self = serde_json::from_value(root).map_err(|e| Error::config(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
