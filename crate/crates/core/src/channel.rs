//! FDMA uplink: block fading, path loss, rates, delays and client sampling.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::SimRng;

/// Small-scale fading model for `s_k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fading {
    /// Circularly-symmetric complex Gaussian, `|s|² ~ Exp(1)`.
    #[default]
    Rayleigh,
    /// Real `s ~ N(0, 1)`, `|s|² ~ χ²₁`.
    RealGaussian,
}

impl FromStr for Fading {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rayleigh" => Ok(Fading::Rayleigh),
            "real_gaussian" => Ok(Fading::RealGaussian),
            other => Err(Error::invalid(format!("unknown fading model `{other}`"))),
        }
    }
}

impl fmt::Display for Fading {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fading::Rayleigh => "rayleigh",
            Fading::RealGaussian => "real_gaussian",
        })
    }
}

/// Radio environment shared by every client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub pathloss_exp: f64,
    pub noise_power: f64,
    pub fading: Fading,
}

impl ChannelParams {
    /// `|h|² = |s|² q^(-2γ)`.
    fn power_gain(&self, fading_power: f64, distance: f64) -> f64 {
        fading_power * distance.powf(-2.0 * self.pathloss_exp)
    }

    /// Spectral efficiency `log2(1 + |h|²/σ²)` in bit/s/Hz.
    pub fn spectral_efficiency(&self, fading_power: f64, distance: f64) -> f64 {
        (1.0 + self.power_gain(fading_power, distance) / self.noise_power).log2()
    }

    fn draw_fading_power(&self, rng: &mut SimRng) -> f64 {
        match self.fading {
            Fading::Rayleigh => {
                let re = rng.standard_normal();
                let im = rng.standard_normal();
                0.5 * (re * re + im * im)
            }
            Fading::RealGaussian => {
                let s = rng.standard_normal();
                s * s
            }
        }
    }
}

/// Per-client spectral efficiencies for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelDraw {
    pub round: usize,
    pub gains: Vec<f64>,
}

/// Block-fading draw for every client; constant within the round.
pub fn sample_channel(
    rng: &mut SimRng,
    round: usize,
    distances: &[f64],
    params: &ChannelParams,
) -> Result<ChannelDraw> {
    if !(params.noise_power > 0.0) {
        return Err(Error::invalid("noise power must be positive"));
    }
    if let Some(q) = distances.iter().find(|q| !(**q > 0.0)) {
        return Err(Error::invalid(format!("client distance must be positive, got {q}")));
    }
    let gains = distances
        .iter()
        .map(|&q| {
            let p = params.draw_fading_power(rng);
            params.spectral_efficiency(p, q)
        })
        .collect();
    Ok(ChannelDraw { round, gains })
}

/// Monte-Carlo estimate of `E[g_k]` per client.
pub fn expected_gains(
    rng: &mut SimRng,
    distances: &[f64],
    params: &ChannelParams,
    draws: usize,
) -> Vec<f64> {
    distances
        .iter()
        .map(|&q| {
            let sum: f64 = (0..draws)
                .map(|_| {
                    let p = params.draw_fading_power(rng);
                    params.spectral_efficiency(p, q)
                })
                .sum();
            sum / draws as f64
        })
        .collect()
}

/// Uniform client distances in `[lo, hi]`.
pub fn sample_distances(rng: &mut SimRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform_range(lo, hi)).collect()
}

/// Scheduled clients and their bandwidth shares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    /// Selected client ids, ascending.
    pub selected: Vec<usize>,
    /// `b_k` for every client in the population; zero when unselected.
    pub shares: Vec<f64>,
}

impl Schedule {
    pub fn k(&self) -> usize {
        self.selected.len()
    }

    pub fn n(&self) -> usize {
        self.shares.len()
    }

    /// Selection indicator `a_k`.
    pub fn indicator(&self, client: usize) -> bool {
        self.selected.binary_search(&client).is_ok()
    }
}

/// `K` of `N` clients uniformly without replacement; shares left at zero.
pub fn schedule_clients(rng: &mut SimRng, n: usize, k: usize) -> Result<Schedule> {
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "cannot schedule {k} clients out of {n}"
        )));
    }
    let mut selected = rng.sample_indices(n, k);
    selected.sort_unstable();
    Ok(Schedule {
        selected,
        shares: vec![0.0; n],
    })
}

/// Uplink payload description: `v O r (d + l)` bits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Payload {
    pub bits_per_param: f64,
    pub rank: usize,
    pub d: usize,
    pub l: usize,
    pub ratio: f64,
}

impl Payload {
    pub fn bits(&self) -> f64 {
        self.bits_per_param * self.ratio * (self.rank * (self.d + self.l)) as f64
    }
}

/// `D_k = v O r (d + l) / (b_k B g_k)` seconds.
pub fn client_delay(payload: &Payload, share: f64, bandwidth_hz: f64, gain: f64) -> Result<f64> {
    if !(share > 0.0) {
        return Err(Error::invalid(format!("bandwidth share must be positive, got {share}")));
    }
    if !(gain > 0.0) {
        return Err(Error::invalid("spectral efficiency is zero; client unreachable"));
    }
    Ok(payload.bits() / (share * bandwidth_hz * gain))
}

/// Round delay, set by the slowest scheduled client.
pub fn round_delay(
    schedule: &Schedule,
    draw: &ChannelDraw,
    payload: &Payload,
    bandwidth_hz: f64,
) -> Result<f64> {
    let mut worst = 0.0_f64;
    for &k in &schedule.selected {
        let dk = client_delay(payload, schedule.shares[k], bandwidth_hz, draw.gains[k])
            .map_err(|_| Error::UnreachableClient { client: k })?;
        worst = worst.max(dk);
    }
    Ok(worst)
}
