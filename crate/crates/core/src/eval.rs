//! Seeded evaluation of trained and baseline controllers, and sensitivity
//! sweeps over demand and CAV penetration.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::net::NetworkSpec;
use crate::nn::Checkpoint;
use crate::sim::{run_episode, Backpressure, Controller, EpisodeResult, FixedTime, MetricsRow, SimConfig};
use crate::train::{JointPolicy, JointSp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    Jointsp,
    Backpressure,
    Fixed,
    SaOnly,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 4] =
        [ControllerKind::Jointsp, ControllerKind::Backpressure, ControllerKind::Fixed, ControllerKind::SaOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            ControllerKind::Jointsp => "jointsp",
            ControllerKind::Backpressure => "backpressure",
            ControllerKind::Fixed => "fixed",
            ControllerKind::SaOnly => "sa-only",
        }
    }

    pub fn needs_checkpoint(self) -> bool {
        matches!(self, ControllerKind::Jointsp | ControllerKind::SaOnly)
    }
}

impl FromStr for ControllerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown controller {s:?} (jointsp, backpressure, fixed, sa-only)")))
    }
}

/// Seed of evaluation episode `episode` in a run seeded `run_seed`.
pub fn episode_seed(run_seed: u64, episode: usize) -> u64 {
    run_seed.wrapping_mul(10_007).wrapping_add(episode as u64)
}

/// Load a checkpoint and check it matches this run's agents and network.
pub fn load_policy(path: &Path, net: &NetworkSpec, cfg: &RunConfig) -> Result<JointPolicy> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.check_compatible(&JointPolicy::expected_arch_hash(net, &cfg.agents, &cfg.model), &net.content_hash())?;
    Ok(JointPolicy::from_checkpoint(ckpt))
}

pub fn make_controller(
    kind: ControllerKind,
    policy: Option<&JointPolicy>,
    cfg: &RunConfig,
    seed: u64,
) -> Result<Box<dyn Controller>> {
    let need = || policy.cloned().ok_or_else(|| Error::Config(format!("controller {} needs a checkpoint", kind.as_str())));
    Ok(match kind {
        ControllerKind::Jointsp => Box::new(JointSp::new(need()?, cfg.agents.clone(), cfg.eval.greedy, seed)),
        ControllerKind::SaOnly => Box::new(JointSp::sa_only(need()?, cfg.agents.clone(), cfg.eval.greedy, seed)),
        ControllerKind::Backpressure => Box::new(Backpressure),
        ControllerKind::Fixed => Box::new(FixedTime { hold: cfg.sim.fixed_time_hold }),
    })
}

#[derive(Debug, Clone)]
pub struct EpisodeSummary {
    pub episode: usize,
    pub seed: u64,
    pub result: EpisodeResult,
}

/// Run `cfg.eval.episodes` episodes of `kind` under `sim`.
pub fn evaluate_with(
    net: &Arc<NetworkSpec>,
    cfg: &RunConfig,
    sim: &SimConfig,
    kind: ControllerKind,
    policy: Option<&JointPolicy>,
) -> Result<Vec<EpisodeSummary>> {
    (0..cfg.eval.episodes)
        .map(|episode| {
            let seed = episode_seed(cfg.seed, episode);
            let mut ctl = make_controller(kind, policy, cfg, seed)?;
            let result = run_episode(net.clone(), sim, seed, ctl.as_mut())?;
            Ok(EpisodeSummary { episode, seed, result })
        })
        .collect()
}

pub fn evaluate(
    net: &Arc<NetworkSpec>,
    cfg: &RunConfig,
    kind: ControllerKind,
    policy: Option<&JointPolicy>,
) -> Result<Vec<EpisodeSummary>> {
    evaluate_with(net, cfg, &cfg.sim, kind, policy)
}

/// One row per episode, then a `summary` row with episode means and the
/// total completed count.
pub fn metrics_rows(kind: ControllerKind, run_seed: u64, episodes: &[EpisodeSummary]) -> Vec<MetricsRow> {
    let mut rows: Vec<MetricsRow> = episodes
        .iter()
        .map(|e| MetricsRow {
            episode: e.episode.to_string(),
            seed: e.seed,
            controller: kind.as_str().to_string(),
            mean_travel_time_s: e.result.metrics.mean_travel_time_s,
            mean_fuel_g: e.result.metrics.mean_fuel_g,
            vehicles_completed: e.result.metrics.vehicles_completed,
        })
        .collect();
    let n = rows.len().max(1) as f64;
    let summary = MetricsRow {
        episode: "summary".into(),
        seed: run_seed,
        controller: kind.as_str().to_string(),
        mean_travel_time_s: rows.iter().map(|r| r.mean_travel_time_s).sum::<f64>() / n,
        mean_fuel_g: rows.iter().map(|r| r.mean_fuel_g).sum::<f64>() / n,
        vehicles_completed: rows.iter().map(|r| r.vehicles_completed).sum(),
    };
    rows.push(summary);
    rows
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    DemandMultiplier,
    CavRate,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::DemandMultiplier => "demand_multiplier",
            SweepAxis::CavRate => "cav_rate",
        }
    }

    pub fn apply(self, sim: &mut SimConfig, value: f64) {
        match self {
            SweepAxis::DemandMultiplier => sim.demand.demand_multiplier = value,
            SweepAxis::CavRate => sim.demand.cav_rate = value,
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "demand_multiplier" => Ok(SweepAxis::DemandMultiplier),
            "cav_rate" => Ok(SweepAxis::CavRate),
            _ => Err(Error::Config(format!("unknown sweep axis {s:?} (demand_multiplier, cav_rate)"))),
        }
    }
}

/// One sweep point aggregated over its evaluation episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub controller: String,
    pub episodes: usize,
    pub median_travel_time_s: f64,
    pub mean_travel_time_s: f64,
    pub mean_fuel_g: f64,
    pub vehicles_completed: usize,
    pub formations: u64,
}

pub fn sweep(
    net: &Arc<NetworkSpec>,
    cfg: &RunConfig,
    kind: ControllerKind,
    policy: Option<&JointPolicy>,
    axis: SweepAxis,
    values: &[f64],
) -> Result<Vec<SweepRow>> {
    values
        .iter()
        .map(|&value| {
            let mut sim = cfg.sim.clone();
            axis.apply(&mut sim, value);
            sim.validate()?;
            let eps = evaluate_with(net, cfg, &sim, kind, policy)?;
            let tts: Vec<f64> = eps.iter().map(|e| e.result.metrics.mean_travel_time_s).collect();
            let n = eps.len().max(1) as f64;
            Ok(SweepRow {
                axis: axis.as_str().to_string(),
                value,
                controller: kind.as_str().to_string(),
                episodes: eps.len(),
                median_travel_time_s: median(&tts),
                mean_travel_time_s: tts.iter().sum::<f64>() / n,
                mean_fuel_g: eps.iter().map(|e| e.result.metrics.mean_fuel_g).sum::<f64>() / n,
                vehicles_completed: eps.iter().map(|e| e.result.metrics.vehicles_completed).sum(),
                formations: eps.iter().map(|e| e.result.formations).sum(),
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(mut out: W, header: &[String], rows: &[SweepRow]) -> Result<()> {
    let io = |e: std::io::Error| Error::io("<sweep csv>", e);
    for line in header {
        writeln!(out, "# {line}").map_err(io)?;
    }
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| Error::Config(format!("csv: {e}")))?;
    }
    w.flush().map_err(io)
}
