//! Agent observations, the dynamic communication graph, rewards and action
//! application for signal agents (SAs) and platoon agents (PAs).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{IntersectionId, NetworkSpec};
use crate::platoon::{PlatoonId, PlatoonRecord};
use crate::sim::{Actions, World};

/// PA action set: 15, 20, 25, 30 and 35 mph in m/s.
pub const ACTION_SPEEDS: [f64; 5] = [6.7056, 8.9408, 11.176, 13.4112, 15.6464];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    /// Fuel weight in the platoon reward.
    pub beta: f64,
    /// PA messages kept per SA.
    pub n_pa: usize,
    pub action_speeds: Vec<f64>,
    /// Queue normalizer (veh).
    pub queue_capacity: f64,
    /// Platoon size normalizer.
    pub size_norm: f64,
    /// Penalty ratio for a terminal platoon that never moved, and the cap on
    /// the fuel-per-metre term.
    pub fuel_ratio_cap: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            beta: 100.0,
            n_pa: 4,
            action_speeds: ACTION_SPEEDS.to_vec(),
            queue_capacity: 40.0,
            size_norm: 10.0,
            fuel_ratio_cap: 1.0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.action_speeds.is_empty() || self.action_speeds.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("agents.action_speeds must be nonempty and positive".into()));
        }
        if !(self.queue_capacity > 0.0 && self.size_norm > 0.0) {
            return Err(Error::Config("agents normalizers must be positive".into()));
        }
        if self.beta < 0.0 || self.fuel_ratio_cap < 0.0 {
            return Err(Error::Config("agents.beta and agents.fuel_ratio_cap must be nonnegative".into()));
        }
        Ok(())
    }

    /// Width of a PA observation vector on `net`.
    pub fn pa_obs_dim(&self, net: &NetworkSpec) -> usize {
        3 + 2 * net.max_phases()
    }
}

/// Normalized queue vector of one intersection (Eq. 2).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaObs {
    pub intersection: IntersectionId,
    /// Raw queue counts in approach-lane order.
    pub queues: Vec<u32>,
    /// `queues / capacity`, clamped to 1.
    pub features: Vec<f64>,
}

/// Observation of one bound platoon agent (Eq. 5).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaObs {
    pub platoon: PlatoonId,
    pub slot: usize,
    /// Approaching intersection r_i.
    pub intersection: IntersectionId,
    /// Leader distance to the stop line (m).
    pub distance: f64,
    pub size: usize,
    /// Leader speed (m/s).
    pub speed: f64,
    pub current_phase: usize,
    pub pass_phase: usize,
    /// `[d / link length, n / size_norm, v / max limit, onehot(p_r), onehot(p_pass)]`
    pub features: Vec<f64>,
}

pub fn sa_observation(id: IntersectionId, world: &World, cfg: &AgentConfig) -> SaObs {
    let queues = crate::signal::measure_queues(id, world);
    let features = queues.iter().map(|q| (*q as f64 / cfg.queue_capacity).min(1.0)).collect();
    SaObs { intersection: id, queues, features }
}

/// Observation of platoon `pid`; `None` when the platoon is not bound to a
/// pool slot or has no intersection ahead.
pub fn pa_observation(pid: PlatoonId, world: &World, cfg: &AgentConfig) -> Option<PaObs> {
    let p = world.platoons.get(&pid)?;
    let slot = p.slot?;
    let leader = world.vehicles.get(&p.leader())?;
    let link = world.net.link(leader.link);
    let intersection = link.to?;
    let next = leader.next_link()?;
    let pass_phase = world.net.allowed_phase_for(leader.lane, next).ok()?;
    let current_phase = world.signals[intersection.index()].current_phase;
    let distance = world.distance_to_stop_line(leader);
    let width = world.net.max_phases();
    let mut features = vec![
        distance / link.length,
        p.size() as f64 / cfg.size_norm,
        leader.speed / world.net.max_speed_limit(),
    ];
    features.extend(one_hot(current_phase, width));
    features.extend(one_hot(pass_phase, width));
    Some(PaObs {
        platoon: pid,
        slot,
        intersection,
        distance,
        size: p.size(),
        speed: leader.speed,
        current_phase,
        pass_phase,
        features,
    })
}

pub fn one_hot(index: usize, width: usize) -> Vec<f64> {
    let mut v = vec![0.0; width];
    if index < width {
        v[index] = 1.0;
    }
    v
}

/// Directed communication edges at one control step.
///
/// SAs are indexed by intersection, PAs by their position in the step's PA
/// observation list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeSet {
    /// Inbound SA neighbors of every SA, ascending intersection index.
    pub sa_neighbors: Vec<Vec<usize>>,
    /// Inbound PAs of every SA, ascending distance, at most `n_pa`.
    pub sa_pas: Vec<Vec<usize>>,
    /// The single SA sending to each PA.
    pub pa_sa: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AgentRef {
    Sa(usize),
    Pa(usize),
}

impl EdgeSet {
    /// All edges as `(sender, receiver)`.
    pub fn edges(&self) -> Vec<(AgentRef, AgentRef)> {
        let mut out = Vec::new();
        for (i, ns) in self.sa_neighbors.iter().enumerate() {
            out.extend(ns.iter().map(|j| (AgentRef::Sa(*j), AgentRef::Sa(i))));
        }
        for (i, ps) in self.sa_pas.iter().enumerate() {
            out.extend(ps.iter().map(|m| (AgentRef::Pa(*m), AgentRef::Sa(i))));
        }
        for (m, i) in self.pa_sa.iter().enumerate() {
            out.push((AgentRef::Sa(*i), AgentRef::Pa(m)));
        }
        out
    }

    pub fn has_edge(&self, from: AgentRef, to: AgentRef) -> bool {
        match (from, to) {
            (AgentRef::Sa(j), AgentRef::Sa(i)) => self.sa_neighbors.get(i).is_some_and(|n| n.contains(&j)),
            (AgentRef::Pa(m), AgentRef::Sa(i)) => self.sa_pas.get(i).is_some_and(|n| n.contains(&m)),
            (AgentRef::Sa(i), AgentRef::Pa(m)) => self.pa_sa.get(m) == Some(&i),
            (AgentRef::Pa(_), AgentRef::Pa(_)) => false,
        }
    }

    /// Check the structural invariants; returns a description of the first
    /// violation.
    pub fn check(&self, net: &NetworkSpec, pas: &[PaObs], n_pa: usize) -> std::result::Result<(), String> {
        for (i, ns) in self.sa_neighbors.iter().enumerate() {
            let expected: Vec<usize> =
                net.neighbors(IntersectionId(i as u32)).iter().map(|n| n.index()).collect();
            if *ns != expected {
                return Err(format!("SA {i} neighbors {ns:?} != topology {expected:?}"));
            }
            for j in ns {
                if !self.sa_neighbors[*j].contains(&i) {
                    return Err(format!("SA edge {j}->{i} has no reverse"));
                }
            }
        }
        if self.pa_sa.len() != pas.len() {
            return Err("every PA needs exactly one inbound SA edge".into());
        }
        for (m, pa) in pas.iter().enumerate() {
            if self.pa_sa[m] != pa.intersection.index() {
                return Err(format!("PA {m} hears SA {} instead of its approaching SA", self.pa_sa[m]));
            }
        }
        for (i, ps) in self.sa_pas.iter().enumerate() {
            if ps.len() > n_pa {
                return Err(format!("SA {i} keeps {} PAs > n_pa = {n_pa}", ps.len()));
            }
            for w in ps.windows(2) {
                if pas[w[0]].distance > pas[w[1]].distance {
                    return Err(format!("SA {i} PA order not ascending in distance"));
                }
            }
            for m in ps {
                if self.pa_sa[*m] != i {
                    return Err(format!("SA {i} hears PA {m} approaching another SA"));
                }
            }
            let approaching = pas.iter().filter(|p| p.intersection.index() == i).count();
            if ps.len() != approaching.min(n_pa) {
                return Err(format!("SA {i} keeps {} of {approaching} approaching PAs", ps.len()));
            }
        }
        Ok(())
    }
}

/// Build the edge set for one control step (Eqs. 11-13).
pub fn build_graph(net: &NetworkSpec, pas: &[PaObs], n_pa: usize) -> EdgeSet {
    let n = net.intersections.len();
    let sa_neighbors =
        (0..n).map(|i| net.neighbors(IntersectionId(i as u32)).iter().map(|j| j.index()).collect()).collect();
    let mut sa_pas: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (m, pa) in pas.iter().enumerate() {
        sa_pas[pa.intersection.index()].push(m);
    }
    for list in &mut sa_pas {
        list.sort_by(|a, b| pas[*a].distance.total_cmp(&pas[*b].distance).then(pas[*a].slot.cmp(&pas[*b].slot)));
        list.truncate(n_pa);
    }
    let pa_sa = pas.iter().map(|p| p.intersection.index()).collect();
    EdgeSet { sa_neighbors, sa_pas, pa_sa }
}

/// Everything the agents see at one control-step boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub sa: Vec<SaObs>,
    /// Bound PAs in slot order.
    pub pa: Vec<PaObs>,
    pub graph: EdgeSet,
}

pub fn observe(world: &World, cfg: &AgentConfig) -> Observation {
    let sa = world.net.intersections.iter().map(|int| sa_observation(int.id, world, cfg)).collect();
    let mut pa: Vec<PaObs> = world.platoons.keys().filter_map(|pid| pa_observation(*pid, world, cfg)).collect();
    pa.sort_by_key(|p| p.slot);
    let graph = build_graph(&world.net, &pa, cfg.n_pa);
    Observation { sa, pa, graph }
}

/// Eq. 7 terminal reward from lifetime accumulators.
///
/// `intervals` is the number of control steps the platoon existed for.
pub fn pa_reward_value(cum_distance: f64, cum_fuel: f64, intervals: usize, cfg: &AgentConfig) -> f64 {
    if cum_distance <= 0.0 {
        return -cfg.beta * cfg.fuel_ratio_cap;
    }
    cum_distance / intervals.max(1) as f64 - cfg.beta * (cum_fuel / cum_distance).min(cfg.fuel_ratio_cap)
}

/// Reward of a terminal platoon.
pub fn pa_reward(record: &PlatoonRecord, cfg: &AgentConfig) -> f64 {
    let intervals = record.terminal_step.saturating_sub(record.created_step);
    pa_reward_value(record.cum_distance, record.cum_fuel, intervals, cfg)
}

/// Apply a joint action: a phase per SA and an action index per bound PA.
pub fn apply_actions(world: &mut World, sa_phases: &[usize], pa_actions: &[(PlatoonId, usize)], cfg: &AgentConfig) -> Result<()> {
    let mut advisories = Vec::with_capacity(pa_actions.len());
    for (pid, a) in pa_actions {
        let speed = *cfg
            .action_speeds
            .get(*a)
            .ok_or_else(|| Error::InvalidAction(format!("PA action {a} outside the {}-speed set", cfg.action_speeds.len())))?;
        advisories.push((*pid, speed));
    }
    world.apply_actions(&Actions { phases: sa_phases.to_vec(), advisories })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::build_grid;

    fn pa(intersection: u32, distance: f64, slot: usize) -> PaObs {
        PaObs {
            platoon: PlatoonId(slot as u64),
            slot,
            intersection: IntersectionId(intersection),
            distance,
            size: 2,
            speed: 0.0,
            current_phase: 0,
            pass_phase: 0,
            features: vec![],
        }
    }

    #[test]
    fn reward_examples() {
        let cfg = AgentConfig { beta: 60.0, ..Default::default() };
        assert!((pa_reward_value(300.0, 50.0, 10, &cfg) - 20.0).abs() < 1e-12);
        let cfg0 = AgentConfig { beta: 0.0, ..Default::default() };
        assert!((pa_reward_value(300.0, 50.0, 10, &cfg0) - 30.0).abs() < 1e-12);
        assert_eq!(pa_reward_value(0.0, 3.0, 4, &AgentConfig::default()), -100.0);
    }

    #[test]
    fn graph_keeps_nearest_pas() {
        let net = build_grid(2, 3, 300.0, 1).unwrap();
        let ds = [250.0, 40.0, 120.0, 10.0, 300.0, 80.0, 200.0];
        let pas: Vec<PaObs> = ds.iter().enumerate().map(|(k, d)| pa(1, *d, k)).collect();
        let g = build_graph(&net, &pas, 4);
        assert_eq!(g.sa_pas[1], vec![3, 1, 5, 2]);
        g.check(&net, &pas, 4).unwrap();
        assert!(g.has_edge(AgentRef::Sa(1), AgentRef::Pa(4)));
        assert!(!g.has_edge(AgentRef::Pa(4), AgentRef::Sa(1)));
    }

    #[test]
    fn no_platoons_only_sa_edges() {
        let net = build_grid(2, 3, 300.0, 1).unwrap();
        let g = build_graph(&net, &[], 4);
        assert!(g.edges().iter().all(|(a, b)| matches!((a, b), (AgentRef::Sa(_), AgentRef::Sa(_)))));
        assert_eq!(g.edges().len(), 14);
    }
}
