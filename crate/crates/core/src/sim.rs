//! Simulation engine: demand, the substep loop, fuel surrogate, metrics and
//! episode lifecycle.
//!
//! One control step is `substeps` substeps of `dt` seconds. Per substep the
//! engine spawns arrivals, computes every speed from the previous state,
//! enforces stop lines, moves vehicles and handles link transitions, then
//! updates waiting/queue statistics and fuel. Platoon maneuvers run at
//! control-step boundaries only.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    idm_next_speed, krauss_next_speed, krauss_safe_speed, step_vehicle, DynamicsParams, LeaderInfo, Role, StepOutcome,
    VehicleId, VehicleState,
};
use crate::error::{Error, Result};
use crate::net::{LaneId, LinkId, NetworkSpec};
use crate::platoon::{
    apply_advisory, end_episode, update_platoons, PaPool, Platoon, PlatoonConfig, PlatoonEvent, PlatoonEventKind,
    PlatoonId, PlatoonRecord,
};
use crate::signal::{backpressure_select, fixed_time_select, sa_reward, set_phase, SignalState};

/// Surrogate fuel model (g/s); coefficients are declared constants, not
/// emission-database values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FuelModel {
    pub r_idle: f64,
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl Default for FuelModel {
    fn default() -> Self {
        Self { r_idle: 0.18, c0: 0.12, c1: 0.02, c2: 0.00008, c3: 0.09 }
    }
}

impl FuelModel {
    pub fn rate(&self, v: f64, a: f64) -> f64 {
        (self.c0 + self.c1 * v + self.c2 * v.powi(3) + self.c3 * (v * a).max(0.0)).max(self.r_idle)
    }
}

/// Fuel rate under the default surrogate.
pub fn fuel_rate(v: f64, a: f64) -> f64 {
    FuelModel::default().rate(v, a)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdWeight {
    pub entry: u32,
    pub exit: u32,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemandConfig {
    /// Arrivals per intersection (veh/h).
    pub arrival_rate: f64,
    pub demand_multiplier: f64,
    pub cav_rate: f64,
    /// Optional OD table. Empty means uniform over entries and over the exits
    /// reachable from each entry without a U-turn.
    pub od_weights: Vec<OdWeight>,
}

impl Default for DemandConfig {
    fn default() -> Self {
        Self { arrival_rate: 1641.0, demand_multiplier: 1.0, cav_rate: 1.0, od_weights: Vec::new() }
    }
}

impl DemandConfig {
    /// Total network arrival rate (veh/s).
    pub fn network_rate(&self, intersections: usize) -> f64 {
        self.arrival_rate * self.demand_multiplier * intersections as f64 / 3600.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Substep length (s).
    pub dt: f64,
    pub substeps: usize,
    /// Episode length in control steps.
    pub horizon: usize,
    /// Control steps at the start of an episode excluded from metrics.
    pub warmup_steps: usize,
    /// All-red time inserted on a phase change (s).
    pub yellow_time: f64,
    /// Weight of the head-of-queue term in the signal reward.
    pub alpha: f64,
    pub queue_speed_threshold: f64,
    pub pool_size: usize,
    /// Control steps per phase for the fixed-time baseline.
    pub fixed_time_hold: usize,
    pub record_events: bool,
    pub dynamics: DynamicsParams,
    pub platoon: PlatoonConfig,
    pub demand: DemandConfig,
    pub fuel: FuelModel,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 1.0,
            substeps: 5,
            horizon: 720,
            warmup_steps: 0,
            yellow_time: 0.0,
            alpha: 1.0,
            queue_speed_threshold: 0.1,
            pool_size: 100,
            fixed_time_hold: 6,
            record_events: false,
            dynamics: DynamicsParams::default(),
            platoon: PlatoonConfig::default(),
            demand: DemandConfig::default(),
            fuel: FuelModel::default(),
        }
    }
}

impl SimConfig {
    pub fn control_period(&self) -> f64 {
        self.dt * self.substeps as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.dt > 0.0) {
            return bad(format!("sim.dt must be positive, got {}", self.dt));
        }
        if self.substeps == 0 || self.horizon == 0 {
            return bad("sim.substeps and sim.horizon must be positive".into());
        }
        if !(0.0..=5.0).contains(&self.yellow_time) {
            return bad(format!("sim.yellow_time must lie in [0, 5], got {}", self.yellow_time));
        }
        if self.alpha < 0.0 {
            return bad("sim.alpha must be nonnegative".into());
        }
        let d = &self.demand;
        if d.arrival_rate < 0.0 || d.demand_multiplier < 0.0 {
            return bad("demand rates must be nonnegative".into());
        }
        if !(0.0..=1.0).contains(&d.cav_rate) {
            return bad(format!("demand.cav_rate must lie in [0, 1], got {}", d.cav_rate));
        }
        if d.od_weights.iter().any(|w| !(w.weight >= 0.0)) {
            return bad("demand.od_weights entries must be nonnegative".into());
        }
        let p = &self.platoon;
        if p.max_size < 2 {
            return bad("platoon.max_size must be at least 2".into());
        }
        if !(p.headway_speed_floor > 0.0) {
            return bad("platoon.headway_speed_floor must be positive".into());
        }
        self.dynamics.validate().map_err(Error::Config)
    }
}

/// Completed trip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripRecord {
    pub id: VehicleId,
    pub cav: bool,
    pub spawn_time: f64,
    pub insert_time: f64,
    pub exit_time: f64,
    pub travel_time: f64,
    pub fuel: f64,
    pub distance: f64,
    pub waiting_time: f64,
}

/// Safety and consistency counters collected every substep.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SafetyAudit {
    pub substeps: u64,
    pub negative_gaps: u64,
    pub red_crossings: u64,
    pub conservation_violations: u64,
    pub speed_cap_violations: u64,
    /// IDM evaluations at a non-positive gap.
    pub dynamics_anomalies: u64,
    /// Crossing vehicles held because the target lane had no room.
    pub spillback_holds: u64,
    pub min_gap: f64,
}

#[derive(Debug, Clone)]
struct Pending {
    spawn_time: f64,
    route: usize,
    cav: bool,
    factor: f64,
}

#[derive(Debug, Clone)]
struct EntryStream {
    rng: ChaCha8Rng,
    arrivals: Option<Exp<f64>>,
    next_arrival: f64,
    /// (route index, weight)
    exits: Vec<(usize, f64)>,
    pending: VecDeque<Pending>,
}

/// Joint control input for one control step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Actions {
    /// Phase per intersection, in intersection order.
    pub phases: Vec<usize>,
    pub advisories: Vec<(PlatoonId, f64)>,
}

/// Outcome of one control step.
#[derive(Debug, Clone, Default)]
pub struct StepReport {
    /// Eq. 4 reward per intersection.
    pub sa_rewards: Vec<f64>,
    pub events: Vec<PlatoonEvent>,
    /// Platoons that reached a terminal state at the end of this step.
    pub finished: Vec<PlatoonRecord>,
}

pub struct World {
    pub net: Arc<NetworkSpec>,
    pub config: SimConfig,
    pub seed: u64,
    pub clock: f64,
    pub control_step: usize,
    pub vehicles: BTreeMap<VehicleId, VehicleState>,
    /// Vehicles per lane, front (closest to the stop line) first.
    pub lanes: Vec<VecDeque<VehicleId>>,
    pub platoons: BTreeMap<PlatoonId, Platoon>,
    pub signals: Vec<SignalState>,
    pub pool: PaPool,
    pub entered: u64,
    pub exited: u64,
    pub trips: Vec<TripRecord>,
    pub finished_platoons: Vec<PlatoonRecord>,
    pub audit: SafetyAudit,
    pub event_log: Vec<PlatoonEvent>,
    pub formations: u64,
    next_vehicle: u64,
    next_platoon: u64,
    entries: Vec<EntryStream>,
    routes: Vec<Vec<LinkId>>,
    /// lane -> (intersection index, slot in its approach lane list)
    lane_slot: Vec<Option<(usize, usize)>>,
}

impl World {
    pub fn new(net: Arc<NetworkSpec>, config: SimConfig, seed: u64) -> Result<World> {
        config.validate()?;
        let mut routes = Vec::new();
        let mut route_of: HashMap<(LinkId, LinkId), usize> = HashMap::new();
        let mut route_for = |entry: LinkId, exit: LinkId| -> Option<usize> {
            if let Some(r) = route_of.get(&(entry, exit)) {
                return Some(*r);
            }
            let path = net.shortest_route(entry, exit)?;
            routes.push(path);
            route_of.insert((entry, exit), routes.len() - 1);
            Some(routes.len() - 1)
        };

        let total_rate = config.demand.network_rate(net.intersections.len());
        let od = &config.demand.od_weights;
        let mut plans: Vec<Vec<(usize, f64)>> = Vec::new();
        for entry in &net.entry_links {
            let mut exits = Vec::new();
            if od.is_empty() {
                for exit in &net.exit_links {
                    if net.is_u_turn_exit(*entry, *exit) {
                        continue;
                    }
                    if let Some(r) = route_for(*entry, *exit) {
                        exits.push((r, 1.0));
                    }
                }
            } else {
                for w in od.iter().filter(|w| w.entry == entry.0 && w.weight > 0.0) {
                    let exit = LinkId(w.exit);
                    if !net.exit_links.contains(&exit) {
                        return Err(Error::Config(format!("od weight names unknown exit link {exit}")));
                    }
                    let r = route_for(*entry, exit)
                        .ok_or_else(|| Error::Config(format!("no route from entry {entry} to exit {exit}")))?;
                    exits.push((r, w.weight));
                }
            }
            plans.push(exits);
        }
        for w in od {
            if !net.entry_links.contains(&LinkId(w.entry)) {
                return Err(Error::Config(format!("od weight names unknown entry link {}", w.entry)));
            }
        }
        let shares: Vec<f64> = if od.is_empty() {
            plans.iter().map(|p| if p.is_empty() { 0.0 } else { 1.0 }).collect()
        } else {
            plans.iter().map(|p| p.iter().map(|(_, w)| w).sum()).collect()
        };
        let share_total: f64 = shares.iter().sum();

        let mut entries = Vec::new();
        for (e, exits) in plans.into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(e as u64 + 1);
            let rate = if share_total > 0.0 { total_rate * shares[e] / share_total } else { 0.0 };
            let arrivals = (rate > 0.0).then(|| Exp::new(rate).expect("positive rate"));
            let next_arrival = match &arrivals {
                Some(exp) => exp.sample(&mut rng),
                None => f64::INFINITY,
            };
            entries.push(EntryStream { rng, arrivals, next_arrival, exits, pending: VecDeque::new() });
        }

        let mut lane_slot = vec![None; net.lanes.len()];
        for (i, int) in net.intersections.iter().enumerate() {
            for (k, lane) in int.approach_lanes.iter().enumerate() {
                lane_slot[lane.index()] = Some((i, k));
            }
        }
        let signals = net.intersections.iter().map(SignalState::new).collect();
        let pool = PaPool::new(config.pool_size);
        Ok(World {
            lanes: vec![VecDeque::new(); net.lanes.len()],
            net,
            config,
            seed,
            clock: 0.0,
            control_step: 0,
            vehicles: BTreeMap::new(),
            platoons: BTreeMap::new(),
            signals,
            pool,
            entered: 0,
            exited: 0,
            trips: Vec::new(),
            finished_platoons: Vec::new(),
            audit: SafetyAudit { min_gap: f64::INFINITY, ..Default::default() },
            event_log: Vec::new(),
            formations: 0,
            next_vehicle: 0,
            next_platoon: 0,
            entries,
            routes,
            lane_slot,
        })
    }

    pub(crate) fn new_platoon(&mut self, members: Vec<VehicleId>) -> PlatoonId {
        let id = PlatoonId(self.next_platoon);
        self.next_platoon += 1;
        let leader = &self.vehicles[&members[0]];
        let p = Platoon {
            id,
            members,
            created_step: self.control_step,
            cum_distance: 0.0,
            cum_fuel: 0.0,
            active_advisory: None,
            terminal: false,
            terminal_reason: None,
            link: leader.link,
            lane: leader.lane,
            slot: None,
        };
        self.platoons.insert(id, p);
        id
    }

    /// Distance from the front bumper to the end of the vehicle's link.
    pub fn distance_to_stop_line(&self, v: &VehicleState) -> f64 {
        (self.net.link(v.link).length - v.position).max(0.0)
    }

    /// Queued (slow) vehicles on `lane`.
    pub fn lane_queue(&self, lane: LaneId) -> u32 {
        let thr = self.config.queue_speed_threshold;
        self.lanes[lane.index()].iter().filter(|id| self.vehicles[id].speed < thr).count() as u32
    }

    /// Queued vehicles over all lanes of `link`.
    pub fn link_queue(&self, link: LinkId) -> u32 {
        self.net.link(link).lanes.iter().map(|l| self.lane_queue(*l)).sum()
    }

    /// Outgoing link requested by the head vehicle of `lane`.
    pub fn lane_head_out(&self, lane: LaneId) -> Option<LinkId> {
        self.lanes[lane.index()].front().and_then(|id| self.vehicles[id].next_link())
    }

    pub fn pending_vehicles(&self) -> usize {
        self.entries.iter().map(|e| e.pending.len()).sum()
    }

    /// Lane of `link` a vehicle continuing to `after` should use: the lane
    /// permitting that movement with the most free room behind its last
    /// vehicle (lowest index on ties).
    fn pick_lane(&self, link: LinkId, after: Option<LinkId>) -> LaneId {
        let l = self.net.link(link);
        let mut best: Option<(LaneId, f64)> = None;
        for lane in &l.lanes {
            let permits = match after {
                Some(next) if l.to.is_some() => self.net.lane(*lane).movements.contains(&next),
                _ => true,
            };
            if !permits {
                continue;
            }
            let room = self.lanes[lane.index()].back().map_or(f64::INFINITY, |id| self.vehicles[id].back());
            if best.is_none_or(|(_, r)| room > r) {
                best = Some((*lane, room));
            }
        }
        best.map(|(l, _)| l).unwrap_or(l.lanes[0])
    }

    fn generate_arrivals(&mut self) {
        let horizon = self.clock + self.config.dt;
        let sd = self.config.dynamics.speed_dev_solo;
        let cav_rate = self.config.demand.cav_rate;
        for stream in &mut self.entries {
            let Some(exp) = stream.arrivals else { continue };
            while stream.next_arrival < horizon {
                let spawn_time = stream.next_arrival;
                stream.next_arrival += exp.sample(&mut stream.rng);
                let cav = stream.rng.random::<f64>() < cav_rate;
                let factor = sample_speed_factor(&mut stream.rng, sd);
                let total: f64 = stream.exits.iter().map(|(_, w)| w).sum();
                let mut u = stream.rng.random::<f64>() * total;
                let mut route = stream.exits[stream.exits.len() - 1].0;
                for (r, w) in &stream.exits {
                    if u < *w {
                        route = *r;
                        break;
                    }
                    u -= w;
                }
                stream.pending.push_back(Pending { spawn_time, route, cav, factor });
            }
        }
    }

    /// Insert waiting arrivals. Each entry lane keeps its own FIFO order:
    /// a vehicle may not take a lane an earlier waiting vehicle is blocked on.
    fn insert_pending(&mut self) {
        let p = self.config.dynamics.clone();
        let dt = self.config.dt;
        for e in 0..self.entries.len() {
            let mut blocked: Vec<LaneId> = Vec::new();
            let mut k = 0;
            while k < self.entries[e].pending.len() {
                let route = self.routes[self.entries[e].pending[k].route].clone();
                let link = self.net.link(route[0]);
                let candidates: Vec<LaneId> = link
                    .lanes
                    .iter()
                    .copied()
                    .filter(|l| route.get(1).is_none_or(|next| self.net.lane(*l).movements.contains(next)))
                    .collect();
                let lane = candidates
                    .iter()
                    .filter(|l| !blocked.contains(l))
                    .map(|l| (*l, self.lanes[l.index()].back().map_or(f64::INFINITY, |id| self.vehicles[id].back())))
                    .fold(None::<(LaneId, f64)>, |best, (l, room)| match best {
                        Some((_, r)) if r >= room => best,
                        _ => Some((l, room)),
                    });
                let Some((lane, room)) = lane.filter(|(_, room)| *room >= p.s0) else {
                    blocked.extend(candidates);
                    k += 1;
                    continue;
                };
                let head = self.entries[e].pending.remove(k).unwrap();
                let factor = head.factor;
                let desired = factor * link.speed_limit;
                let leader = self.lanes[lane.index()].back().map(|id| &self.vehicles[id]);
                let speed = match leader {
                    Some(u) => desired
                        .min(krauss_safe_speed(u.speed, u.speed, room - p.s0, p.tau_krauss, p.b_comf))
                        .min(room / dt),
                    None => desired,
                };
                let id = VehicleId(self.next_vehicle);
                self.next_vehicle += 1;
                let v = VehicleState {
                    id,
                    link: route[0],
                    lane,
                    position: 0.0,
                    speed,
                    accel: 0.0,
                    length: p.vehicle_length,
                    role: Role::Solo,
                    platoon_id: None,
                    desired_speed_factor: factor,
                    route,
                    route_index: 0,
                    cav: head.cav,
                    spawn_time: head.spawn_time,
                    insert_time: self.clock,
                    advisory: None,
                    fuel: 0.0,
                    distance: 0.0,
                    waiting_time: 0.0,
                    stopped_for: 0.0,
                };
                self.lanes[lane.index()].push_back(id);
                self.vehicles.insert(id, v);
                self.entered += 1;
            }
        }
    }

    /// Leader seen by the front vehicle of a lane and the farthest it may
    /// travel this substep.
    fn front_constraint(&self, v: &VehicleState) -> (Option<LeaderInfo>, f64) {
        let link = self.net.link(v.link);
        let to_line = link.length - v.position;
        let (Some(int), Some(next)) = (link.to, v.next_link()) else {
            return (None, f64::INFINITY);
        };
        let sig = &self.signals[int.index()];
        if !sig.permits(self.net.intersection(int), v.lane, next) {
            let stop = LeaderInfo { speed: 0.0, gap: to_line + self.config.dynamics.s0 };
            return (Some(stop), to_line.max(0.0));
        }
        let next_len = self.net.link(next).length;
        let target = self.pick_lane(next, v.link_after_next());
        match self.lanes[target.index()].back() {
            Some(id) => {
                let u = &self.vehicles[id];
                let info = LeaderInfo { speed: u.speed, gap: to_line + u.back() };
                (Some(info), to_line.max(0.0) + u.back().max(0.0))
            }
            None => (None, to_line.max(0.0) + next_len),
        }
    }

    /// Advance the world by one substep of `dt`.
    pub fn substep(&mut self) {
        let dt = self.config.dt;
        let params = self.config.dynamics.clone();
        self.generate_arrivals();
        self.insert_pending();

        // Speeds from the previous state.
        let mut planned: Vec<(usize, VehicleId, f64)> = Vec::with_capacity(self.vehicles.len());
        let mut anomalies = 0;
        for (lane_idx, lane) in self.lanes.iter().enumerate() {
            let link = self.net.link(self.net.lanes[lane_idx].link);
            for (k, id) in lane.iter().enumerate() {
                let v = &self.vehicles[id];
                let (leader, cap) = if k > 0 {
                    let u = &self.vehicles[&lane[k - 1]];
                    let gap = u.back() - v.position;
                    (Some(LeaderInfo { speed: u.speed, gap }), gap.max(0.0))
                } else {
                    self.front_constraint(v)
                };
                let v_desired = v.desired_speed(link.speed_limit);
                let speed = match v.role {
                    Role::Follower => {
                        let (s, anomaly) = idm_next_speed(v.speed, leader, dt, v_desired, &params);
                        anomalies += anomaly as u64;
                        s
                    }
                    Role::Solo | Role::Leader => krauss_next_speed(v.speed, leader, dt, v_desired, &params),
                };
                let speed = speed.min(cap / dt).max(0.0);
                if speed > v_desired + 1e-9 {
                    self.audit.speed_cap_violations += 1;
                }
                planned.push((lane_idx, *id, speed));
            }
        }
        self.audit.dynamics_anomalies += anomalies;

        // Moves that stay on the current link.
        let mut deferred = Vec::new();
        let mut moved: HashMap<VehicleId, (f64, f64)> = HashMap::with_capacity(planned.len());
        for (lane_idx, id, speed) in planned {
            let v = self.vehicles.get_mut(&id).unwrap();
            let length = self.net.link(v.link).length;
            if v.position + speed * dt > length {
                deferred.push((lane_idx, id, speed));
                continue;
            }
            step_vehicle(v, speed, dt, length, false);
            moved.insert(id, account_motion(v, dt, &self.config.fuel));
        }

        // Stop-line passages, in lane order.
        let mut crossings = Vec::new();
        for (lane_idx, id, speed) in deferred {
            let v = &self.vehicles[&id];
            let link = self.net.link(v.link);
            let overshoot = v.position + speed * dt - link.length;
            let mut target = None;
            let may_cross = match (link.to, v.next_link()) {
                (Some(int), Some(next)) => {
                    let permitted = self.signals[int.index()].permits(self.net.intersection(int), v.lane, next);
                    let lane = self.pick_lane(next, v.link_after_next());
                    let fits = overshoot <= self.net.link(next).length
                        && self.lanes[lane.index()].back().is_none_or(|u| overshoot <= self.vehicles[u].back());
                    if permitted && !fits {
                        self.audit.spillback_holds += 1;
                    }
                    target = Some(lane);
                    permitted && fits
                }
                _ => true,
            };
            let length = link.length;
            let v = self.vehicles.get_mut(&id).unwrap();
            let outcome = step_vehicle(v, speed, dt, length, may_cross);
            moved.insert(id, account_motion(v, dt, &self.config.fuel));
            match outcome {
                StepOutcome::Crossed { next, .. } => {
                    let lane = target.expect("crossing needs a target lane");
                    let int = self.net.link(self.net.lanes[lane_idx].link).to.expect("approach link");
                    crossings.push((int, LaneId(lane_idx as u32), next));
                    let popped = self.lanes[lane_idx].pop_front();
                    debug_assert_eq!(popped, Some(id));
                    let v = self.vehicles.get_mut(&id).unwrap();
                    v.lane = lane;
                    self.lanes[lane.index()].push_back(id);
                }
                StepOutcome::Exited => {
                    let popped = self.lanes[lane_idx].pop_front();
                    debug_assert_eq!(popped, Some(id));
                    let v = self.vehicles.remove(&id).unwrap();
                    let exit_time = self.clock + dt;
                    self.trips.push(TripRecord {
                        id,
                        cav: v.cav,
                        spawn_time: v.spawn_time,
                        insert_time: v.insert_time,
                        exit_time,
                        travel_time: exit_time - v.spawn_time,
                        fuel: v.fuel,
                        distance: v.distance,
                        waiting_time: v.waiting_time,
                    });
                    self.exited += 1;
                }
                StepOutcome::Moved | StepOutcome::Held => {}
            }
        }

        // Red-light audit: re-check every crossing against the signal state.
        for (int, lane, next) in &crossings {
            if !self.signals[int.index()].permits(self.net.intersection(*int), *lane, *next) {
                self.audit.red_crossings += 1;
            }
        }

        // Waiting and stop durations.
        let thr = self.config.queue_speed_threshold;
        for (lane_idx, lane) in self.lanes.iter().enumerate() {
            let slot = self.lane_slot[lane_idx];
            for id in lane {
                let v = self.vehicles.get_mut(id).unwrap();
                if v.speed < thr {
                    v.stopped_for += dt;
                    if let Some((i, k)) = slot {
                        v.waiting_time += dt;
                        self.signals[i].waiting[k] += dt;
                    }
                } else {
                    v.stopped_for = 0.0;
                }
            }
        }

        // Platoon lifetime accounting.
        for p in self.platoons.values_mut() {
            if let Some((d, _)) = moved.get(&p.leader()) {
                p.cum_distance += d;
            }
            let fuels: Vec<f64> = p.members.iter().filter_map(|m| moved.get(m).map(|(_, f)| *f)).collect();
            if !fuels.is_empty() {
                p.cum_fuel += fuels.iter().sum::<f64>() / fuels.len() as f64;
            }
        }

        for sig in &mut self.signals {
            sig.phase_elapsed += dt;
            sig.yellow_remaining = (sig.yellow_remaining - dt).max(0.0);
        }
        self.clock += dt;
        self.audit_substep();
    }

    fn audit_substep(&mut self) {
        self.audit.substeps += 1;
        for lane in &self.lanes {
            for k in 1..lane.len() {
                let gap = self.vehicles[&lane[k - 1]].back() - self.vehicles[&lane[k]].position;
                self.audit.min_gap = self.audit.min_gap.min(gap);
                if gap < -1e-9 {
                    self.audit.negative_gaps += 1;
                }
            }
        }
        if self.entered != self.vehicles.len() as u64 + self.exited {
            self.audit.conservation_violations += 1;
        }
    }

    /// Set phases and platoon advisories for the coming control step.
    pub fn apply_actions(&mut self, actions: &Actions) -> Result<()> {
        if actions.phases.len() != self.signals.len() {
            return Err(Error::InvalidAction(format!(
                "expected {} phases, got {}",
                self.signals.len(),
                actions.phases.len()
            )));
        }
        let yellow = self.config.yellow_time;
        for (k, phase) in actions.phases.iter().enumerate() {
            set_phase(&mut self.signals[k], &self.net.intersections[k], *phase, yellow)?;
        }
        for (pid, speed) in &actions.advisories {
            if !(speed.is_finite() && *speed > 0.0) {
                return Err(Error::InvalidAction(format!("advisory {speed} for {pid} is not a positive speed")));
            }
            apply_advisory(self, *pid, *speed);
        }
        Ok(())
    }

    /// Run the substeps of one control step, then the boundary bookkeeping:
    /// head-of-queue sampling, queue measurement, signal rewards and platoon
    /// maneuvers.
    pub fn run_control_step(&mut self) -> StepReport {
        for sig in &mut self.signals {
            sig.reset_step_accumulators();
        }
        for _ in 0..self.config.substeps {
            self.substep();
        }
        let thr = self.config.queue_speed_threshold;
        for (i, int) in self.net.intersections.iter().enumerate() {
            for (k, lane) in int.approach_lanes.iter().enumerate() {
                let head = self.lanes[lane.index()].front().map(|id| &self.vehicles[id]);
                self.signals[i].head_stop[k] = head.filter(|v| v.speed < thr).map_or(0.0, |v| v.stopped_for);
            }
        }
        let queues: Vec<Vec<u32>> =
            self.net.intersections.iter().map(|int| int.approach_lanes.iter().map(|l| self.lane_queue(*l)).collect()).collect();
        for (sig, q) in self.signals.iter_mut().zip(queues) {
            sig.queues = q;
        }
        let alpha = self.config.alpha;
        let sa_rewards = self.signals.iter().map(|s| sa_reward(&s.waiting, &s.head_stop, alpha)).collect();
        self.control_step += 1;
        let events = update_platoons(self);
        self.note_events(&events);
        StepReport { sa_rewards, events, finished: std::mem::take(&mut self.finished_platoons) }
    }

    /// Close the episode: every active platoon becomes terminal.
    pub fn finish(&mut self) -> Vec<PlatoonRecord> {
        let events = end_episode(self);
        self.note_events(&events);
        std::mem::take(&mut self.finished_platoons)
    }

    fn note_events(&mut self, events: &[PlatoonEvent]) {
        self.formations += events.iter().filter(|e| e.kind == PlatoonEventKind::Formation).count() as u64;
        if self.config.record_events {
            self.event_log.extend(events.iter().cloned());
        }
    }

    /// Metrics over trips that started after the warm-up.
    pub fn metrics(&self) -> Metrics {
        let start = self.config.warmup_steps as f64 * self.config.control_period();
        Metrics::from_trips(self.trips.iter().filter(|t| t.spawn_time >= start))
    }
}

fn account_motion(v: &mut VehicleState, dt: f64, fuel: &FuelModel) -> (f64, f64) {
    let d = v.speed * dt;
    let f = fuel.rate(v.speed, v.accel) * dt;
    v.distance += d;
    v.fuel += f;
    (d, f)
}

/// Desired-speed factor: Normal(1, sd) truncated to [0.2, 2.0].
fn sample_speed_factor(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    if sd <= 0.0 {
        return 1.0;
    }
    let normal = Normal::new(1.0, sd).expect("finite sd");
    for _ in 0..1000 {
        let x: f64 = normal.sample(rng);
        if (0.2..=2.0).contains(&x) {
            return x;
        }
    }
    1.0
}

/// Per-episode aggregates over completed trips.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub vehicles_completed: usize,
    pub mean_travel_time_s: f64,
    pub mean_fuel_g: f64,
    pub travel_times: Vec<f64>,
    pub fuels: Vec<f64>,
}

impl Metrics {
    pub fn from_trips<'a>(trips: impl IntoIterator<Item = &'a TripRecord>) -> Metrics {
        let mut m = Metrics::default();
        for t in trips {
            m.travel_times.push(t.travel_time);
            m.fuels.push(t.fuel);
        }
        m.vehicles_completed = m.travel_times.len();
        if m.vehicles_completed > 0 {
            let n = m.vehicles_completed as f64;
            m.mean_travel_time_s = m.travel_times.iter().sum::<f64>() / n;
            m.mean_fuel_g = m.fuels.iter().sum::<f64>() / n;
        }
        m
    }
}

/// A per-step policy driving the whole network.
pub trait Controller {
    fn name(&self) -> &str;

    fn reset(&mut self) {}

    fn act(&mut self, world: &World) -> Result<Actions>;

    /// Called after every control step with its report.
    fn observe(&mut self, _world: &World, _report: &StepReport) {}
}

/// Round-robin phases, no advisories.
#[derive(Debug, Clone)]
pub struct FixedTime {
    pub hold: usize,
}

impl Controller for FixedTime {
    fn name(&self) -> &str {
        "fixed"
    }

    fn act(&mut self, world: &World) -> Result<Actions> {
        let phases = world
            .net
            .intersections
            .iter()
            .map(|int| fixed_time_select(int.phases.len(), world.control_step, self.hold))
            .collect();
        Ok(Actions { phases, advisories: Vec::new() })
    }
}

/// Max-pressure phase choice, no advisories.
#[derive(Debug, Clone, Default)]
pub struct Backpressure;

impl Controller for Backpressure {
    fn name(&self) -> &str {
        "backpressure"
    }

    fn act(&mut self, world: &World) -> Result<Actions> {
        let phases = world.net.intersections.iter().map(|int| backpressure_select(int.id, world)).collect();
        Ok(Actions { phases, advisories: Vec::new() })
    }
}

/// Everything one episode produced.
#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub metrics: Metrics,
    pub audit: SafetyAudit,
    pub formations: u64,
    pub platoons: Vec<PlatoonRecord>,
    pub events: Vec<PlatoonEvent>,
    pub entered: u64,
    pub exited: u64,
}

/// Run one episode of `config.horizon` control steps from a fresh world.
pub fn run_episode(
    net: Arc<NetworkSpec>,
    config: &SimConfig,
    seed: u64,
    controller: &mut dyn Controller,
) -> Result<EpisodeResult> {
    let mut world = World::new(net, config.clone(), seed)?;
    controller.reset();
    let mut platoons = Vec::new();
    for _ in 0..config.horizon {
        let actions = controller.act(&world)?;
        world.apply_actions(&actions)?;
        let report = world.run_control_step();
        controller.observe(&world, &report);
        platoons.extend(report.finished.iter().cloned());
    }
    platoons.extend(world.finish());
    Ok(EpisodeResult {
        metrics: world.metrics(),
        audit: world.audit.clone(),
        formations: world.formations,
        platoons,
        events: std::mem::take(&mut world.event_log),
        entered: world.entered,
        exited: world.exited,
    })
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// Episode index, or `summary` for the closing aggregate row.
    pub episode: String,
    pub seed: u64,
    pub controller: String,
    pub mean_travel_time_s: f64,
    pub mean_fuel_g: f64,
    pub vehicles_completed: usize,
}

/// Write metrics rows after `#`-prefixed header comment lines.
pub fn write_metrics_csv<W: Write>(mut out: W, header: &[String], rows: &[MetricsRow]) -> Result<()> {
    let io = |e: std::io::Error| Error::io("<metrics csv>", e);
    for line in header {
        writeln!(out, "# {line}").map_err(io)?;
    }
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| Error::Config(format!("csv: {e}")))?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

/// Write the platoon event log as CSV: `step,kind,platoon,other,vehicles`.
pub fn write_event_log<W: Write>(out: W, events: &[PlatoonEvent]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Config(format!("csv: {e}"));
    w.write_record(["step", "kind", "platoon", "other", "vehicles"]).map_err(err)?;
    for e in events {
        let vehicles: Vec<String> = e.vehicles.iter().map(|v| v.0.to_string()).collect();
        w.write_record([
            e.step.to_string(),
            e.kind.label(),
            e.platoon.0.to_string(),
            e.other.map(|o| o.0.to_string()).unwrap_or_default(),
            vehicles.join(" "),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io("<event log>", e))?;
    Ok(())
}
