//! Longitudinal vehicle dynamics.
//!
//! Solo vehicles and platoon leaders use the Krauss safe-speed model; platoon
//! followers use an IDM acceleration law. All functions are pure.

use serde::{Deserialize, Serialize};

use crate::net::{LaneId, LinkId};
use crate::platoon::PlatoonId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VehicleId(pub u64);

impl std::fmt::Display for VehicleId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "veh{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Solo,
    Leader,
    Follower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: VehicleId,
    pub link: LinkId,
    pub lane: LaneId,
    /// Front bumper, metres from the link start.
    pub position: f64,
    pub speed: f64,
    pub accel: f64,
    pub length: f64,
    pub role: Role,
    pub platoon_id: Option<PlatoonId>,
    /// Drawn once at spawn; only applied while the vehicle drives solo.
    pub desired_speed_factor: f64,
    pub route: Vec<LinkId>,
    /// Index of `link` within `route`.
    pub route_index: usize,
    pub cav: bool,
    /// Scheduled arrival time at the network boundary.
    pub spawn_time: f64,
    /// Time the vehicle was actually inserted onto its entry link.
    pub insert_time: f64,
    /// Maximum-speed advisory, only set on platoon leaders.
    pub advisory: Option<f64>,
    pub fuel: f64,
    pub distance: f64,
    /// Total stopped time on approach lanes.
    pub waiting_time: f64,
    /// Current uninterrupted stop duration.
    pub stopped_for: f64,
}

impl VehicleState {
    pub fn back(&self) -> f64 {
        self.position - self.length
    }

    /// Speed factor in effect: platoon members drive at exactly the limit.
    pub fn effective_speed_factor(&self) -> f64 {
        match self.role {
            Role::Solo => self.desired_speed_factor,
            Role::Leader | Role::Follower => 1.0,
        }
    }

    pub fn next_link(&self) -> Option<LinkId> {
        self.route.get(self.route_index + 1).copied()
    }

    pub fn link_after_next(&self) -> Option<LinkId> {
        self.route.get(self.route_index + 2).copied()
    }

    /// Speed limit the vehicle tries to hold.
    pub fn desired_speed(&self, lane_limit: f64) -> f64 {
        let cap = self.advisory.map_or(lane_limit, |a| a.min(lane_limit));
        self.effective_speed_factor() * cap
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsParams {
    /// Desired minimum headway for Krauss drivers (s).
    pub tau_krauss: f64,
    /// Desired minimum headway for IDM followers (s).
    pub t_idm: f64,
    pub a_max: f64,
    pub b_comf: f64,
    pub b_emergency: f64,
    /// Standstill gap (m).
    pub s0: f64,
    pub delta: f64,
    pub vehicle_length: f64,
    /// Std-dev of the solo desired-speed factor.
    pub speed_dev_solo: f64,
}

impl Default for DynamicsParams {
    fn default() -> Self {
        Self {
            tau_krauss: 1.5,
            t_idm: 1.0,
            a_max: 2.6,
            b_comf: 4.5,
            b_emergency: 9.0,
            s0: 2.0,
            delta: 4.0,
            vehicle_length: 5.0,
            speed_dev_solo: 0.8,
        }
    }
}

impl DynamicsParams {
    pub fn validate(&self) -> Result<(), String> {
        let all = [
            ("tau_krauss", self.tau_krauss),
            ("t_idm", self.t_idm),
            ("a_max", self.a_max),
            ("b_comf", self.b_comf),
            ("b_emergency", self.b_emergency),
            ("s0", self.s0),
            ("delta", self.delta),
            ("vehicle_length", self.vehicle_length),
        ];
        for (name, v) in all {
            if !(v > 0.0) || !v.is_finite() {
                return Err(format!("dynamics.{name} must be positive, got {v}"));
            }
        }
        if self.b_emergency < self.b_comf {
            return Err("dynamics.b_emergency must be >= b_comf".into());
        }
        if self.speed_dev_solo < 0.0 {
            return Err("dynamics.speed_dev_solo must be non-negative".into());
        }
        Ok(())
    }
}

/// Krauss safe speed for a follower at `v_follower` behind a leader at
/// `v_leader` with bumper gap `gap`.
pub fn krauss_safe_speed(v_follower: f64, v_leader: f64, gap: f64, tau: f64, b: f64) -> f64 {
    let gap = gap.max(0.0);
    let v = v_leader + (gap - v_leader * tau) / ((v_follower + v_leader) / (2.0 * b) + tau);
    v.max(0.0)
}

/// Leader seen by a car-following law: its speed and the bumper gap to it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeaderInfo {
    pub speed: f64,
    pub gap: f64,
}

/// Next speed under the Krauss model.
///
/// `v_desired` is the vehicle's speed factor times the tighter of the lane
/// limit and any advisory. The desired speed is a hard cap; the emergency
/// deceleration floor only limits braking forced by the safe speed.
pub fn krauss_next_speed(
    speed: f64,
    leader: Option<LeaderInfo>,
    dt: f64,
    v_desired: f64,
    params: &DynamicsParams,
) -> f64 {
    let v_safe = leader.map_or(f64::INFINITY, |l| {
        krauss_safe_speed(speed, l.speed, l.gap - params.s0, params.tau_krauss, params.b_comf)
    });
    let floor = (speed - params.b_emergency * dt).max(0.0);
    let v = (speed + params.a_max * dt).min(v_safe).max(floor);
    v.min(v_desired).max(0.0)
}

/// IDM acceleration, clamped to `[-b_emergency, a_max]`.
///
/// Returns `(acceleration, anomaly)`; a non-positive gap yields emergency
/// braking and flags an anomaly.
pub fn idm_acceleration(speed: f64, v_leader: f64, gap: f64, v_desired: f64, params: &DynamicsParams) -> (f64, bool) {
    if !(gap > 0.0) {
        return (-params.b_emergency, true);
    }
    let free = if v_desired > 0.0 { (speed / v_desired).powf(params.delta) } else { f64::INFINITY };
    let s_star = params.s0
        + (speed * params.t_idm + speed * (speed - v_leader) / (2.0 * (params.a_max * params.b_comf).sqrt())).max(0.0);
    let a = params.a_max * (1.0 - free - (s_star / gap).powi(2));
    (a.clamp(-params.b_emergency, params.a_max), false)
}

/// Next speed for an IDM follower; `leader = None` means free road.
pub fn idm_next_speed(
    speed: f64,
    leader: Option<LeaderInfo>,
    dt: f64,
    v_desired: f64,
    params: &DynamicsParams,
) -> (f64, bool) {
    let (a, anomaly) = match leader {
        Some(l) => idm_acceleration(speed, l.speed, l.gap, v_desired, params),
        None => idm_acceleration(speed, 0.0, f64::INFINITY, v_desired, params),
    };
    ((speed + a * dt).max(0.0).min(v_desired), anomaly)
}

/// Outcome of advancing a vehicle by one substep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    /// Still on its link.
    Moved,
    /// Passed the end of its link; `offset` metres onto `next`.
    Crossed { next: LinkId, offset: f64 },
    /// Passed the end of its final link.
    Exited,
    /// Blocked at the stop line.
    Held,
}

/// Forward-Euler position update on the already chosen speed.
///
/// `may_cross` tells whether the vehicle is allowed past the end of its link
/// (signal permits the movement and there is room downstream).
pub fn step_vehicle(vehicle: &mut VehicleState, new_speed: f64, dt: f64, link_length: f64, may_cross: bool) -> StepOutcome {
    let old_speed = vehicle.speed;
    let target = vehicle.position + new_speed * dt;
    if target <= link_length {
        vehicle.speed = new_speed;
        vehicle.accel = (new_speed - old_speed) / dt;
        vehicle.position = target;
        return StepOutcome::Moved;
    }
    if !may_cross {
        let travelled = (link_length - vehicle.position).max(0.0);
        vehicle.speed = travelled / dt;
        vehicle.accel = (vehicle.speed - old_speed) / dt;
        vehicle.position = link_length;
        return StepOutcome::Held;
    }
    vehicle.speed = new_speed;
    vehicle.accel = (new_speed - old_speed) / dt;
    match vehicle.next_link() {
        Some(next) => {
            let offset = target - link_length;
            vehicle.link = next;
            vehicle.route_index += 1;
            vehicle.position = offset;
            StepOutcome::Crossed { next, offset }
        }
        None => {
            vehicle.position = target;
            StepOutcome::Exited
        }
    }
}
