//! Platoon lifecycle: formation, extension, merge, splits and termination.
//!
//! [`update_platoons`] runs once per control step, before agents decide.
//! Per step it applies, in order: leader-based terminal checks, follower
//! splits, formations among solo vehicles, then extensions and merges.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dynamics::{Role, VehicleId, VehicleState};
use crate::net::{LaneId, LinkId};
use crate::sim::World;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PlatoonId(pub u64);

impl std::fmt::Display for PlatoonId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "platoon{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TerminalReason {
    LeaderLaneChange,
    LeaderNewLink,
    LeaderExit,
    MergedAhead,
    /// A follower split left fewer than two vehicles.
    Dissolved,
    /// Still active when the episode ended.
    EpisodeEnd,
}

impl TerminalReason {
    pub fn as_str(self) -> &'static str {
        match self {
            TerminalReason::LeaderLaneChange => "leader_lane_change",
            TerminalReason::LeaderNewLink => "leader_new_link",
            TerminalReason::LeaderExit => "leader_exit",
            TerminalReason::MergedAhead => "merged_ahead",
            TerminalReason::Dissolved => "dissolved",
            TerminalReason::EpisodeEnd => "episode_end",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Platoon {
    pub id: PlatoonId,
    /// Front to back; `members[0]` is the leader.
    pub members: Vec<VehicleId>,
    pub created_step: usize,
    /// Leader displacement since creation (m).
    pub cum_distance: f64,
    /// Per-member mean fuel since creation (g).
    pub cum_fuel: f64,
    pub active_advisory: Option<f64>,
    pub terminal: bool,
    pub terminal_reason: Option<TerminalReason>,
    /// Link and lane the leader occupied when the platoon was last checked.
    pub link: LinkId,
    pub lane: LaneId,
    /// Agent pool slot, if bound.
    pub slot: Option<usize>,
}

impl Platoon {
    pub fn leader(&self) -> VehicleId {
        self.members[0]
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }
}

/// Lifetime summary of a platoon that reached a terminal state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatoonRecord {
    pub id: PlatoonId,
    pub slot: Option<usize>,
    pub created_step: usize,
    pub terminal_step: usize,
    pub cum_distance: f64,
    pub cum_fuel: f64,
    pub reason: TerminalReason,
    pub final_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlatoonEventKind {
    Formation,
    Extension,
    Merge,
    LeaderLeave,
    FollowerLeave,
    Terminal(TerminalReason),
}

impl PlatoonEventKind {
    pub fn label(&self) -> String {
        match self {
            PlatoonEventKind::Formation => "formation".into(),
            PlatoonEventKind::Extension => "extension".into(),
            PlatoonEventKind::Merge => "merge".into(),
            PlatoonEventKind::LeaderLeave => "leader_leave".into(),
            PlatoonEventKind::FollowerLeave => "follower_leave".into(),
            PlatoonEventKind::Terminal(r) => format!("terminal:{}", r.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatoonEvent {
    pub kind: PlatoonEventKind,
    pub step: usize,
    pub platoon: PlatoonId,
    /// Absorbed platoon for merges.
    pub other: Option<PlatoonId>,
    pub vehicles: Vec<VehicleId>,
    /// Gap and rear speed of the pair whose eligibility triggered a
    /// formation, extension or merge.
    pub pair_gap: Option<f64>,
    pub pair_rear_speed: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlatoonConfig {
    pub max_size: usize,
    pub headway_threshold: f64,
    pub distance_threshold: f64,
    /// Speed floor for headway evaluation (m/s).
    pub headway_speed_floor: f64,
    /// Distance to the stop line below which followers bound for a different
    /// outgoing link leave the platoon (m).
    pub split_distance: f64,
}

impl Default for PlatoonConfig {
    fn default() -> Self {
        Self {
            max_size: 10,
            headway_threshold: 2.0,
            distance_threshold: 2.0,
            headway_speed_floor: 0.1,
            split_distance: 60.0,
        }
    }
}

/// Headway/distance merge rule for a pair on the same lane.
pub fn merge_eligible(front: &VehicleState, rear: &VehicleState, cfg: &PlatoonConfig) -> bool {
    let gap = front.back() - rear.position;
    pair_eligible(gap, rear.speed, cfg)
}

pub(crate) fn pair_eligible(gap: f64, rear_speed: f64, cfg: &PlatoonConfig) -> bool {
    gap / rear_speed.max(cfg.headway_speed_floor) <= cfg.headway_threshold || gap <= cfg.distance_threshold
}

/// First terminal condition met by `platoon`, in the fixed order lane
/// change, new link, exit, merge into the platoon ahead.
pub fn terminal_check(platoon: &Platoon, world: &World) -> Option<TerminalReason> {
    let Some(leader) = world.vehicles.get(&platoon.leader()) else {
        return Some(TerminalReason::LeaderExit);
    };
    if leader.link == platoon.link && leader.lane != platoon.lane {
        return Some(TerminalReason::LeaderLaneChange);
    }
    if leader.link != platoon.link {
        return Some(TerminalReason::LeaderNewLink);
    }
    if merge_target(platoon, world).is_some() {
        return Some(TerminalReason::MergedAhead);
    }
    None
}

/// Platoon ahead that `platoon` would merge into this step, if any.
fn merge_target(platoon: &Platoon, world: &World) -> Option<PlatoonId> {
    let leader = world.vehicles.get(&platoon.leader())?;
    let lane = &world.lanes[leader.lane.index()];
    let pos = lane.iter().position(|v| *v == leader.id)?;
    if pos == 0 {
        return None;
    }
    let ahead = &world.vehicles[&lane[pos - 1]];
    let front_id = ahead.platoon_id?;
    let front = world.platoons.get(&front_id)?;
    let cfg = &world.config.platoon;
    let eligible = front_id != platoon.id
        && ahead.role != Role::Solo
        && *front.members.last()? == ahead.id
        && front.size() < cfg.max_size
        && platoon.created_step < world.control_step
        && merge_eligible(ahead, leader, cfg)
        && route_compatible(world, front.leader(), leader);
    eligible.then_some(front_id)
}

/// Can `candidate` travel with the platoon led by `leader_id`?
fn route_compatible(world: &World, leader_id: VehicleId, candidate: &VehicleState) -> bool {
    let leader = &world.vehicles[&leader_id];
    leader.next_link() == candidate.next_link() || world.distance_to_stop_line(leader) > world.config.platoon.split_distance
}

fn set_solo(world: &mut World, id: VehicleId) {
    if let Some(v) = world.vehicles.get_mut(&id) {
        v.role = Role::Solo;
        v.platoon_id = None;
        v.advisory = None;
    }
}

fn assign_roles(world: &mut World, pid: PlatoonId) {
    let (members, advisory) = {
        let p = &world.platoons[&pid];
        (p.members.clone(), p.active_advisory)
    };
    for (k, id) in members.iter().enumerate() {
        let v = world.vehicles.get_mut(id).expect("platoon member on network");
        v.platoon_id = Some(pid);
        if k == 0 {
            v.role = Role::Leader;
            v.advisory = advisory;
        } else {
            v.role = Role::Follower;
            v.advisory = None;
        }
    }
}

fn terminate(world: &mut World, pid: PlatoonId, reason: TerminalReason, events: &mut Vec<PlatoonEvent>) {
    let Some(mut p) = world.platoons.remove(&pid) else { return };
    for id in &p.members {
        if world.vehicles.get(id).is_some_and(|v| v.platoon_id == Some(pid)) {
            set_solo(world, *id);
        }
    }
    p.terminal = true;
    p.terminal_reason = Some(reason);
    let step = world.control_step;
    events.push(PlatoonEvent {
        kind: PlatoonEventKind::Terminal(reason),
        step,
        platoon: pid,
        other: None,
        vehicles: p.members.clone(),
        pair_gap: None,
        pair_rear_speed: None,
    });
    world.finished_platoons.push(PlatoonRecord {
        id: pid,
        slot: p.slot,
        created_step: p.created_step,
        terminal_step: step,
        cum_distance: p.cum_distance,
        cum_fuel: p.cum_fuel,
        reason,
        final_size: p.members.len(),
    });
    world.pool.release(pid);
}

/// Apply one control step of platoon maneuvers.
pub fn update_platoons(world: &mut World) -> Vec<PlatoonEvent> {
    let mut events = Vec::new();
    let step = world.control_step;
    let cfg = world.config.platoon.clone();

    // (1) Leader-based terminal conditions.
    let ids: Vec<PlatoonId> = world.platoons.keys().copied().collect();
    for pid in ids {
        let p = &world.platoons[&pid];
        let reason = match terminal_check(p, world) {
            Some(TerminalReason::MergedAhead) | None => None,
            other => other,
        };
        if let Some(reason) = reason {
            let members = p.members.clone();
            events.push(PlatoonEvent {
                kind: PlatoonEventKind::LeaderLeave,
                step,
                platoon: pid,
                other: None,
                vehicles: members,
                pair_gap: None,
                pair_rear_speed: None,
            });
            terminate(world, pid, reason, &mut events);
        }
    }

    // (2) Follower splits: near the stop line, followers bound elsewhere leave
    // together with everything behind them.
    let ids: Vec<PlatoonId> = world.platoons.keys().copied().collect();
    for pid in ids {
        let p = &world.platoons[&pid];
        let leader = &world.vehicles[&p.leader()];
        if world.distance_to_stop_line(leader) > cfg.split_distance {
            continue;
        }
        let next = leader.next_link();
        let Some(cut) = p.members.iter().skip(1).position(|m| world.vehicles[m].next_link() != next).map(|k| k + 1)
        else {
            continue;
        };
        let leaving: Vec<VehicleId> = world.platoons.get_mut(&pid).unwrap().members.split_off(cut);
        for id in &leaving {
            set_solo(world, *id);
        }
        events.push(PlatoonEvent {
            kind: PlatoonEventKind::FollowerLeave,
            step,
            platoon: pid,
            other: None,
            vehicles: leaving,
            pair_gap: None,
            pair_rear_speed: None,
        });
        if world.platoons[&pid].size() < 2 {
            terminate(world, pid, TerminalReason::Dissolved, &mut events);
        }
    }

    // (3) Formations among solo vehicles.
    for lane_idx in 0..world.lanes.len() {
        let link = world.net.lane(LaneId(lane_idx as u32)).link;
        if world.net.link(link).to.is_none() {
            continue;
        }
        let order = world.lanes[lane_idx].clone();
        let mut idx = 0;
        while idx + 1 < order.len() {
            let first = &world.vehicles[&order[idx]];
            let ahead_extends = idx > 0 && extension_target(world, order[idx - 1], first).is_some();
            if first.role != Role::Solo || !first.cav || ahead_extends {
                idx += 1;
                continue;
            }
            let mut chain = vec![first.id];
            let mut founding = None;
            let mut j = idx + 1;
            while j < order.len() && chain.len() < cfg.max_size {
                let prev = &world.vehicles[&order[j - 1]];
                let cand = &world.vehicles[&order[j]];
                let ok = cand.role == Role::Solo
                    && cand.cav
                    && merge_eligible(prev, cand, &cfg)
                    && route_compatible(world, chain[0], cand);
                if !ok {
                    break;
                }
                if founding.is_none() {
                    founding = Some((prev.back() - cand.position, cand.speed));
                }
                chain.push(cand.id);
                j += 1;
            }
            if chain.len() >= 2 {
                let pid = world.new_platoon(chain.clone());
                assign_roles(world, pid);
                let (gap, speed) = founding.unwrap();
                events.push(PlatoonEvent {
                    kind: PlatoonEventKind::Formation,
                    step,
                    platoon: pid,
                    other: None,
                    vehicles: chain,
                    pair_gap: Some(gap),
                    pair_rear_speed: Some(speed),
                });
                idx = j;
            } else {
                idx += 1;
            }
        }
    }

    // (4) Extensions by trailing solos and merges with trailing platoons.
    for lane_idx in 0..world.lanes.len() {
        let mut k = 0;
        while k < world.lanes[lane_idx].len() {
            let id = world.lanes[lane_idx][k];
            let v = &world.vehicles[&id];
            let Some(pid) = v.platoon_id else {
                k += 1;
                continue;
            };
            if world.platoons[&pid].members.last() != Some(&id) {
                k += 1;
                continue;
            }
            let Some(&behind_id) = world.lanes[lane_idx].get(k + 1) else { break };
            let behind = &world.vehicles[&behind_id];
            if let Some(target) = extension_target(world, id, behind) {
                debug_assert_eq!(target, pid);
                let gap = v.back() - behind.position;
                let rear_speed = behind.speed;
                match behind.platoon_id {
                    None => {
                        world.platoons.get_mut(&pid).unwrap().members.push(behind_id);
                        assign_roles(world, pid);
                        events.push(PlatoonEvent {
                            kind: PlatoonEventKind::Extension,
                            step,
                            platoon: pid,
                            other: None,
                            vehicles: vec![behind_id],
                            pair_gap: Some(gap),
                            pair_rear_speed: Some(rear_speed),
                        });
                    }
                    Some(rear_pid) => {
                        let room = cfg.max_size - world.platoons[&pid].size();
                        let rear_members = world.platoons[&rear_pid].members.clone();
                        let moved: Vec<VehicleId> = rear_members.iter().take(room).copied().collect();
                        let leftover: Vec<VehicleId> = rear_members.iter().skip(room).copied().collect();
                        events.push(PlatoonEvent {
                            kind: PlatoonEventKind::Merge,
                            step,
                            platoon: pid,
                            other: Some(rear_pid),
                            vehicles: moved.clone(),
                            pair_gap: Some(gap),
                            pair_rear_speed: Some(rear_speed),
                        });
                        terminate(world, rear_pid, TerminalReason::MergedAhead, &mut events);
                        for m in &leftover {
                            set_solo(world, *m);
                        }
                        world.platoons.get_mut(&pid).unwrap().members.extend(moved);
                        assign_roles(world, pid);
                    }
                }
                // Re-examine the same tail position: the platoon may grow further.
                continue;
            }
            k += 1;
        }
    }

    world.pool.bind_new(&world.platoons);
    let slots: BTreeMap<PlatoonId, Option<usize>> =
        world.platoons.keys().map(|pid| (*pid, world.pool.slot_of(*pid))).collect();
    for (pid, slot) in slots {
        world.platoons.get_mut(&pid).unwrap().slot = slot;
    }
    events
}

/// Would `rear` join the platoon whose tail is `tail_id`? Returns that platoon.
fn extension_target(world: &World, tail_id: VehicleId, rear: &VehicleState) -> Option<PlatoonId> {
    let tail = &world.vehicles[&tail_id];
    let pid = tail.platoon_id?;
    let p = world.platoons.get(&pid)?;
    let cfg = &world.config.platoon;
    if p.members.last() != Some(&tail_id) || p.size() >= cfg.max_size || !rear.cav {
        return None;
    }
    let joinable = match rear.platoon_id {
        None => rear.role == Role::Solo,
        Some(rp) => {
            let rq = world.platoons.get(&rp)?;
            rq.leader() == rear.id && rp != pid && rq.created_step < world.control_step
        }
    };
    (joinable && merge_eligible(tail, rear, cfg) && route_compatible(world, p.leader(), rear)).then_some(pid)
}

/// Set the maximum-speed advisory of a platoon; the leader adopts it.
pub fn apply_advisory(world: &mut World, pid: PlatoonId, max_speed: f64) {
    let Some(p) = world.platoons.get_mut(&pid) else { return };
    p.active_advisory = Some(max_speed);
    let leader = p.leader();
    if let Some(v) = world.vehicles.get_mut(&leader) {
        v.advisory = Some(max_speed);
    }
}

/// Structural invariants of every live platoon: membership partition, size
/// in `[2, max_size]`, one lane, front-to-back order and roles. Returns one
/// message per violation.
pub fn check_invariants(world: &World) -> Vec<String> {
    let mut out = Vec::new();
    let max = world.config.platoon.max_size;
    let mut owner: BTreeMap<VehicleId, PlatoonId> = BTreeMap::new();
    for (pid, p) in &world.platoons {
        if p.size() < 2 || p.size() > max {
            out.push(format!("{pid}: size {} outside [2, {max}]", p.size()));
        }
        let mut prev: Option<&VehicleState> = None;
        for (k, id) in p.members.iter().enumerate() {
            if let Some(other) = owner.insert(*id, *pid) {
                out.push(format!("{id} is in both {other} and {pid}"));
            }
            let Some(v) = world.vehicles.get(id) else {
                out.push(format!("{pid}: member {id} is not in the network"));
                continue;
            };
            if v.platoon_id != Some(*pid) {
                out.push(format!("{pid}: member {id} points at {:?}", v.platoon_id));
            }
            let role = if k == 0 { Role::Leader } else { Role::Follower };
            if v.role != role {
                out.push(format!("{pid}: member {id} has role {:?}, expected {role:?}", v.role));
            }
            if let Some(front) = prev {
                if front.lane != v.lane {
                    out.push(format!("{pid}: members {} and {id} on different lanes", front.id));
                } else if front.position <= v.position {
                    out.push(format!("{pid}: member {id} is not behind {}", front.id));
                }
            }
            prev = Some(v);
        }
    }
    for v in world.vehicles.values() {
        if v.platoon_id.is_some_and(|pid| owner.get(&v.id) != Some(&pid)) {
            out.push(format!("{} claims {:?} but is not a member", v.id, v.platoon_id));
        }
        if v.platoon_id.is_none() && v.role != Role::Solo {
            out.push(format!("{} has role {:?} without a platoon", v.id, v.role));
        }
    }
    out
}

/// Force every active platoon terminal at the end of an episode.
pub fn end_episode(world: &mut World) -> Vec<PlatoonEvent> {
    let mut events = Vec::new();
    let ids: Vec<PlatoonId> = world.platoons.keys().copied().collect();
    for pid in ids {
        terminate(world, pid, TerminalReason::EpisodeEnd, &mut events);
    }
    events
}

/// Agent slot pool binding platoons to platoon-agent slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaPool {
    pub slots: Vec<Option<PlatoonId>>,
}

impl PaPool {
    pub fn new(size: usize) -> Self {
        Self { slots: vec![None; size] }
    }

    pub fn release(&mut self, pid: PlatoonId) {
        for s in &mut self.slots {
            if *s == Some(pid) {
                *s = None;
            }
        }
    }

    pub fn slot_of(&self, pid: PlatoonId) -> Option<usize> {
        self.slots.iter().position(|s| *s == Some(pid))
    }

    pub fn bound(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    /// Bind unbound active platoons, oldest first, to the lowest free slots.
    pub fn bind_new(&mut self, platoons: &BTreeMap<PlatoonId, Platoon>) {
        for pid in platoons.keys() {
            if self.slot_of(*pid).is_some() {
                continue;
            }
            match self.slots.iter().position(|s| s.is_none()) {
                Some(free) => self.slots[free] = Some(*pid),
                None => break,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::VehicleId;

    fn veh(position: f64, speed: f64) -> VehicleState {
        VehicleState {
            id: VehicleId(0),
            link: LinkId(0),
            lane: LaneId(0),
            position,
            speed,
            accel: 0.0,
            length: 5.0,
            role: Role::Solo,
            platoon_id: None,
            desired_speed_factor: 1.0,
            route: vec![LinkId(0)],
            route_index: 0,
            cav: true,
            spawn_time: 0.0,
            insert_time: 0.0,
            advisory: None,
            fuel: 0.0,
            distance: 0.0,
            waiting_time: 0.0,
            stopped_for: 0.0,
        }
    }

    #[test]
    fn headway_branch() {
        let cfg = PlatoonConfig::default();
        // gap 15 m at 10 m/s: headway 1.5 s
        assert!(merge_eligible(&veh(120.0, 10.0), &veh(100.0, 10.0), &cfg));
    }

    #[test]
    fn distance_branch() {
        let cfg = PlatoonConfig::default();
        // gap 1.5 m, rear stopped
        assert!(merge_eligible(&veh(106.5, 0.0), &veh(100.0, 0.0), &cfg));
    }

    #[test]
    fn both_thresholds_exceeded() {
        let cfg = PlatoonConfig::default();
        // gap 30 m at 10 m/s: headway 3 s
        assert!(!merge_eligible(&veh(135.0, 10.0), &veh(100.0, 10.0), &cfg));
    }

    #[test]
    fn pool_binds_lowest_free_slot() {
        let mut pool = PaPool::new(2);
        let mut ps = BTreeMap::new();
        for k in 0..3 {
            ps.insert(
                PlatoonId(k),
                Platoon {
                    id: PlatoonId(k),
                    members: vec![VehicleId(2 * k), VehicleId(2 * k + 1)],
                    created_step: 0,
                    cum_distance: 0.0,
                    cum_fuel: 0.0,
                    active_advisory: None,
                    terminal: false,
                    terminal_reason: None,
                    link: LinkId(0),
                    lane: LaneId(0),
                    slot: None,
                },
            );
        }
        pool.bind_new(&ps);
        assert_eq!(pool.slot_of(PlatoonId(0)), Some(0));
        assert_eq!(pool.slot_of(PlatoonId(1)), Some(1));
        assert_eq!(pool.slot_of(PlatoonId(2)), None);
        pool.release(PlatoonId(0));
        ps.remove(&PlatoonId(0));
        pool.bind_new(&ps);
        assert_eq!(pool.slot_of(PlatoonId(2)), Some(0));
        assert_eq!(pool.bound(), 2);
    }
}
