//! Static road network: grid topology, approach lanes, turning movements and
//! signal phases.
//!
//! A [`NetworkSpec`] is immutable once built. Identifiers are dense indices:
//! `IntersectionId(k)` is `intersections[k]`, and likewise for links and lanes.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::cmp::Reverse;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Header value of the network file format.
pub const NETSPEC_FORMAT: &str = "netspec-v1";

/// 35 mph in m/s.
pub const DEFAULT_SPEED_LIMIT: f64 = 15.6464;

macro_rules! id_type {
    ($name:ident, $label:literal) => {
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl $name {
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($label, "{}"), self.0)
            }
        }
    };
}

id_type!(IntersectionId, "intersection ");
id_type!(LinkId, "link ");
id_type!(LaneId, "lane ");

/// A turning movement: from an approach lane onto an outgoing link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Movement {
    pub lane: LaneId,
    pub out_link: LinkId,
}

impl Movement {
    pub fn new(lane: LaneId, out_link: LinkId) -> Self {
        Self { lane, out_link }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub index: usize,
    pub allowed_movements: BTreeSet<Movement>,
}

impl Phase {
    pub fn permits(&self, lane: LaneId, out_link: LinkId) -> bool {
        self.allowed_movements.contains(&Movement::new(lane, out_link))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intersection {
    pub id: IntersectionId,
    /// Fixed lane order; defines the signal-agent observation layout.
    pub approach_lanes: Vec<LaneId>,
    pub phases: Vec<Phase>,
    pub position: (f64, f64),
    /// Pairs of movements whose paths cross or merge.
    pub conflicts: Vec<(Movement, Movement)>,
}

impl Intersection {
    pub fn conflicting(&self, a: Movement, b: Movement) -> bool {
        self.conflicts.iter().any(|&(x, y)| (x == a && y == b) || (x == b && y == a))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub id: LaneId,
    pub link: LinkId,
    /// 0 is the rightmost lane.
    pub index: usize,
    /// Outgoing links reachable from this lane at the downstream intersection.
    pub movements: Vec<LinkId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub id: LinkId,
    /// `None` for links entering from the network boundary.
    pub from: Option<IntersectionId>,
    /// `None` for links leaving to the network boundary.
    pub to: Option<IntersectionId>,
    pub length: f64,
    pub lanes: Vec<LaneId>,
    pub speed_limit: f64,
    pub start: (f64, f64),
    pub end: (f64, f64),
}

impl Link {
    pub fn heading(&self) -> (f64, f64) {
        let dx = self.end.0 - self.start.0;
        let dy = self.end.1 - self.start.1;
        let n = (dx * dx + dy * dy).sqrt().max(f64::MIN_POSITIVE);
        (dx / n, dy / n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub intersections: Vec<Intersection>,
    pub links: Vec<Link>,
    pub lanes: Vec<Lane>,
    pub entry_links: Vec<LinkId>,
    pub exit_links: Vec<LinkId>,
}

/// Compass side of an intersection, clockwise from north.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Side {
    North = 0,
    East = 1,
    South = 2,
    West = 3,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::North, Side::East, Side::South, Side::West];

    fn from_index(i: usize) -> Side {
        Side::ALL[i % 4]
    }

    pub fn opposite(self) -> Side {
        Side::from_index(self as usize + 2)
    }

    /// Exit side when turning right after entering from `self` (right-hand traffic).
    pub fn right_of(self) -> Side {
        Side::from_index(self as usize + 3)
    }

    pub fn left_of(self) -> Side {
        Side::from_index(self as usize + 1)
    }

    fn offset(self) -> (isize, isize) {
        // (row, col) delta; row 0 is the northernmost.
        match self {
            Side::North => (-1, 0),
            Side::East => (0, 1),
            Side::South => (1, 0),
            Side::West => (0, -1),
        }
    }

    fn unit(self) -> (f64, f64) {
        match self {
            Side::North => (0.0, 1.0),
            Side::East => (1.0, 0.0),
            Side::South => (0.0, -1.0),
            Side::West => (-1.0, 0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Turn {
    Right,
    Through,
    Left,
}

/// Do two movements entering from `in_a`/`in_b` and leaving via `out_a`/`out_b`
/// cross or merge inside a four-leg intersection?
///
/// The perimeter carries eight points clockwise from the north-west corner:
/// each side contributes its inbound half then its outbound half. Two paths
/// cross iff their chords interleave; sharing the outbound point is a merge.
pub fn four_leg_conflict(in_a: Side, out_a: Side, in_b: Side, out_b: Side) -> bool {
    if in_a == in_b {
        return false;
    }
    let (a0, a1) = (2 * in_a as usize, 2 * out_a as usize + 1);
    let (b0, b1) = (2 * in_b as usize, 2 * out_b as usize + 1);
    if a1 == b1 {
        return true;
    }
    let between = |x: usize| {
        let (lo, hi) = (a0.min(a1), a0.max(a1));
        x > lo && x < hi
    };
    between(b0) != between(b1)
}

fn turn_between(in_side: Side, out_side: Side) -> Option<Turn> {
    if out_side == in_side.opposite() {
        Some(Turn::Through)
    } else if out_side == in_side.right_of() {
        Some(Turn::Right)
    } else if out_side == in_side.left_of() {
        Some(Turn::Left)
    } else {
        None
    }
}

fn lane_turns(index: usize, lanes: usize) -> &'static [Turn] {
    if lanes == 1 {
        &[Turn::Right, Turn::Through, Turn::Left]
    } else if index == 0 {
        &[Turn::Right, Turn::Through]
    } else if index + 1 == lanes {
        &[Turn::Through, Turn::Left]
    } else {
        &[Turn::Through]
    }
}

/// Build a `rows x cols` signalized grid with boundary entry/exit links on
/// every open side and the default four-phase plan (NS through+right,
/// NS left, EW through+right, EW left) at every intersection.
pub fn build_grid(rows: usize, cols: usize, link_length: f64, lanes_per_link: usize) -> Result<NetworkSpec> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument(format!("grid dimensions must be positive, got {rows}x{cols}")));
    }
    if !(link_length > 0.0) || !link_length.is_finite() {
        return Err(Error::InvalidArgument(format!("link length must be positive, got {link_length}")));
    }
    if lanes_per_link == 0 {
        return Err(Error::InvalidArgument("lanes_per_link must be at least 1".into()));
    }

    let n = rows * cols;
    let pos = |k: usize| ((k % cols) as f64 * link_length, -((k / cols) as f64) * link_length);
    let neighbor = |k: usize, side: Side| -> Option<usize> {
        let (dr, dc) = side.offset();
        let r = (k / cols) as isize + dr;
        let c = (k % cols) as isize + dc;
        (r >= 0 && c >= 0 && (r as usize) < rows && (c as usize) < cols).then(|| r as usize * cols + c as usize)
    };

    let mut links: Vec<Link> = Vec::new();
    let mut lanes: Vec<Lane> = Vec::new();
    // incoming[k][side] / outgoing[k][side]
    let mut incoming = vec![[None::<LinkId>; 4]; n];
    let mut outgoing = vec![[None::<LinkId>; 4]; n];
    let mut entry_links = Vec::new();
    let mut exit_links = Vec::new();

    let new_link = |links: &mut Vec<Link>,
                        lanes: &mut Vec<Lane>,
                        from: Option<usize>,
                        to: Option<usize>,
                        start: (f64, f64),
                        end: (f64, f64)| {
        let id = LinkId(links.len() as u32);
        let mut lane_ids = Vec::with_capacity(lanes_per_link);
        for index in 0..lanes_per_link {
            let lid = LaneId(lanes.len() as u32);
            lanes.push(Lane { id: lid, link: id, index, movements: Vec::new() });
            lane_ids.push(lid);
        }
        links.push(Link {
            id,
            from: from.map(|k| IntersectionId(k as u32)),
            to: to.map(|k| IntersectionId(k as u32)),
            length: link_length,
            lanes: lane_ids,
            speed_limit: DEFAULT_SPEED_LIMIT,
            start,
            end,
        });
        id
    };

    for k in 0..n {
        for side in Side::ALL {
            let (ux, uy) = side.unit();
            let here = pos(k);
            match neighbor(k, side) {
                Some(j) => {
                    let id = new_link(&mut links, &mut lanes, Some(j), Some(k), pos(j), here);
                    incoming[k][side as usize] = Some(id);
                    outgoing[j][side.opposite() as usize] = Some(id);
                }
                None => {
                    let far = (here.0 + ux * link_length, here.1 + uy * link_length);
                    let entry = new_link(&mut links, &mut lanes, None, Some(k), far, here);
                    let exit = new_link(&mut links, &mut lanes, Some(k), None, here, far);
                    incoming[k][side as usize] = Some(entry);
                    outgoing[k][side as usize] = Some(exit);
                    entry_links.push(entry);
                    exit_links.push(exit);
                }
            }
        }
    }

    let mut intersections = Vec::with_capacity(n);
    for k in 0..n {
        // (movement, in side, out side) for conflict generation.
        let mut movements: Vec<(Movement, Side, Side, Turn)> = Vec::new();
        let mut approach_lanes = Vec::new();
        for in_side in Side::ALL {
            let Some(in_link) = incoming[k][in_side as usize] else { continue };
            for &lane_id in &links[in_link.index()].lanes {
                approach_lanes.push(lane_id);
                let index = lanes[lane_id.index()].index;
                for &turn in lane_turns(index, lanes_per_link) {
                    let out_side = match turn {
                        Turn::Through => in_side.opposite(),
                        Turn::Right => in_side.right_of(),
                        Turn::Left => in_side.left_of(),
                    };
                    if let Some(out_link) = outgoing[k][out_side as usize] {
                        lanes[lane_id.index()].movements.push(out_link);
                        movements.push((Movement::new(lane_id, out_link), in_side, out_side, turn));
                    }
                }
            }
        }

        let groups: [(&[Side], &[Turn]); 4] = [
            (&[Side::North, Side::South], &[Turn::Through, Turn::Right]),
            (&[Side::North, Side::South], &[Turn::Left]),
            (&[Side::East, Side::West], &[Turn::Through, Turn::Right]),
            (&[Side::East, Side::West], &[Turn::Left]),
        ];
        let mut phases = Vec::new();
        for (sides, turns) in groups {
            let allowed: BTreeSet<Movement> = movements
                .iter()
                .filter(|(_, s, _, t)| sides.contains(s) && turns.contains(t))
                .map(|(m, ..)| *m)
                .collect();
            if !allowed.is_empty() {
                phases.push(Phase { index: phases.len(), allowed_movements: allowed });
            }
        }

        let mut conflicts = Vec::new();
        for (a, (ma, ia, oa, _)) in movements.iter().enumerate() {
            for (mb, ib, ob, _) in &movements[a + 1..] {
                if four_leg_conflict(*ia, *oa, *ib, *ob) {
                    conflicts.push((*ma, *mb));
                }
            }
        }

        intersections.push(Intersection {
            id: IntersectionId(k as u32),
            approach_lanes,
            phases,
            position: pos(k),
            conflicts,
        });
    }

    let net = NetworkSpec { intersections, links, lanes, entry_links, exit_links };
    net.validate()?;
    Ok(net)
}

impl NetworkSpec {
    pub fn intersection(&self, id: IntersectionId) -> &Intersection {
        &self.intersections[id.index()]
    }

    pub fn link(&self, id: LinkId) -> &Link {
        &self.links[id.index()]
    }

    pub fn lane(&self, id: LaneId) -> &Lane {
        &self.lanes[id.index()]
    }

    /// Intersection a lane approaches, if any.
    pub fn lane_intersection(&self, lane: LaneId) -> Option<IntersectionId> {
        self.link(self.lane(lane).link).to
    }

    /// Lowest-indexed phase of the lane's intersection that admits the movement.
    pub fn allowed_phase_for(&self, lane: LaneId, out_link: LinkId) -> Result<usize> {
        let not_found = || Error::NotFound(format!("movement {lane} -> {out_link}"));
        let l = self.lanes.get(lane.index()).ok_or_else(not_found)?;
        let i = self.link(l.link).to.ok_or_else(not_found)?;
        self.intersection(i)
            .phases
            .iter()
            .position(|p| p.permits(lane, out_link))
            .ok_or_else(not_found)
    }

    /// Intersections sharing a link with `id`, ascending.
    pub fn neighbors(&self, id: IntersectionId) -> Vec<IntersectionId> {
        let set: BTreeSet<IntersectionId> = self
            .links
            .iter()
            .filter_map(|l| match (l.from, l.to) {
                (Some(a), Some(b)) if a == id && b != id => Some(b),
                (Some(a), Some(b)) if b == id && a != id => Some(a),
                _ => None,
            })
            .collect();
        set.into_iter().collect()
    }

    /// Number of links arriving from another intersection.
    pub fn internal_approach_count(&self, id: IntersectionId) -> usize {
        self.links.iter().filter(|l| l.to == Some(id) && l.from.is_some()).count()
    }

    pub fn approach_link_count(&self, id: IntersectionId) -> usize {
        self.links.iter().filter(|l| l.to == Some(id)).count()
    }

    pub fn max_phases(&self) -> usize {
        self.intersections.iter().map(|i| i.phases.len()).max().unwrap_or(0)
    }

    pub fn max_speed_limit(&self) -> f64 {
        self.links.iter().map(|l| l.speed_limit).fold(0.0, f64::max)
    }

    pub fn max_link_length(&self) -> f64 {
        self.links.iter().map(|l| l.length).fold(0.0, f64::max)
    }

    /// Stable digest of the full network content.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("network serializes");
        hex(&Sha256::digest(&json))
    }

    pub fn validate(&self) -> Result<()> {
        for (k, l) in self.links.iter().enumerate() {
            if l.id.index() != k {
                return Err(Error::validation(format!("link {k}"), "ids must be dense and ordered"));
            }
            if !(l.length > 0.0) || !l.length.is_finite() {
                return Err(Error::validation(l.id.to_string(), "length must be positive"));
            }
            if !(l.speed_limit > 0.0) || !l.speed_limit.is_finite() {
                return Err(Error::validation(l.id.to_string(), "speed_limit must be positive"));
            }
            if l.lanes.is_empty() {
                return Err(Error::validation(l.id.to_string(), "link has no lanes"));
            }
            for ep in [l.from, l.to].into_iter().flatten() {
                if ep.index() >= self.intersections.len() {
                    return Err(Error::validation(l.id.to_string(), format!("unknown endpoint {ep}")));
                }
            }
            for lane in &l.lanes {
                match self.lanes.get(lane.index()) {
                    Some(x) if x.link == l.id => {}
                    _ => return Err(Error::validation(l.id.to_string(), format!("{lane} does not belong to this link"))),
                }
            }
        }
        for (k, lane) in self.lanes.iter().enumerate() {
            if lane.id.index() != k {
                return Err(Error::validation(format!("lane {k}"), "ids must be dense and ordered"));
            }
            let link = self
                .links
                .get(lane.link.index())
                .ok_or_else(|| Error::validation(lane.id.to_string(), format!("unknown {}", lane.link)))?;
            if !link.lanes.contains(&lane.id) {
                return Err(Error::validation(lane.id.to_string(), "lane missing from its link's lane list"));
            }
            for out in &lane.movements {
                let o = self
                    .links
                    .get(out.index())
                    .ok_or_else(|| Error::validation(lane.id.to_string(), format!("unknown movement target {out}")))?;
                if link.to.is_none() || o.from != link.to {
                    return Err(Error::validation(
                        lane.id.to_string(),
                        format!("movement to {out} does not leave the lane's downstream intersection"),
                    ));
                }
            }
        }

        let mut owner: BTreeMap<LaneId, IntersectionId> = BTreeMap::new();
        for (k, it) in self.intersections.iter().enumerate() {
            let loc = it.id.to_string();
            if it.id.index() != k {
                return Err(Error::validation(format!("intersection {k}"), "ids must be dense and ordered"));
            }
            if it.phases.is_empty() {
                return Err(Error::validation(loc, "missing phase list"));
            }
            if it.phases.len() < 2 {
                return Err(Error::validation(loc, "at least two phases are required"));
            }
            for lane in &it.approach_lanes {
                if self.lanes.get(lane.index()).is_none() {
                    return Err(Error::validation(loc, format!("unknown approach {lane}")));
                }
                if self.lane_intersection(*lane) != Some(it.id) {
                    return Err(Error::validation(loc, format!("{lane} does not approach this intersection")));
                }
                if let Some(prev) = owner.insert(*lane, it.id) {
                    return Err(Error::validation(loc, format!("{lane} already listed by {prev}")));
                }
            }
            for (p, phase) in it.phases.iter().enumerate() {
                if phase.index != p {
                    return Err(Error::validation(loc, format!("phase {p} has index {}", phase.index)));
                }
                if phase.allowed_movements.is_empty() {
                    return Err(Error::validation(loc, format!("phase {p} has no movements")));
                }
                for m in &phase.allowed_movements {
                    let valid = it.approach_lanes.contains(&m.lane)
                        && self.lanes.get(m.lane.index()).is_some_and(|l| l.movements.contains(&m.out_link));
                    if !valid {
                        return Err(Error::validation(
                            loc,
                            format!("phase {p} lists unknown movement {} -> {}", m.lane, m.out_link),
                        ));
                    }
                }
                let ms: Vec<_> = phase.allowed_movements.iter().copied().collect();
                for (a, &ma) in ms.iter().enumerate() {
                    for &mb in &ms[a + 1..] {
                        if it.conflicting(ma, mb) {
                            return Err(Error::validation(
                                loc,
                                format!(
                                    "phase {p} admits conflicting movements {}->{} and {}->{}",
                                    ma.lane, ma.out_link, mb.lane, mb.out_link
                                ),
                            ));
                        }
                    }
                }
            }
        }
        for lane in &self.lanes {
            let Some(i) = self.lane_intersection(lane.id) else { continue };
            if owner.get(&lane.id) != Some(&i) {
                return Err(Error::validation(i.to_string(), format!("{} missing from approach lanes", lane.id)));
            }
            let it = self.intersection(i);
            for out in &lane.movements {
                if !it.phases.iter().any(|p| p.permits(lane.id, *out)) {
                    return Err(Error::validation(
                        i.to_string(),
                        format!("movement {} -> {out} is not served by any phase", lane.id),
                    ));
                }
            }
        }

        let entries: Vec<LinkId> = self.links.iter().filter(|l| l.from.is_none()).map(|l| l.id).collect();
        let exits: Vec<LinkId> = self.links.iter().filter(|l| l.to.is_none()).map(|l| l.id).collect();
        if entries != self.entry_links || exits != self.exit_links {
            return Err(Error::validation("entry/exit lists", "must list exactly the boundary links in id order"));
        }
        Ok(())
    }

    /// Turn-angle-aware shortest route from `from` (inclusive) to `to`
    /// (inclusive) following lane movements; never uses U-turns since lane
    /// movement lists never contain them.
    pub fn shortest_route(&self, from: LinkId, to: LinkId) -> Option<Vec<LinkId>> {
        const TURN_PENALTY: f64 = 50.0;
        let n = self.links.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut prev: Vec<Option<LinkId>> = vec![None; n];
        let mut heap = BinaryHeap::new();
        dist[from.index()] = 0.0;
        // Costs are scaled to integers so the heap order is total and deterministic.
        heap.push(Reverse((0u64, from.0)));
        while let Some(Reverse((_, cur))) = heap.pop() {
            let cur = LinkId(cur);
            if cur == to {
                break;
            }
            let link = self.link(cur);
            let mut succ: BTreeSet<LinkId> = BTreeSet::new();
            for lane in &link.lanes {
                succ.extend(self.lane(*lane).movements.iter().copied());
            }
            let h0 = link.heading();
            for next in succ {
                let nl = self.link(next);
                let h1 = nl.heading();
                let straight = h0.0 * h1.0 + h0.1 * h1.1 > 0.99;
                let cost = dist[cur.index()] + nl.length + if straight { 0.0 } else { TURN_PENALTY };
                if cost < dist[next.index()] - 1e-9 {
                    dist[next.index()] = cost;
                    prev[next.index()] = Some(cur);
                    heap.push(Reverse(((cost * 1000.0) as u64, next.0)));
                }
            }
        }
        if !dist[to.index()].is_finite() {
            return None;
        }
        let mut route = vec![to];
        let mut cur = to;
        while let Some(p) = prev[cur.index()] {
            route.push(p);
            cur = p;
        }
        route.reverse();
        (route[0] == from).then_some(route)
    }

    /// True if `exit` leaves the intersection `entry` arrives at, heading back
    /// the way the entry came.
    pub fn is_u_turn_exit(&self, entry: LinkId, exit: LinkId) -> bool {
        let e = self.link(entry);
        let x = self.link(exit);
        let (a, b) = (e.heading(), x.heading());
        e.to.is_some() && e.to == x.from && a.0 * b.0 + a.1 * b.1 < -0.99
    }

    pub fn load(path: impl AsRef<Path>) -> Result<NetworkSpec> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let net = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse { path: path.to_path_buf(), message },
            other => other,
        })?;
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }

    pub fn to_toml_string(&self) -> String {
        let file = NetFile::from_spec(self);
        toml::to_string(&file).expect("network file serializes")
    }

    pub fn from_toml_str(text: &str) -> Result<NetworkSpec> {
        let file: NetFile = toml::from_str(text)
            .map_err(|e| Error::Parse { path: "<network>".into(), message: e.to_string() })?;
        file.into_spec()
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// On-disk layout. Sections mirror the domain model but keep phases and
// conflicts as flat top-level arrays so files stay easy to author by hand.

#[derive(Debug, Serialize, Deserialize)]
struct NetFile {
    format: String,
    #[serde(default)]
    intersections: Vec<IntersectionRecord>,
    #[serde(default)]
    links: Vec<LinkRecord>,
    #[serde(default)]
    phases: Vec<PhaseRecord>,
    #[serde(default)]
    conflicts: Vec<ConflictRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IntersectionRecord {
    id: u32,
    x: f64,
    y: f64,
    approach_lanes: Vec<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LinkRecord {
    id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    from: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    to: Option<u32>,
    length: f64,
    speed_limit: f64,
    start: [f64; 2],
    end: [f64; 2],
    lanes: Vec<LaneRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LaneRecord {
    id: u32,
    movements: Vec<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PhaseRecord {
    intersection: u32,
    index: usize,
    movements: Vec<[u32; 2]>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ConflictRecord {
    intersection: u32,
    pairs: Vec<[[u32; 2]; 2]>,
}

fn mv(m: [u32; 2]) -> Movement {
    Movement::new(LaneId(m[0]), LinkId(m[1]))
}

impl NetFile {
    fn from_spec(net: &NetworkSpec) -> Self {
        let links = net
            .links
            .iter()
            .map(|l| LinkRecord {
                id: l.id.0,
                from: l.from.map(|i| i.0),
                to: l.to.map(|i| i.0),
                length: l.length,
                speed_limit: l.speed_limit,
                start: [l.start.0, l.start.1],
                end: [l.end.0, l.end.1],
                lanes: l
                    .lanes
                    .iter()
                    .map(|id| LaneRecord {
                        id: id.0,
                        movements: net.lane(*id).movements.iter().map(|m| m.0).collect(),
                    })
                    .collect(),
            })
            .collect();
        let mut phases = Vec::new();
        let mut conflicts = Vec::new();
        let intersections = net
            .intersections
            .iter()
            .map(|it| {
                for p in &it.phases {
                    phases.push(PhaseRecord {
                        intersection: it.id.0,
                        index: p.index,
                        movements: p.allowed_movements.iter().map(|m| [m.lane.0, m.out_link.0]).collect(),
                    });
                }
                if !it.conflicts.is_empty() {
                    conflicts.push(ConflictRecord {
                        intersection: it.id.0,
                        pairs: it
                            .conflicts
                            .iter()
                            .map(|(a, b)| [[a.lane.0, a.out_link.0], [b.lane.0, b.out_link.0]])
                            .collect(),
                    });
                }
                IntersectionRecord {
                    id: it.id.0,
                    x: it.position.0,
                    y: it.position.1,
                    approach_lanes: it.approach_lanes.iter().map(|l| l.0).collect(),
                }
            })
            .collect();
        NetFile { format: NETSPEC_FORMAT.to_string(), intersections, links, phases, conflicts }
    }

    fn into_spec(self) -> Result<NetworkSpec> {
        if self.format != NETSPEC_FORMAT {
            return Err(Error::Parse {
                path: "<network>".into(),
                message: format!("unsupported format '{}', expected '{NETSPEC_FORMAT}'", self.format),
            });
        }
        let mut lanes: Vec<Option<Lane>> = Vec::new();
        let mut links = Vec::with_capacity(self.links.len());
        for l in self.links {
            let mut lane_ids = Vec::new();
            for (index, lr) in l.lanes.into_iter().enumerate() {
                let k = lr.id as usize;
                if lanes.len() <= k {
                    lanes.resize(k + 1, None);
                }
                if lanes[k].is_some() {
                    return Err(Error::validation(format!("link {}", l.id), format!("duplicate lane id {k}")));
                }
                lanes[k] = Some(Lane {
                    id: LaneId(lr.id),
                    link: LinkId(l.id),
                    index,
                    movements: lr.movements.into_iter().map(LinkId).collect(),
                });
                lane_ids.push(LaneId(lr.id));
            }
            links.push(Link {
                id: LinkId(l.id),
                from: l.from.map(IntersectionId),
                to: l.to.map(IntersectionId),
                length: l.length,
                speed_limit: l.speed_limit,
                lanes: lane_ids,
                start: (l.start[0], l.start[1]),
                end: (l.end[0], l.end[1]),
            });
        }
        links.sort_by_key(|l| l.id);
        let lanes: Vec<Lane> = lanes
            .into_iter()
            .enumerate()
            .map(|(k, l)| l.ok_or_else(|| Error::validation(format!("lane {k}"), "lane ids must be dense")))
            .collect::<Result<_>>()?;

        let mut intersections: Vec<Intersection> = self
            .intersections
            .into_iter()
            .map(|r| Intersection {
                id: IntersectionId(r.id),
                approach_lanes: r.approach_lanes.into_iter().map(LaneId).collect(),
                phases: Vec::new(),
                position: (r.x, r.y),
                conflicts: Vec::new(),
            })
            .collect();
        intersections.sort_by_key(|i| i.id);
        let n = intersections.len();
        let slot = |id: u32, what: &str| -> Result<usize> {
            let k = id as usize;
            if k < n {
                Ok(k)
            } else {
                Err(Error::validation(format!("{what} record"), format!("unknown intersection {id}")))
            }
        };
        let mut phase_records = self.phases;
        phase_records.sort_by_key(|p| (p.intersection, p.index));
        for p in phase_records {
            let k = slot(p.intersection, "phase")?;
            intersections[k].phases.push(Phase {
                index: p.index,
                allowed_movements: p.movements.into_iter().map(mv).collect(),
            });
        }
        for c in self.conflicts {
            let k = slot(c.intersection, "conflict")?;
            intersections[k].conflicts.extend(c.pairs.into_iter().map(|[a, b]| (mv(a), mv(b))));
        }

        let entry_links = links.iter().filter(|l| l.from.is_none()).map(|l| l.id).collect();
        let exit_links = links.iter().filter(|l| l.to.is_none()).map(|l| l.id).collect();
        let net = NetworkSpec { intersections, links, lanes, entry_links, exit_links };
        net.validate()?;
        Ok(net)
    }
}

/// Classify the turn from `in_link` onto `out_link` by heading angle.
pub fn classify_turn(net: &NetworkSpec, in_link: LinkId, out_link: LinkId) -> Option<Turn> {
    let side_of = |h: (f64, f64)| -> Side {
        // Side a vehicle heading `h` arrives from / leaves towards.
        if h.1.abs() >= h.0.abs() {
            if h.1 > 0.0 { Side::North } else { Side::South }
        } else if h.0 > 0.0 {
            Side::East
        } else {
            Side::West
        }
    };
    let hin = net.link(in_link).heading();
    let in_side = side_of((-hin.0, -hin.1));
    let out_side = side_of(net.link(out_link).heading());
    turn_between(in_side, out_side)
}
