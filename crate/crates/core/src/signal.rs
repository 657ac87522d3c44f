//! Signal actuation, queue and waiting measurement, and the non-learning
//! baselines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Intersection, IntersectionId, LaneId, LinkId, NetworkSpec};
use crate::sim::World;

/// Per-intersection signal state and the per-control-step lane statistics
/// feeding Eq. 4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalState {
    pub intersection: IntersectionId,
    pub current_phase: usize,
    /// Time since the current phase was selected (s).
    pub phase_elapsed: f64,
    /// All-red time left before the current phase serves traffic (s).
    pub yellow_remaining: f64,
    /// Queued vehicles per approach lane, in `approach_lanes` order.
    pub queues: Vec<u32>,
    /// Stopped vehicle-seconds accumulated during the current control step.
    pub waiting: Vec<f64>,
    /// Head-of-queue stop duration sampled at the end of the control step.
    pub head_stop: Vec<f64>,
}

impl SignalState {
    pub fn new(intersection: &Intersection) -> Self {
        let n = intersection.approach_lanes.len();
        Self {
            intersection: intersection.id,
            current_phase: 0,
            phase_elapsed: 0.0,
            yellow_remaining: 0.0,
            queues: vec![0; n],
            waiting: vec![0.0; n],
            head_stop: vec![0.0; n],
        }
    }

    /// Does the signal currently let `lane` discharge onto `out_link`?
    pub fn permits(&self, intersection: &Intersection, lane: LaneId, out_link: LinkId) -> bool {
        self.yellow_remaining <= 0.0 && intersection.phases[self.current_phase].permits(lane, out_link)
    }

    pub fn reset_step_accumulators(&mut self) {
        self.waiting.iter_mut().for_each(|w| *w = 0.0);
    }
}

/// Select `phase` at `intersection`.
///
/// A change of phase with `yellow_time > 0` holds every movement red for that
/// long before the new phase serves traffic. Re-selecting the current phase
/// keeps it running.
pub fn set_phase(state: &mut SignalState, intersection: &Intersection, phase: usize, yellow_time: f64) -> Result<()> {
    if phase >= intersection.phases.len() {
        return Err(Error::InvalidAction(format!(
            "phase {phase} not in P_{} (|P| = {})",
            intersection.id,
            intersection.phases.len()
        )));
    }
    if phase != state.current_phase {
        state.current_phase = phase;
        state.phase_elapsed = 0.0;
        state.yellow_remaining = yellow_time;
    }
    Ok(())
}

/// Queued vehicles per approach lane of `id`, in the intersection's lane
/// order. A vehicle is queued when slower than the configured threshold.
pub fn measure_queues(id: IntersectionId, world: &World) -> Vec<u32> {
    world
        .net
        .intersection(id)
        .approach_lanes
        .iter()
        .map(|lane| world.lane_queue(*lane))
        .collect()
}

/// Eq. 4: `-Σ_l (w_l + α f_l)`.
pub fn sa_reward(waiting: &[f64], head_stop: &[f64], alpha: f64) -> f64 {
    -waiting.iter().zip(head_stop).map(|(w, f)| w + alpha * f).sum::<f64>()
}

/// Pressure of every phase: Σ over allowed movements of upstream lane queue
/// minus downstream link queue.
///
/// A lane discharges only through the movement its head vehicle requests, so
/// a movement counts only while it is the head's (`head` gives the head's
/// outgoing link, `None` for an empty lane).
pub fn phase_pressures(
    intersection: &Intersection,
    upstream: impl Fn(LaneId) -> f64,
    head: impl Fn(LaneId) -> Option<LinkId>,
    downstream: impl Fn(LinkId) -> f64,
) -> Vec<f64> {
    intersection
        .phases
        .iter()
        .map(|p| {
            p.allowed_movements
                .iter()
                .filter(|m| head(m.lane) == Some(m.out_link))
                .map(|m| upstream(m.lane) - downstream(m.out_link))
                .sum()
        })
        .collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = k;
        }
    }
    best
}

/// Backpressure phase choice from explicit tables indexed by lane id
/// (`lane_queue`, `lane_head`) and link id (`link_queue`).
pub fn backpressure_from_queues(
    net: &NetworkSpec,
    id: IntersectionId,
    lane_queue: &[u32],
    lane_head: &[Option<LinkId>],
    link_queue: &[u32],
) -> usize {
    let pressures = phase_pressures(
        net.intersection(id),
        |l| lane_queue[l.index()] as f64,
        |l| lane_head[l.index()],
        |k| link_queue[k.index()] as f64,
    );
    argmax_lowest(&pressures)
}

/// Backpressure phase choice on the live world.
pub fn backpressure_select(id: IntersectionId, world: &World) -> usize {
    let pressures = phase_pressures(
        world.net.intersection(id),
        |l| world.lane_queue(l) as f64,
        |l| world.lane_head_out(l),
        |k| world.link_queue(k) as f64,
    );
    argmax_lowest(&pressures)
}

/// Round-robin phase for control step `step`, each phase held `hold` steps.
pub fn fixed_time_select(n_phases: usize, step: usize, hold: usize) -> usize {
    (step / hold.max(1)) % n_phases.max(1)
}
