//! Rollout collection (Algorithm 1), PPO updates (Eqs. 20-25) and the
//! alternating SA/PA schedule (Algorithm 2).

use std::collections::HashMap;
use std::sync::Arc;

use log::{debug, info, warn};
use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{observe, pa_reward, AgentConfig, Observation};
use crate::error::{Error, Result};
use crate::net::NetworkSpec;
use crate::nn::{
    arch_hash_of, hcat, ppo_head_loss, AgentParams, ArchSpec, Checkpoint, HeadBatch, LossParts, ModelConfig,
    PpoCoefs, CHECKPOINT_FORMAT,
};
use crate::platoon::PlatoonId;
use crate::signal::argmax_lowest;
use crate::sim::{Actions, Controller, Metrics, SimConfig, TripRecord, World};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub clip: f64,
    pub lr: f64,
    /// PPO epochs K per batch.
    pub epochs: usize,
    pub minibatch: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub standardize_advantages: bool,
    /// SA rewards are divided by this before use.
    pub sa_reward_scale: f64,
    /// Control steps collected per iteration.
    pub batch_size: usize,
    pub total_cycles: usize,
    pub iterations_per_cycle: usize,
    /// `false` runs SA phases only and PAs never act (ablation).
    pub train_pa: bool,
    /// Upper bound on PA transitions used per update; a larger batch is
    /// subsampled uniformly. 0 uses every transition.
    pub pa_sample_limit: usize,
    /// Parallel environment instances.
    pub workers: usize,
    /// Set from the run's top-level seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            clip: 0.2,
            lr: 3e-4,
            epochs: 4,
            minibatch: 256,
            entropy_coef: 0.01,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            standardize_advantages: true,
            sa_reward_scale: 100.0,
            batch_size: 1000,
            total_cycles: 12,
            iterations_per_cycle: 100,
            train_pa: true,
            pa_sample_limit: 0,
            workers: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(self.clip > 0.0) {
            return bad("clip must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.sa_reward_scale > 0.0) {
            return bad("sa_reward_scale must be positive");
        }
        if self.epochs == 0 || self.minibatch == 0 || self.batch_size == 0 || self.workers == 0 {
            return bad("epochs, minibatch, batch_size and workers must be at least 1");
        }
        Ok(())
    }

    pub fn coefs(&self) -> PpoCoefs {
        PpoCoefs { clip: self.clip, entropy: self.entropy_coef, value: self.value_coef }
    }
}

/// One-step TD target `r + γ V(s') (1 - done)`.
pub fn td_target(reward: f64, gamma: f64, v_next: f64, done: bool) -> f64 {
    if done {
        reward
    } else {
        reward + gamma * v_next
    }
}

/// Eq. 20: `r + γ V(s') (1 - done) - V(s)`.
pub fn td_advantage(reward: f64, gamma: f64, v_next: f64, v: f64, done: bool) -> f64 {
    td_target(reward, gamma, v_next, done) - v
}

/// Shift to zero mean and unit (population) standard deviation.
pub fn standardize(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    xs.iter_mut().for_each(|x| *x = (*x - mean) / (sd + 1e-8));
}

/// Eq. 22 without the entropy term: `mean(min(ρÂ, clip(ρ, 1-ε, 1+ε)Â))`.
pub fn ppo_objective(ratios: &[f64], advantages: &[f64], clip: f64) -> f64 {
    let n = ratios.len().max(1) as f64;
    ratios
        .iter()
        .zip(advantages)
        .map(|(r, a)| (r * a).min(r.clamp(1.0 - clip, 1.0 + clip) * a))
        .sum::<f64>()
        / n
}

/// Eq. 24: mean squared TD error against fixed targets.
pub fn value_loss(values: &[f64], targets: &[f64]) -> f64 {
    let n = values.len().max(1) as f64;
    values.iter().zip(targets).map(|(v, y)| (v - y).powi(2)).sum::<f64>() / n
}

pub fn sa_arch(net: &NetworkSpec, i: usize, agents: &AgentConfig, model: &ModelConfig) -> ArchSpec {
    let int = &net.intersections[i];
    ArchSpec {
        obs_dim: int.approach_lanes.len(),
        n_actions: int.phases.len(),
        inbound_slots: net.neighbors(int.id).len() + agents.n_pa,
        sends_to_pa: true,
        model: model.clone(),
    }
}

pub fn pa_arch(net: &NetworkSpec, agents: &AgentConfig, model: &ModelConfig) -> ArchSpec {
    ArchSpec {
        obs_dim: agents.pa_obs_dim(net),
        n_actions: agents.action_speeds.len(),
        inbound_slots: 1,
        sends_to_pa: false,
        model: model.clone(),
    }
}

/// Parameters of every agent: one θ per SA and the shared θ_PA.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPolicy {
    pub sa: Vec<AgentParams>,
    pub pa: AgentParams,
}

/// Policies and values of every agent at one control step.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub sa_probs: Vec<Vec<f64>>,
    pub sa_values: Vec<f64>,
    pub pa_probs: Vec<Vec<f64>>,
    pub pa_values: Vec<f64>,
}

impl JointPolicy {
    pub fn new(net: &NetworkSpec, agents: &AgentConfig, model: &ModelConfig, seed: u64) -> JointPolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sa = (0..net.intersections.len()).map(|i| AgentParams::new(sa_arch(net, i, agents, model), &mut rng)).collect();
        let pa = AgentParams::new(pa_arch(net, agents, model), &mut rng);
        JointPolicy { sa, pa }
    }

    pub fn arch_hash(&self) -> String {
        arch_hash_of(self.sa.iter().map(|p| &p.arch).chain([&self.pa.arch]))
    }

    /// Architecture hash this policy would have on `net`.
    pub fn expected_arch_hash(net: &NetworkSpec, agents: &AgentConfig, model: &ModelConfig) -> String {
        let archs: Vec<ArchSpec> = (0..net.intersections.len())
            .map(|i| sa_arch(net, i, agents, model))
            .chain([pa_arch(net, agents, model)])
            .collect();
        arch_hash_of(&archs)
    }

    pub fn checkpoint(&self, network_hash: &str, config_hash: &str, meta: serde_json::Value) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            arch_hash: self.arch_hash(),
            network_hash: network_hash.to_string(),
            config_hash: config_hash.to_string(),
            sa: self.sa.clone(),
            pa: self.pa.clone(),
            meta,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> JointPolicy {
        JointPolicy { sa: ckpt.sa, pa: ckpt.pa }
    }

    /// Eqs. 8-17 for every agent in `obs`.
    pub fn forward(&self, obs: &Observation) -> PolicyOutput {
        let sa_emb: Vec<_> = self.sa.iter().zip(&obs.sa).map(|(p, o)| p.encode(&o.features)).collect();
        let pa_emb: Vec<_> = obs.pa.iter().map(|o| self.pa.encode(&o.features)).collect();
        let mut out = PolicyOutput { sa_probs: Vec::new(), sa_values: Vec::new(), pa_probs: Vec::new(), pa_values: Vec::new() };
        for (i, params) in self.sa.iter().enumerate() {
            let mut inbound: Vec<Option<Array1<f64>>> =
                obs.graph.sa_neighbors[i].iter().map(|j| Some(sa_emb[*j].zs.clone())).collect();
            inbound.extend(obs.graph.sa_pas[i].iter().map(|m| Some(pa_emb[*m].zs.clone())));
            inbound.resize(params.arch.inbound_slots, None);
            let h = params.message(&sa_emb[i].z, &inbound);
            let (p, v) = params.decode(&h, &vec![true; params.arch.n_actions]);
            out.sa_probs.push(p);
            out.sa_values.push(v);
        }
        let mask = vec![true; self.pa.arch.n_actions];
        for (m, emb) in pa_emb.iter().enumerate() {
            let zp = sa_emb[obs.graph.pa_sa[m]].zp.clone();
            let h = self.pa.message(&emb.z, &[zp]);
            let (p, v) = self.pa.decode(&h, &mask);
            out.pa_probs.push(p);
            out.pa_values.push(v);
        }
        out
    }
}

/// Draw an index from a probability vector.
pub fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (k, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            acc += p;
            last = k;
            if u < acc {
                return k;
            }
        }
    }
    last
}

/// Mini-batch of SA samples. Rows line up across all fields; index `j`
/// selects the SA.
#[derive(Debug, Clone)]
pub struct SaBatch {
    /// Observation rows per SA.
    pub obs: Vec<Array2<f64>>,
    /// Frozen PA embeddings per SA, `n_pa * k` wide, zero-padded.
    pub pa_blocks: Vec<Array2<f64>>,
    pub actions: Vec<Vec<usize>>,
    pub logp_old: Vec<Vec<f64>>,
    pub advantages: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

/// Mini-batch of PA samples; every row is one PA instance.
#[derive(Debug, Clone)]
pub struct PaBatch {
    pub obs: Array2<f64>,
    /// Frozen `z^p` of the approached SA.
    pub inbound: Array2<f64>,
    pub actions: Vec<usize>,
    pub logp_old: Vec<f64>,
    pub advantages: Vec<f64>,
    pub targets: Vec<f64>,
}

struct SaForward {
    enc: Vec<Vec<Array2<f64>>>,
    enc_s: Vec<Vec<Array2<f64>>>,
    top: Vec<crate::nn::TopTrace>,
}

fn sa_forward(params: &[AgentParams], neighbors: &[Vec<usize>], obs: &[Array2<f64>], pa_blocks: &[Array2<f64>]) -> SaForward {
    let enc: Vec<_> = params.iter().zip(obs).map(|(p, o)| p.enc.forward_trace(o.clone())).collect();
    let enc_s: Vec<_> = params.iter().zip(obs).map(|(p, o)| p.enc_s.forward_trace(o.clone())).collect();
    let top = params
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut blocks = vec![enc[i].last().unwrap().view()];
            blocks.extend(neighbors[i].iter().map(|j| enc_s[*j].last().unwrap().view()));
            blocks.push(pa_blocks[i].view());
            p.top_forward(hcat(&blocks))
        })
        .collect();
    SaForward { enc, enc_s, top }
}

/// State values of every SA on the given rows.
pub fn sa_values(params: &[AgentParams], neighbors: &[Vec<usize>], obs: &[Array2<f64>], pa_blocks: &[Array2<f64>]) -> Vec<Array1<f64>> {
    sa_forward(params, neighbors, obs, pa_blocks).top.iter().map(|t| t.values()).collect()
}

/// Joint SA loss `Σ_i L_i` and its gradient with respect to every θ_SA.
///
/// Gradients reach neighbor SAs through their `E^s` embeddings; PA inputs
/// are constants.
pub fn sa_loss_and_grad(
    params: &[AgentParams],
    neighbors: &[Vec<usize>],
    batch: &SaBatch,
    coefs: PpoCoefs,
) -> (Vec<LossParts>, Vec<AgentParams>) {
    let k = params[0].arch.model.embed;
    let fwd = sa_forward(params, neighbors, &batch.obs, &batch.pa_blocks);
    let mut grads: Vec<AgentParams> = params.iter().map(AgentParams::zeros_like).collect();
    let rows = batch.obs[0].nrows();
    let mut dz: Vec<Array2<f64>> = Vec::with_capacity(params.len());
    let mut dzs: Vec<Array2<f64>> = (0..params.len()).map(|_| Array2::zeros((rows, k))).collect();
    let mut parts = Vec::with_capacity(params.len());
    for (i, p) in params.iter().enumerate() {
        let masks = vec![vec![true; p.arch.n_actions]; rows];
        let head = HeadBatch {
            masks: &masks,
            actions: &batch.actions[i],
            logp_old: &batch.logp_old[i],
            advantages: &batch.advantages[i],
            targets: &batch.targets[i],
        };
        let (lp, dl, dv) = ppo_head_loss(fwd.top[i].logits(), &fwd.top[i].values(), &head, coefs);
        parts.push(lp);
        let dx = p.top_backward(&fwd.top[i], dl, &dv, &mut grads[i]);
        dz.push(dx.slice(s![.., 0..k]).to_owned());
        for (slot, j) in neighbors[i].iter().enumerate() {
            dzs[*j] += &dx.slice(s![.., (1 + slot) * k..(2 + slot) * k]);
        }
    }
    for (j, p) in params.iter().enumerate() {
        p.enc.backward(&fwd.enc[j], std::mem::take(&mut dz[j]), &mut grads[j].enc);
        p.enc_s.backward(&fwd.enc_s[j], std::mem::take(&mut dzs[j]), &mut grads[j].enc_s);
    }
    (parts, grads)
}

fn pa_forward(params: &AgentParams, obs: &Array2<f64>, inbound: &Array2<f64>) -> (Vec<Array2<f64>>, crate::nn::TopTrace) {
    let enc = params.enc.forward_trace(obs.clone());
    let top = params.top_forward(hcat(&[enc.last().unwrap().view(), inbound.view()]));
    (enc, top)
}

/// State values of the shared PA policy on the given rows.
pub fn pa_values(params: &AgentParams, obs: &Array2<f64>, inbound: &Array2<f64>) -> Array1<f64> {
    pa_forward(params, obs, inbound).1.values()
}

/// Mean PA loss over all rows and its gradient with respect to θ_PA,
/// summed over the PA instances in the batch.
pub fn pa_loss_and_grad(params: &AgentParams, batch: &PaBatch, coefs: PpoCoefs) -> (LossParts, AgentParams) {
    let k = params.arch.model.embed;
    let (enc, top) = pa_forward(params, &batch.obs, &batch.inbound);
    let masks = vec![vec![true; params.arch.n_actions]; batch.obs.nrows()];
    let head = HeadBatch {
        masks: &masks,
        actions: &batch.actions,
        logp_old: &batch.logp_old,
        advantages: &batch.advantages,
        targets: &batch.targets,
    };
    let (parts, dl, dv) = ppo_head_loss(top.logits(), &top.values(), &head, coefs);
    let mut grad = params.zeros_like();
    let dx = params.top_backward(&top, dl, &dv, &mut grad);
    params.enc.backward(&enc, dx.slice(s![.., 0..k]).to_owned(), &mut grad.enc);
    (parts, grad)
}

/// Adaptive-moment optimizer over a flat parameter vector (minimizes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Adam {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Clip the gradient to `max_norm` and take one optimizer step.
fn apply_gradient(params: &mut AgentParams, grad: &AgentParams, opt: &mut Adam, max_norm: f64) -> Result<()> {
    let mut g = grad.flatten();
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    if norm > max_norm {
        let scale = max_norm / norm;
        g.iter_mut().for_each(|x| *x *= scale);
    }
    let mut p = params.flatten();
    opt.step(&mut p, &g);
    params.assign(&p);
    Ok(())
}

/// Agent class being optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "SA")]
    Sa,
    #[serde(rename = "PA")]
    Pa,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Sa => "SA",
            Phase::Pa => "PA",
        }
    }
}

/// One row of the training-curve CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub iteration: usize,
    pub cycle: usize,
    pub phase: Phase,
    pub mean_travel_time_s: f64,
    pub mean_fuel_g: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

pub fn write_curve_csv<W: std::io::Write>(mut out: W, header: &[String], rows: &[CurveRow]) -> Result<()> {
    let io = |e: std::io::Error| Error::io("training curve", e);
    for line in header {
        writeln!(out, "# {line}").map_err(io)?;
    }
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Config(format!("curve csv: {e}")))?;
    }
    w.flush().map_err(io)
}

/// Agents' view and choices at one control step.
#[derive(Debug, Clone, Default)]
struct Snapshot {
    sa_obs: Vec<Vec<f64>>,
    pa_obs: Vec<Vec<f64>>,
    sa_pas: Vec<Vec<usize>>,
    pa_sa: Vec<usize>,
    /// `false` for the closing bootstrap state of a segment.
    acted: bool,
    sa_actions: Vec<usize>,
    sa_logp: Vec<f64>,
    sa_rewards: Vec<f64>,
    /// Index of the successor snapshot; `None` at episode end.
    next: Option<usize>,
    pa_actions: Vec<usize>,
    pa_logp: Vec<f64>,
    pa_rewards: Vec<f64>,
    pa_done: Vec<bool>,
    /// The same platoon's next appearance `(snapshot, index)`.
    pa_next: Vec<Option<(usize, usize)>>,
}

impl Snapshot {
    fn from_obs(obs: &Observation) -> Snapshot {
        let n_pa = obs.pa.len();
        Snapshot {
            sa_obs: obs.sa.iter().map(|o| o.features.clone()).collect(),
            pa_obs: obs.pa.iter().map(|o| o.features.clone()).collect(),
            sa_pas: obs.graph.sa_pas.clone(),
            pa_sa: obs.graph.pa_sa.clone(),
            pa_rewards: vec![0.0; n_pa],
            pa_done: vec![false; n_pa],
            pa_next: vec![None; n_pa],
            ..Snapshot::default()
        }
    }
}

/// Transitions collected in one iteration.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    snaps: Vec<Snapshot>,
    pub trips: Vec<TripRecord>,
}

impl Batch {
    pub fn sa_transitions(&self) -> usize {
        self.snaps.iter().filter(|s| s.acted).map(|s| s.sa_actions.len()).sum()
    }

    /// PA transitions usable for training: terminal or with a successor.
    pub fn pa_transitions(&self) -> usize {
        self.pa_indices().len()
    }

    fn pa_indices(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (t, s) in self.snaps.iter().enumerate() {
            if !s.acted {
                continue;
            }
            for m in 0..s.pa_actions.len() {
                if s.pa_done[m] || s.pa_next[m].is_some() {
                    out.push((t, m));
                }
            }
        }
        out
    }
}

/// One environment instance persisting across iterations.
struct EnvRunner {
    world: World,
    worker: usize,
    episode: u64,
    base_seed: u64,
    rng: ChaCha8Rng,
}

fn episode_seed(base: u64, worker: usize, episode: u64) -> u64 {
    base.wrapping_mul(1_000_003).wrapping_add(((worker as u64) << 32) | episode)
}

impl EnvRunner {
    fn new(net: Arc<NetworkSpec>, sim: &SimConfig, base_seed: u64, worker: usize) -> Result<EnvRunner> {
        let mut sim = sim.clone();
        sim.record_events = false;
        let world = World::new(net, sim, episode_seed(base_seed, worker, 0))?;
        let rng = ChaCha8Rng::seed_from_u64(base_seed ^ 0x5eed_0000 ^ worker as u64);
        Ok(EnvRunner { world, worker, episode: 0, base_seed, rng })
    }

    /// Step the environment `steps` control steps with both classes acting.
    fn collect(&mut self, policy: &JointPolicy, agents: &AgentConfig, steps: usize, pa_active: bool) -> Result<Batch> {
        let mut snaps: Vec<Snapshot> = Vec::with_capacity(steps + 1);
        let mut trips = Vec::new();
        let mut last_pa: HashMap<PlatoonId, (usize, usize)> = HashMap::new();
        for _ in 0..steps {
            let obs = observe(&self.world, agents);
            let out = policy.forward(&obs);
            let idx = snaps.len();
            let mut snap = Snapshot::from_obs(&obs);
            snap.acted = true;
            for (m, pa) in obs.pa.iter().enumerate() {
                if let Some((t, mm)) = last_pa.insert(pa.platoon, (idx, m)) {
                    snaps[t].pa_next[mm] = Some((idx, m));
                }
            }
            for p in &out.sa_probs {
                let a = sample_index(p, &mut self.rng);
                snap.sa_actions.push(a);
                snap.sa_logp.push(p[a].ln());
            }
            let mut advisories = Vec::new();
            if pa_active {
                for (m, p) in out.pa_probs.iter().enumerate() {
                    let a = sample_index(p, &mut self.rng);
                    snap.pa_actions.push(a);
                    snap.pa_logp.push(p[a].ln());
                    advisories.push((obs.pa[m].platoon, agents.action_speeds[a]));
                }
            }
            self.world.apply_actions(&Actions { phases: snap.sa_actions.clone(), advisories })?;
            let report = self.world.run_control_step();
            snap.sa_rewards = report.sa_rewards;
            snaps.push(snap);
            let mut finished = report.finished;
            let episode_end = self.world.control_step >= self.world.config.horizon;
            if episode_end {
                finished.extend(self.world.finish());
            }
            for rec in &finished {
                if let Some((t, m)) = last_pa.remove(&rec.id) {
                    snaps[t].pa_rewards[m] = pa_reward(rec, agents);
                    snaps[t].pa_done[m] = true;
                    snaps[t].pa_next[m] = None;
                }
            }
            if episode_end {
                trips.append(&mut self.world.trips);
                self.episode += 1;
                let seed = episode_seed(self.base_seed, self.worker, self.episode);
                debug!("worker {} starts episode {} (seed {seed})", self.worker, self.episode);
                self.world = World::new(self.world.net.clone(), self.world.config.clone(), seed)?;
                last_pa.clear();
            } else {
                snaps[idx].next = Some(idx + 1);
            }
        }
        snaps.push(Snapshot::from_obs(&observe(&self.world, agents)));
        trips.append(&mut self.world.trips);
        Ok(Batch { snaps, trips })
    }
}

/// Reported after every iteration and at the end of every cycle.
pub enum TrainEvent<'a> {
    Iteration(&'a CurveRow),
    CycleEnd { cycle: usize, policy: &'a JointPolicy },
}

/// Alternating-optimization trainer (Algorithm 2).
pub struct Trainer {
    net: Arc<NetworkSpec>,
    agents: AgentConfig,
    cfg: TrainConfig,
    pub policy: JointPolicy,
    sa_opt: Vec<Adam>,
    pa_opt: Adam,
    runners: Vec<EnvRunner>,
    neighbors: Vec<Vec<usize>>,
    rng: ChaCha8Rng,
    iteration: usize,
}

impl Trainer {
    pub fn new(
        net: Arc<NetworkSpec>,
        sim: &SimConfig,
        agents: &AgentConfig,
        model: &ModelConfig,
        cfg: &TrainConfig,
    ) -> Result<Trainer> {
        cfg.validate()?;
        sim.validate()?;
        agents.validate()?;
        let policy = JointPolicy::new(&net, agents, model, cfg.seed);
        let runners = (0..cfg.workers)
            .map(|w| EnvRunner::new(net.clone(), sim, cfg.seed, w))
            .collect::<Result<Vec<_>>>()?;
        let neighbors = net
            .intersections
            .iter()
            .map(|int| net.neighbors(int.id).iter().map(|j| j.index()).collect())
            .collect();
        Ok(Trainer {
            sa_opt: policy.sa.iter().map(|p| Adam::new(p.num_params(), cfg.lr)).collect(),
            pa_opt: Adam::new(policy.pa.num_params(), cfg.lr),
            policy,
            runners,
            neighbors,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11),
            iteration: 0,
            net,
            agents: agents.clone(),
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn network(&self) -> &NetworkSpec {
        &self.net
    }

    /// Collect one batch from every worker with the current policies.
    pub fn collect(&mut self) -> Result<Batch> {
        let steps = self.cfg.batch_size.div_ceil(self.cfg.workers);
        let policy = &self.policy;
        let agents = &self.agents;
        let pa_active = self.cfg.train_pa;
        let parts: Vec<Result<Batch>> = if self.runners.len() == 1 {
            vec![self.runners[0].collect(policy, agents, steps, pa_active)]
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = self
                    .runners
                    .iter_mut()
                    .map(|r| scope.spawn(move || r.collect(policy, agents, steps, pa_active)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("rollout worker panicked")).collect()
            })
        };
        let mut batch = Batch::default();
        for part in parts {
            let part = part?;
            let offset = batch.snaps.len();
            for mut s in part.snaps {
                s.next = s.next.map(|n| n + offset);
                s.pa_next.iter_mut().for_each(|n| *n = n.map(|(t, m)| (t + offset, m)));
                batch.snaps.push(s);
            }
            batch.trips.extend(part.trips);
        }
        Ok(batch)
    }

    fn minibatches(&mut self, n: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut self.rng);
        order.chunks(self.cfg.minibatch).map(<[usize]>::to_vec).collect()
    }

    /// PPO update of every θ_SA with θ_PA frozen.
    pub fn update_sa(&mut self, batch: &Batch) -> Result<LossParts> {
        let snaps = &batch.snaps;
        let n_sa = self.policy.sa.len();
        let k = self.policy.pa.arch.model.embed;
        let n_pa = self.agents.n_pa;
        // frozen PA messages
        let mut pa_blocks: Vec<Array2<f64>> = (0..n_sa).map(|_| Array2::zeros((snaps.len(), n_pa * k))).collect();
        for (t, snap) in snaps.iter().enumerate() {
            if snap.pa_obs.is_empty() {
                continue;
            }
            let zs = self.policy.pa.enc_s.forward(rows(&snap.pa_obs).view());
            for (i, list) in snap.sa_pas.iter().enumerate() {
                for (slot, m) in list.iter().enumerate() {
                    pa_blocks[i].slice_mut(s![t, slot * k..(slot + 1) * k]).assign(&zs.row(*m));
                }
            }
        }
        let obs: Vec<Array2<f64>> =
            (0..n_sa).map(|j| rows_of(snaps.iter().map(|s| s.sa_obs[j].as_slice()))).collect();
        let values = sa_values(&self.policy.sa, &self.neighbors, &obs, &pa_blocks);
        let trans: Vec<usize> = (0..snaps.len()).filter(|t| snaps[*t].acted).collect();
        let mut targets = vec![Vec::with_capacity(trans.len()); n_sa];
        let mut advs = vec![Vec::with_capacity(trans.len()); n_sa];
        for i in 0..n_sa {
            for t in &trans {
                let snap = &snaps[*t];
                let r = snap.sa_rewards[i] / self.cfg.sa_reward_scale;
                let v_next = snap.next.map_or(0.0, |n| values[i][n]);
                let y = td_target(r, self.cfg.gamma, v_next, snap.next.is_none());
                targets[i].push(y);
                advs[i].push(y - values[i][*t]);
            }
            if self.cfg.standardize_advantages {
                standardize(&mut advs[i]);
            }
        }
        let coefs = self.cfg.coefs();
        let mut mean = LossParts::default();
        let mut count = 0usize;
        for _ in 0..self.cfg.epochs {
            for mb in self.minibatches(trans.len()) {
                let ts: Vec<usize> = mb.iter().map(|r| trans[*r]).collect();
                let sub = SaBatch {
                    obs: obs.iter().map(|o| o.select(Axis(0), &ts)).collect(),
                    pa_blocks: pa_blocks.iter().map(|b| b.select(Axis(0), &ts)).collect(),
                    actions: (0..n_sa).map(|i| ts.iter().map(|t| snaps[*t].sa_actions[i]).collect()).collect(),
                    logp_old: (0..n_sa).map(|i| ts.iter().map(|t| snaps[*t].sa_logp[i]).collect()).collect(),
                    advantages: (0..n_sa).map(|i| mb.iter().map(|r| advs[i][*r]).collect()).collect(),
                    targets: (0..n_sa).map(|i| mb.iter().map(|r| targets[i][*r]).collect()).collect(),
                };
                let (parts, grads) = sa_loss_and_grad(&self.policy.sa, &self.neighbors, &sub, coefs);
                let total: f64 = parts.iter().map(|p| p.total).sum();
                if !total.is_finite() {
                    return Err(Error::NonFinite("SA loss".into()));
                }
                for i in 0..n_sa {
                    apply_gradient(&mut self.policy.sa[i], &grads[i], &mut self.sa_opt[i], self.cfg.max_grad_norm)?;
                }
                for p in &parts {
                    accumulate(&mut mean, p);
                    count += 1;
                }
            }
        }
        Ok(average(mean, count))
    }

    /// PPO update of the shared θ_PA with every θ_SA frozen. `None` when the
    /// batch holds no PA transitions.
    pub fn update_pa(&mut self, batch: &Batch) -> Result<Option<LossParts>> {
        let snaps = &batch.snaps;
        let k = self.policy.pa.arch.model.embed;
        // every PA state in the batch, with the frozen z^p of its SA
        let mut offsets = Vec::with_capacity(snaps.len());
        let mut obs_rows: Vec<&[f64]> = Vec::new();
        let mut inbound_rows: Vec<Array1<f64>> = Vec::new();
        for snap in snaps {
            offsets.push(obs_rows.len());
            if snap.pa_obs.is_empty() {
                continue;
            }
            let zp: Vec<Array1<f64>> = self
                .policy
                .sa
                .iter()
                .zip(&snap.sa_obs)
                .map(|(p, o)| p.encode(o).zp.expect("SA encodes z^p"))
                .collect();
            for (m, o) in snap.pa_obs.iter().enumerate() {
                obs_rows.push(o);
                inbound_rows.push(zp[snap.pa_sa[m]].clone());
            }
        }
        let mut trans = batch.pa_indices();
        if self.cfg.pa_sample_limit > 0 && trans.len() > self.cfg.pa_sample_limit {
            let mut keep = rand::seq::index::sample(&mut self.rng, trans.len(), self.cfg.pa_sample_limit).into_vec();
            keep.sort_unstable();
            trans = keep.into_iter().map(|i| trans[i]).collect();
        }
        if trans.is_empty() {
            warn!("no PA transitions in this batch; skipping the PA update (no platoons formed)");
            return Ok(None);
        }
        let obs = rows_of(obs_rows.into_iter());
        let mut inbound = Array2::zeros((inbound_rows.len(), k));
        for (r, z) in inbound_rows.iter().enumerate() {
            inbound.row_mut(r).assign(z);
        }
        let values = pa_values(&self.policy.pa, &obs, &inbound);
        let mut state_idx = Vec::with_capacity(trans.len());
        let mut targets = Vec::with_capacity(trans.len());
        let mut advs = Vec::with_capacity(trans.len());
        for (t, m) in &trans {
            let snap = &snaps[*t];
            let idx = offsets[*t] + m;
            let v_next = snap.pa_next[*m].map_or(0.0, |(t2, m2)| values[offsets[t2] + m2]);
            let y = td_target(snap.pa_rewards[*m], self.cfg.gamma, v_next, snap.pa_done[*m]);
            state_idx.push(idx);
            targets.push(y);
            advs.push(y - values[idx]);
        }
        if self.cfg.standardize_advantages {
            standardize(&mut advs);
        }
        let coefs = self.cfg.coefs();
        let mut mean = LossParts::default();
        let mut count = 0usize;
        for _ in 0..self.cfg.epochs {
            for mb in self.minibatches(trans.len()) {
                let idx: Vec<usize> = mb.iter().map(|r| state_idx[*r]).collect();
                let sub = PaBatch {
                    obs: obs.select(Axis(0), &idx),
                    inbound: inbound.select(Axis(0), &idx),
                    actions: mb.iter().map(|r| snaps[trans[*r].0].pa_actions[trans[*r].1]).collect(),
                    logp_old: mb.iter().map(|r| snaps[trans[*r].0].pa_logp[trans[*r].1]).collect(),
                    advantages: mb.iter().map(|r| advs[*r]).collect(),
                    targets: mb.iter().map(|r| targets[*r]).collect(),
                };
                let (parts, grad) = pa_loss_and_grad(&self.policy.pa, &sub, coefs);
                if !parts.total.is_finite() {
                    return Err(Error::NonFinite("PA loss".into()));
                }
                apply_gradient(&mut self.policy.pa, &grad, &mut self.pa_opt, self.cfg.max_grad_norm)?;
                accumulate(&mut mean, &parts);
                count += 1;
            }
        }
        Ok(Some(average(mean, count)))
    }

    /// Collect a batch and update the class named by `phase`. A non-finite
    /// loss restores the parameters from before the iteration.
    pub fn iterate(&mut self, cycle: usize, phase: Phase) -> Result<CurveRow> {
        self.iteration += 1;
        let started = std::time::Instant::now();
        let batch = self.collect()?;
        let metrics = Metrics::from_trips(&batch.trips);
        let backup = (self.policy.clone(), self.sa_opt.clone(), self.pa_opt.clone());
        let result = match phase {
            Phase::Sa => self.update_sa(&batch).map(Some),
            Phase::Pa => self.update_pa(&batch),
        };
        let parts = match result {
            Ok(p) => p,
            Err(Error::NonFinite(what)) => {
                warn!("iteration {}: non-finite {what}; parameters restored", self.iteration);
                (self.policy, self.sa_opt, self.pa_opt) = backup;
                None
            }
            Err(e) => return Err(e),
        };
        let (policy_loss, value_loss, entropy) =
            parts.map_or((f64::NAN, f64::NAN, f64::NAN), |p| (-p.objective, p.value_loss, p.entropy));
        let row = CurveRow {
            iteration: self.iteration,
            cycle,
            phase,
            mean_travel_time_s: metrics.mean_travel_time_s,
            mean_fuel_g: metrics.mean_fuel_g,
            policy_loss,
            value_loss,
            entropy,
        };
        info!(
            "iter {} cycle {} {}: tt {:.1} s fuel {:.1} g, {} vehicles, {} SA / {} PA transitions, {:.1} s",
            row.iteration,
            cycle,
            phase.as_str(),
            row.mean_travel_time_s,
            row.mean_fuel_g,
            metrics.vehicles_completed,
            batch.sa_transitions(),
            batch.pa_transitions(),
            started.elapsed().as_secs_f64()
        );
        Ok(row)
    }

    /// Run every cycle: SA iterations, then PA iterations (unless
    /// `train_pa` is off).
    pub fn run(&mut self, mut on_event: impl FnMut(TrainEvent<'_>) -> Result<()>) -> Result<Vec<CurveRow>> {
        let mut curve = Vec::new();
        for cycle in 1..=self.cfg.total_cycles {
            let phases: &[Phase] = if self.cfg.train_pa { &[Phase::Sa, Phase::Pa] } else { &[Phase::Sa] };
            for phase in phases {
                for _ in 0..self.cfg.iterations_per_cycle {
                    let row = self.iterate(cycle, *phase)?;
                    on_event(TrainEvent::Iteration(&row))?;
                    curve.push(row);
                }
            }
            on_event(TrainEvent::CycleEnd { cycle, policy: &self.policy })?;
        }
        Ok(curve)
    }
}

fn accumulate(acc: &mut LossParts, p: &LossParts) {
    acc.objective += p.objective;
    acc.value_loss += p.value_loss;
    acc.entropy += p.entropy;
    acc.total += p.total;
}

fn average(mut acc: LossParts, n: usize) -> LossParts {
    let n = n.max(1) as f64;
    acc.objective /= n;
    acc.value_loss /= n;
    acc.entropy /= n;
    acc.total /= n;
    acc
}

fn rows(data: &[Vec<f64>]) -> Array2<f64> {
    rows_of(data.iter().map(Vec::as_slice))
}

fn rows_of<'a>(data: impl Iterator<Item = &'a [f64]>) -> Array2<f64> {
    let data: Vec<&[f64]> = data.collect();
    let width = data.first().map_or(0, |r| r.len());
    let mut out = Array2::zeros((data.len(), width));
    for (r, row) in data.iter().enumerate() {
        out.row_mut(r).assign(&ndarray::ArrayView1::from(*row));
    }
    out
}

/// Trained policy as a network controller. `advise = false` drops PA
/// advisories (the SA-only controller).
pub struct JointSp {
    policy: JointPolicy,
    agents: AgentConfig,
    greedy: bool,
    advise: bool,
    seed: u64,
    rng: ChaCha8Rng,
}

impl JointSp {
    pub fn new(policy: JointPolicy, agents: AgentConfig, greedy: bool, seed: u64) -> JointSp {
        JointSp { policy, agents, greedy, advise: true, seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn sa_only(policy: JointPolicy, agents: AgentConfig, greedy: bool, seed: u64) -> JointSp {
        JointSp { advise: false, ..JointSp::new(policy, agents, greedy, seed) }
    }

    fn choose(&mut self, probs: &[f64]) -> usize {
        if self.greedy {
            argmax_lowest(probs)
        } else {
            sample_index(probs, &mut self.rng)
        }
    }
}

impl Controller for JointSp {
    fn name(&self) -> &str {
        if self.advise {
            "jointsp"
        } else {
            "sa-only"
        }
    }

    fn reset(&mut self) {
        self.rng = ChaCha8Rng::seed_from_u64(self.seed);
    }

    fn act(&mut self, world: &World) -> Result<Actions> {
        let obs = observe(world, &self.agents);
        let out = self.policy.forward(&obs);
        let phases = out.sa_probs.iter().map(|p| self.choose(p)).collect();
        let mut advisories = Vec::new();
        if self.advise {
            for (m, p) in out.pa_probs.iter().enumerate() {
                let a = self.choose(p);
                advisories.push((obs.pa[m].platoon, self.agents.action_speeds[a]));
            }
        }
        Ok(Actions { phases, advisories })
    }
}
