//! Acceptance criteria 1-9, one report line each.
//!
//! Criteria 6 and 7 read the runs under `experiments/grid2x3` (produced by
//! `experiments/grid2x3/run.sh`) and re-evaluate their checkpoints. Pass
//! `--retrain` to train the three seeds from scratch instead (hours).

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cosignal::agents::{AgentConfig, ACTION_SPEEDS};
use cosignal::config::RunConfig;
use cosignal::eval::{self, median, ControllerKind, SweepAxis};
use cosignal::net::{build_grid, LaneId, LinkId, NetworkSpec};
use cosignal::nn::{grad_check, AgentParams, ModelConfig};
use cosignal::platoon::{check_invariants, PlatoonEventKind, PlatoonId};
use cosignal::signal::{backpressure_from_queues, backpressure_select};
use cosignal::sim::{write_metrics_csv, Actions, Backpressure, Controller, FixedTime, SimConfig, World};
use cosignal::train::{
    pa_loss_and_grad, ppo_objective, sa_loss_and_grad, value_loss, CurveRow, JointPolicy, JointSp, PaBatch, Phase,
    SaBatch, TrainConfig, TrainEvent, Trainer,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn grid() -> Arc<NetworkSpec> {
    Arc::new(build_grid(2, 3, 300.0, 2).expect("grid"))
}

fn neighbor_indices(net: &NetworkSpec) -> Vec<Vec<usize>> {
    net.intersections.iter().map(|int| net.neighbors(int.id).iter().map(|j| j.index()).collect()).collect()
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(lo..hi))
}

fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
}

/// Two coordinates from every tensor, so each layer of each block is probed.
fn probe_indices(params: &AgentParams, offset: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut out = Vec::new();
    let mut start = offset;
    for size in params.tensor_sizes() {
        for _ in 0..2 {
            out.push(start + rng.random_range(0..size));
        }
        start += size;
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// grad_check restricted to `picks` of a full parameter vector.
fn check_subset(full: &[f64], analytic: &[f64], picks: &[usize], mut loss: impl FnMut(&[f64]) -> f64) -> f64 {
    let sub: Vec<f64> = picks.iter().map(|i| full[*i]).collect();
    let sub_grad: Vec<f64> = picks.iter().map(|i| analytic[*i]).collect();
    let mut x = full.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    grad_check(
        &sub,
        &sub_grad,
        |s| {
            for (k, i) in picks.iter().enumerate() {
                x[*i] = s[k];
            }
            loss(&x)
        },
        1e-5,
        sub.len(),
        &mut rng,
    )
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let net = grid();
    let agents = AgentConfig::default();
    // default depth at reduced width keeps 20 seeds inside the time budget
    let model = ModelConfig {
        embed: 8,
        encoder_hidden: vec![16, 16],
        message_hidden: vec![24, 24],
        message_out: 12,
        decoder_hidden: vec![16, 16],
    };
    let neighbors = neighbor_indices(&net);
    let coefs = TrainConfig::default().coefs();
    let k = model.embed;
    let rows = 8;
    let (mut worst_sa, mut worst_pa) = (0.0f64, 0.0f64);
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let policy = JointPolicy::new(&net, &agents, &model, seed);

        let batch = SaBatch {
            obs: policy.sa.iter().map(|p| uniform(&mut rng, rows, p.arch.obs_dim, 0.0, 1.0)).collect(),
            pa_blocks: policy.sa.iter().map(|_| uniform(&mut rng, rows, agents.n_pa * k, -1.0, 1.0)).collect(),
            actions: policy.sa.iter().map(|p| (0..rows).map(|_| rng.random_range(0..p.arch.n_actions)).collect()).collect(),
            logp_old: policy.sa.iter().map(|_| (0..rows).map(|_| rng.random_range(0.1f64..0.5).ln()).collect()).collect(),
            advantages: policy.sa.iter().map(|_| normal_vec(&mut rng, rows)).collect(),
            targets: policy.sa.iter().map(|_| normal_vec(&mut rng, rows)).collect(),
        };
        let (_, grads) = sa_loss_and_grad(&policy.sa, &neighbors, &batch, coefs);
        let full: Vec<f64> = policy.sa.iter().flat_map(|p| p.flatten()).collect();
        let analytic: Vec<f64> = grads.iter().flat_map(|g| g.flatten()).collect();
        let mut picks = Vec::new();
        let mut offset = 0;
        for p in &policy.sa {
            picks.extend(probe_indices(p, offset, &mut rng));
            offset += p.num_params();
        }
        let mut scratch = policy.sa.clone();
        let err = check_subset(&full, &analytic, &picks, |x| {
            let mut start = 0;
            for p in scratch.iter_mut() {
                let n = p.num_params();
                p.assign(&x[start..start + n]);
                start += n;
            }
            sa_loss_and_grad(&scratch, &neighbors, &batch, coefs).0.iter().map(|l| l.total).sum()
        });
        worst_sa = worst_sa.max(err);

        let pa_rows = 16;
        let pa_batch = PaBatch {
            obs: uniform(&mut rng, pa_rows, policy.pa.arch.obs_dim, 0.0, 1.0),
            inbound: uniform(&mut rng, pa_rows, k, -1.0, 1.0),
            actions: (0..pa_rows).map(|_| rng.random_range(0..policy.pa.arch.n_actions)).collect(),
            logp_old: (0..pa_rows).map(|_| rng.random_range(0.1f64..0.4).ln()).collect(),
            advantages: normal_vec(&mut rng, pa_rows),
            targets: normal_vec(&mut rng, pa_rows),
        };
        let (_, grad) = pa_loss_and_grad(&policy.pa, &pa_batch, coefs);
        let full = policy.pa.flatten();
        let picks = probe_indices(&policy.pa, 0, &mut rng);
        let mut scratch = policy.pa.clone();
        let err = check_subset(&full, &grad.flatten(), &picks, |x| {
            scratch.assign(x);
            pa_loss_and_grad(&scratch, &pa_batch, coefs).0.total
        });
        worst_pa = worst_pa.max(err);
    }
    let secs = started.elapsed().as_secs_f64();
    let summary = format!("max rel err SA {worst_sa:.2e}, PA {worst_pa:.2e} over 20 seeds in {secs:.1} s");
    ensure(worst_sa < 1e-4 && worst_pa < 1e-4, || summary.clone())?;
    ensure(secs < 60.0, || format!("{summary}: over the 1 min budget"))?;
    Ok(summary)
}

/// Pressure argmax written out lane by lane, without the library helper.
fn brute_force_phase(net: &NetworkSpec, i: usize, lane_q: &[u32], head: &[Option<LinkId>], link_q: &[u32]) -> usize {
    let int = &net.intersections[i];
    let mut best = (0usize, f64::NEG_INFINITY);
    for (k, phase) in int.phases.iter().enumerate() {
        let mut pressure = 0.0;
        for lane in &int.approach_lanes {
            for out in &net.lane(*lane).movements {
                if phase.permits(*lane, *out) && head[lane.index()] == Some(*out) {
                    pressure += lane_q[lane.index()] as f64 - link_q[out.index()] as f64;
                }
            }
        }
        if pressure > best.1 {
            best = (k, pressure);
        }
    }
    best.0
}

fn criterion_2() -> Outcome {
    let net = grid();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut agree = 0;
    let configs = 1000;
    for _ in 0..configs {
        // small ranges make ties common, which exercises the tie-break
        let hi = if rng.random_bool(0.5) { 4 } else { 40 };
        let lane_q: Vec<u32> = (0..net.lanes.len()).map(|_| rng.random_range(0..hi)).collect();
        let link_q: Vec<u32> = (0..net.links.len()).map(|_| rng.random_range(0..hi)).collect();
        let head: Vec<Option<LinkId>> = net
            .lanes
            .iter()
            .map(|l| (!l.movements.is_empty() && rng.random_bool(0.8)).then(|| l.movements[rng.random_range(0..l.movements.len())]))
            .collect();
        let i = rng.random_range(0..net.intersections.len());
        let fast = backpressure_from_queues(&net, net.intersections[i].id, &lane_q, &head, &link_q);
        if fast == brute_force_phase(&net, i, &lane_q, &head, &link_q) {
            agree += 1;
        }
    }
    // the live-world entry point on congested snapshots
    let mut world = World::new(net.clone(), SimConfig::default(), 5).map_err(|e| e.to_string())?;
    let mut ctl = FixedTime { hold: 6 };
    let mut live = (0, 0);
    for _ in 0..120 {
        let actions = ctl.act(&world).map_err(|e| e.to_string())?;
        world.apply_actions(&actions).map_err(|e| e.to_string())?;
        world.run_control_step();
        let lane_q: Vec<u32> = (0..net.lanes.len()).map(|l| world.lane_queue(LaneId(l as u32))).collect();
        let link_q: Vec<u32> = (0..net.links.len()).map(|l| world.link_queue(LinkId(l as u32))).collect();
        let head: Vec<Option<LinkId>> = (0..net.lanes.len()).map(|l| world.lane_head_out(LaneId(l as u32))).collect();
        for (i, int) in net.intersections.iter().enumerate() {
            live.1 += 1;
            if backpressure_select(int.id, &world) == brute_force_phase(&net, i, &lane_q, &head, &link_q) {
                live.0 += 1;
            }
        }
    }
    ensure(agree == configs && live.0 == live.1, || {
        format!("backpressure agreement {agree}/{configs} random, {}/{} live", live.0, live.1)
    })?;

    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..300);
        let clip = rng.random_range(0.05..0.5);
        let ratios: Vec<f64> = (0..n).map(|_| rng.random_range(0.3..1.8)).collect();
        let adv = normal_vec(&mut rng, n);
        let values = normal_vec(&mut rng, n);
        let targets = normal_vec(&mut rng, n);
        let mut obj = 0.0;
        let mut vl = 0.0;
        for b in 0..n {
            let clipped = if ratios[b] > 1.0 + clip {
                1.0 + clip
            } else if ratios[b] < 1.0 - clip {
                1.0 - clip
            } else {
                ratios[b]
            };
            let (u, c) = (ratios[b] * adv[b], clipped * adv[b]);
            obj += if u < c { u } else { c };
            vl += (values[b] - targets[b]) * (values[b] - targets[b]);
        }
        worst = worst
            .max((ppo_objective(&ratios, &adv, clip) - obj / n as f64).abs())
            .max((value_loss(&values, &targets) - vl / n as f64).abs());
    }
    ensure(worst <= 1e-10, || format!("PPO/value brute-force deviation {worst:.2e}"))?;
    Ok(format!(
        "backpressure {agree}/{configs} random + {}/{} live agree; PPO/value max deviation {worst:.1e}",
        live.0, live.1
    ))
}

/// Uniformly random phases and advisories.
struct RandomControl {
    rng: ChaCha8Rng,
}

impl Controller for RandomControl {
    fn name(&self) -> &str {
        "random"
    }

    fn act(&mut self, world: &World) -> cosignal::Result<Actions> {
        let phases = world.net.intersections.iter().map(|int| self.rng.random_range(0..int.phases.len())).collect();
        let mut advisories = Vec::new();
        for pid in world.platoons.keys() {
            if self.rng.random_bool(0.5) {
                advisories.push((*pid, ACTION_SPEEDS[self.rng.random_range(0..ACTION_SPEEDS.len())]));
            }
        }
        Ok(Actions { phases, advisories })
    }
}

fn mixed_controller(k: usize, net: &NetworkSpec, agents: &AgentConfig, seed: u64) -> Box<dyn Controller> {
    match k % 4 {
        0 => Box::new(Backpressure),
        1 => Box::new(FixedTime { hold: 6 }),
        2 => Box::new(JointSp::new(JointPolicy::new(net, agents, &ModelConfig::default(), seed), agents.clone(), false, seed)),
        _ => Box::new(RandomControl { rng: ChaCha8Rng::seed_from_u64(seed) }),
    }
}

fn criterion_3() -> Outcome {
    let net = grid();
    let agents = AgentConfig::default();
    let sim = SimConfig::default();
    let mut totals = (0u64, 0u64, 0u64, 0u64, 0u64);
    for ep in 0..10 {
        let seed = 300 + ep as u64;
        let mut ctl = mixed_controller(ep, &net, &agents, seed);
        let r = cosignal::sim::run_episode(net.clone(), &sim, seed, ctl.as_mut()).map_err(|e| e.to_string())?;
        totals.0 += r.audit.substeps;
        totals.1 += r.audit.negative_gaps;
        totals.2 += r.audit.red_crossings;
        totals.3 += r.audit.conservation_violations;
        totals.4 += r.entered;
    }
    let (substeps, gaps, reds, cons, entered) = totals;
    let summary = format!(
        "{substeps} substeps, {entered} vehicles: {gaps} negative gaps, {reds} red crossings, {cons} conservation violations"
    );
    ensure(gaps == 0 && reds == 0 && cons == 0 && substeps == 10 * 3600, || summary.clone())?;
    Ok(summary)
}

fn criterion_4() -> Outcome {
    let net = grid();
    let agents = AgentConfig::default();
    let mut sim = SimConfig { record_events: true, ..SimConfig::default() };
    let mut violations: Vec<String> = Vec::new();
    let (mut checks, mut formed, mut merges) = (0usize, 0usize, 0usize);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for ep in 0..10 {
        let seed = rng.random::<u64>() % 1_000_000;
        sim.demand.demand_multiplier = rng.random_range(0.5..1.2);
        let mut ctl = mixed_controller(ep, &net, &agents, seed);
        let mut world = World::new(net.clone(), sim.clone(), seed).map_err(|e| e.to_string())?;
        let mut records = Vec::new();
        for _ in 0..sim.horizon {
            let actions = ctl.act(&world).map_err(|e| e.to_string())?;
            world.apply_actions(&actions).map_err(|e| e.to_string())?;
            let report = world.run_control_step();
            records.extend(report.finished);
            violations.extend(check_invariants(&world).into_iter().map(|v| format!("ep {ep} step {}: {v}", world.control_step)));
            checks += 1;
        }
        records.extend(world.finish());
        violations.extend(check_invariants(&world).into_iter().map(|v| format!("ep {ep} end: {v}")));
        ensure(world.platoons.is_empty(), || format!("ep {ep}: platoons left after finish"))?;

        let cfg = &sim.platoon;
        let mut created = BTreeSet::new();
        let mut terminal_events: BTreeMap<PlatoonId, usize> = BTreeMap::new();
        for e in &world.event_log {
            match e.kind {
                PlatoonEventKind::Formation | PlatoonEventKind::Extension | PlatoonEventKind::Merge => {
                    if e.kind == PlatoonEventKind::Formation {
                        created.insert(e.platoon);
                        formed += 1;
                    }
                    if e.kind == PlatoonEventKind::Merge {
                        merges += 1;
                    }
                    let (Some(gap), Some(v)) = (e.pair_gap, e.pair_rear_speed) else {
                        violations.push(format!("ep {ep}: {} event without pair data", e.kind.label()));
                        continue;
                    };
                    let eligible = gap / v.max(cfg.headway_speed_floor) <= cfg.headway_threshold || gap <= cfg.distance_threshold;
                    if !eligible {
                        violations.push(format!("ep {ep} step {}: {} at gap {gap:.2} m, speed {v:.2}", e.step, e.kind.label()));
                    }
                }
                PlatoonEventKind::Terminal(_) => *terminal_events.entry(e.platoon).or_default() += 1,
                _ => {}
            }
        }
        let mut emitted: BTreeMap<PlatoonId, usize> = BTreeMap::new();
        for r in &records {
            *emitted.entry(r.id).or_default() += 1;
        }
        for pid in &created {
            match (emitted.get(pid), terminal_events.get(pid)) {
                (Some(1), Some(1)) => {}
                (r, t) => violations.push(format!("ep {ep}: {pid} emitted {r:?} terminal records, {t:?} terminal events")),
            }
        }
        if emitted.keys().any(|p| !created.contains(p)) {
            violations.push(format!("ep {ep}: terminal record for a platoon that never formed"));
        }
    }
    let summary = format!("{checks} step checks, {formed} formations, {merges} merges, {} violations", violations.len());
    ensure(violations.is_empty() && formed > 0 && merges > 0, || {
        format!("{summary}; first: {}", violations.first().map_or("none", String::as_str))
    })?;
    Ok(summary)
}

fn criterion_5() -> Outcome {
    let net = grid();
    let agents = AgentConfig::default();
    let model = ModelConfig::default();
    let sim = SimConfig::default();
    let cfg = TrainConfig { batch_size: 120, minibatch: 64, epochs: 2, seed: 5, ..TrainConfig::default() };
    let mut trainer = Trainer::new(net.clone(), &sim, &agents, &model, &cfg).map_err(|e| e.to_string())?;
    // warm up so the PA phase sees platoons
    let before = trainer.policy.clone();
    trainer.iterate(1, Phase::Sa).map_err(|e| e.to_string())?;
    ensure(trainer.policy.pa == before.pa, || "θ_PA changed during an SA iteration".into())?;
    ensure(trainer.policy.sa.iter().zip(&before.sa).all(|(a, b)| a != b), || "an SA was not updated".into())?;
    let mid = trainer.policy.clone();
    let row = trainer.iterate(1, Phase::Pa).map_err(|e| e.to_string())?;
    ensure(row.policy_loss.is_finite(), || "PA iteration had no transitions".into())?;
    ensure(trainer.policy.sa == mid.sa, || "θ_SA changed during a PA iteration".into())?;
    ensure(trainer.policy.pa != mid.pa, || "θ_PA was not updated".into())?;

    // every PA reads the one θ_PA: identical inputs give identical outputs
    // before and after the update, and the change is the same for all
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let x: Vec<f64> = (0..mid.pa.arch.obs_dim).map(|_| rng.random_range(0.0..1.0)).collect();
    let z_in = Array1::from_shape_fn(model.embed, |_| rng.random_range(-1.0..1.0));
    let pa_out = |p: &AgentParams| {
        let e = p.encode(&x);
        p.decode(&p.message(&e.z, &[Some(z_in.clone())]), &[true; 5])
    };
    let instances_before: Vec<_> = (0..4).map(|_| pa_out(&mid.pa)).collect();
    let instances_after: Vec<_> = (0..4).map(|_| pa_out(&trainer.policy.pa)).collect();
    ensure(instances_before.windows(2).all(|w| w[0] == w[1]) && instances_after.windows(2).all(|w| w[0] == w[1]), || {
        "PA instances diverged on identical inputs".into()
    })?;
    ensure(instances_before[0] != instances_after[0], || "PA update left the policy unchanged".into())?;

    // an SA update leaves the other SAs' outputs on fixed inputs unchanged
    let sa_out = |p: &AgentParams, obs: &[f64]| {
        let e = p.encode(obs);
        let inbound = vec![None; p.arch.inbound_slots];
        p.decode(&p.message(&e.z, &inbound), &vec![true; p.arch.n_actions])
    };
    let inputs: Vec<Vec<f64>> = mid.sa.iter().map(|p| (0..p.arch.obs_dim).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
    let mut changed = mid.clone();
    let mut flat = changed.sa[0].flatten();
    flat.iter_mut().for_each(|w| *w += 0.01);
    changed.sa[0].assign(&flat);
    ensure((1..mid.sa.len()).all(|i| sa_out(&mid.sa[i], &inputs[i]) == sa_out(&changed.sa[i], &inputs[i])), || {
        "an SA update moved another SA's output".into()
    })?;
    Ok("θ_PA bit-identical through SA iteration, θ_SA through PA iteration; shared θ_PA and isolated θ_SA hold".into())
}

fn experiments_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../experiments/grid2x3")
}

struct SeedRun {
    cfg: RunConfig,
    policy: JointPolicy,
    curve: Vec<CurveRow>,
}

fn load_run(dir: &Path) -> Result<SeedRun, String> {
    let cfg = RunConfig::load(Some(&dir.join("config.toml")), &[]).map_err(|e| format!("{}: {e}", dir.display()))?;
    let net = cfg.network.build().map_err(|e| e.to_string())?;
    let policy = eval::load_policy(&dir.join("checkpoint.json"), &net, &cfg).map_err(|e| format!("{}: {e}", dir.display()))?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(dir.join("training_curve.csv"))
        .map_err(|e| e.to_string())?;
    let curve = reader.deserialize().collect::<Result<Vec<CurveRow>, _>>().map_err(|e| e.to_string())?;
    Ok(SeedRun { cfg, policy, curve })
}

fn retrain(seed: u64) -> Result<SeedRun, String> {
    let base = RunConfig::load(Some(&experiments_dir().join("config.toml")), &[format!("seed={seed}")]).map_err(|e| e.to_string())?;
    let net = Arc::new(base.network.build().map_err(|e| e.to_string())?);
    let mut trainer = Trainer::new(net, &base.sim, &base.agents, &base.model, &base.train).map_err(|e| e.to_string())?;
    let curve = trainer.run(|_: TrainEvent<'_>| Ok(())).map_err(|e| e.to_string())?;
    Ok(SeedRun { policy: trainer.policy.clone(), cfg: base, curve })
}

fn mean_tt(net: &Arc<NetworkSpec>, cfg: &RunConfig, kind: ControllerKind, policy: Option<&JointPolicy>) -> Result<f64, String> {
    let eps = eval::evaluate(net, cfg, kind, policy).map_err(|e| e.to_string())?;
    Ok(eps.iter().map(|e| e.result.metrics.mean_travel_time_s).sum::<f64>() / eps.len() as f64)
}

fn criteria_6_7(runs: &[SeedRun]) -> (Outcome, Outcome) {
    let six = (|| {
        ensure(runs.len() >= 3, || format!("{} seeds, need 3", runs.len()))?;
        let mut per: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for run in runs {
            let t = &run.cfg.train;
            let m = run.cfg.sim.demand.demand_multiplier;
            ensure(t.total_cycles >= 4 && t.iterations_per_cycle >= 30 && (0.5..=0.7).contains(&m), || {
                format!("seed {} schedule {}x{} at multiplier {m} is outside the criterion", run.cfg.seed, t.total_cycles, t.iterations_per_cycle)
            })?;
            let net = Arc::new(run.cfg.network.build().map_err(|e| e.to_string())?);
            let untrained = JointPolicy::new(&net, &run.cfg.agents, &run.cfg.model, run.cfg.seed);
            per.entry("jointsp").or_default().push(mean_tt(&net, &run.cfg, ControllerKind::Jointsp, Some(&run.policy))?);
            per.entry("backpressure").or_default().push(mean_tt(&net, &run.cfg, ControllerKind::Backpressure, None)?);
            per.entry("fixed").or_default().push(mean_tt(&net, &run.cfg, ControllerKind::Fixed, None)?);
            per.entry("untrained").or_default().push(mean_tt(&net, &run.cfg, ControllerKind::Jointsp, Some(&untrained))?);
        }
        let med = |k: &str| median(&per[k]);
        let (j, bp, fx, un) = (med("jointsp"), med("backpressure"), med("fixed"), med("untrained"));
        let summary = format!(
            "median mean travel time over {} seeds: jointsp {j:.1} s, backpressure {bp:.1} s ({:+.1}%), fixed {fx:.1} s; untrained jointsp {un:.1} s",
            runs.len(),
            100.0 * (j - bp) / bp
        );
        ensure(j <= 0.95 * bp && j < fx, || summary.clone())?;
        Ok(summary)
    })();
    let seven = (|| {
        ensure(!runs.is_empty(), || "no runs".into())?;
        let best20 = |rows: &[&CurveRow], get: fn(&CurveRow) -> f64| {
            let mut v: Vec<f64> = rows.iter().map(|r| get(r)).filter(|x| x.is_finite()).collect();
            v.sort_by(f64::total_cmp);
            v.truncate(20);
            v.iter().sum::<f64>() / v.len().max(1) as f64
        };
        let mut lines = Vec::new();
        let mut ok = true;
        for run in runs {
            let last = run.curve.iter().map(|r| r.cycle).max().unwrap_or(0);
            let first: Vec<&CurveRow> = run.curve.iter().filter(|r| r.cycle == 1).collect();
            let fin: Vec<&CurveRow> = run.curve.iter().filter(|r| r.cycle == last).collect();
            ensure(last >= 2 && first.len() >= 20 && fin.len() >= 20, || format!("seed {}: curve too short", run.cfg.seed))?;
            let (t0, t1) = (best20(&first, |r| r.mean_travel_time_s), best20(&fin, |r| r.mean_travel_time_s));
            let (f0, f1) = (best20(&first, |r| r.mean_fuel_g), best20(&fin, |r| r.mean_fuel_g));
            ok &= t1 <= t0 && f1 <= f0;
            lines.push(format!("seed {}: tt {t0:.1}->{t1:.1} s, fuel {f0:.1}->{f1:.1} g", run.cfg.seed));
        }
        let summary = format!("best-20 first vs final cycle: {}", lines.join("; "));
        ensure(ok, || summary.clone())?;
        Ok(summary)
    })();
    (six, seven)
}

fn criterion_8() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.seed = 8;
    cfg.sim.horizon = 240;
    cfg.eval.episodes = 2;
    let net = Arc::new(cfg.network.build().map_err(|e| e.to_string())?);
    let policy = JointPolicy::new(&net, &cfg.agents, &cfg.model, 8);
    let render = |kind: ControllerKind, greedy: bool| -> Result<Vec<u8>, String> {
        let mut cfg = cfg.clone();
        cfg.eval.greedy = greedy;
        let eps = eval::evaluate(&net, &cfg, kind, kind.needs_checkpoint().then_some(&policy)).map_err(|e| e.to_string())?;
        let mut out = Vec::new();
        let mut header = cfg.header_lines(cfg.seed);
        header.push(format!("controller={}", kind.as_str()));
        write_metrics_csv(&mut out, &header, &eval::metrics_rows(kind, cfg.seed, &eps)).map_err(|e| e.to_string())?;
        Ok(out)
    };
    let mut checked = Vec::new();
    for kind in ControllerKind::ALL {
        for greedy in [true, false] {
            if !kind.needs_checkpoint() && !greedy {
                continue;
            }
            let (a, b) = (render(kind, greedy)?, render(kind, greedy)?);
            ensure(a == b, || format!("{} (greedy={greedy}) CSVs differ", kind.as_str()))?;
            checked.push(format!("{}{}", kind.as_str(), if greedy { "" } else { "/sampled" }));
        }
    }
    Ok(format!("identical metrics CSV bytes on re-run for {}", checked.join(", ")))
}

fn criterion_9(trained: Option<&SeedRun>) -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.seed = 9;
    let net = Arc::new(cfg.network.build().map_err(|e| e.to_string())?);
    let policy = trained.map(|r| r.policy.clone());
    let mut lines = Vec::new();
    let mut monotone = true;
    let mut kinds = vec![ControllerKind::Fixed];
    if policy.is_some() {
        kinds.push(ControllerKind::Jointsp);
    }
    for kind in kinds {
        let p = kind.needs_checkpoint().then(|| policy.as_ref()).flatten();
        let demand = eval::sweep(&net, &cfg, kind, p, SweepAxis::DemandMultiplier, &[0.6, 1.0, 1.4]).map_err(|e| e.to_string())?;
        let tts: Vec<f64> = demand.iter().map(|r| r.median_travel_time_s).collect();
        let ok = tts.windows(2).all(|w| w[0] <= w[1]);
        monotone &= ok;
        // completions expose gridlock behind the completed-only mean
        lines.push(format!(
            "{} median tt {} ({}), completed {}",
            kind.as_str(),
            tts.iter().map(|t| format!("{t:.1}")).collect::<Vec<_>>().join(", "),
            if ok { "nondecreasing" } else { "NOT nondecreasing" },
            demand.iter().map(|r| r.vehicles_completed.to_string()).collect::<Vec<_>>().join("/")
        ));
    }
    let mut short = cfg.clone();
    short.eval.episodes = 2;
    let cav = eval::sweep(&net, &short, ControllerKind::Fixed, None, SweepAxis::CavRate, &[0.0, 1.0]).map_err(|e| e.to_string())?;
    let line = format!("formations at cav_rate 0 / 1: {} / {}", cav[0].formations, cav[1].formations);
    let formations_ok = cav[0].formations == 0 && cav[1].formations > 0;
    lines.push(line);
    let summary = lines.join("; ");
    ensure(monotone && formations_ok, || summary.clone())?;
    Ok(summary)
}

fn report(results: &mut Vec<(u8, bool)>, n: u8, r: Outcome) {
    match &r {
        Ok(s) => println!("criterion {n}: PASS {s}"),
        Err(s) => println!("criterion {n}: FAIL {s}"),
    }
    results.push((n, r.is_ok()));
}

fn main() {
    let retrain_requested = std::env::args().any(|a| a == "--retrain");
    let mut results = Vec::new();
    report(&mut results, 1, criterion_1());
    report(&mut results, 2, criterion_2());
    report(&mut results, 3, criterion_3());
    report(&mut results, 4, criterion_4());
    report(&mut results, 5, criterion_5());

    let runs: Result<Vec<SeedRun>, String> = if retrain_requested {
        (0..3).map(retrain).collect()
    } else {
        (0..3).map(|s| load_run(&experiments_dir().join(format!("seed{s}")))).collect()
    };
    let (six, seven) = match &runs {
        Ok(runs) => criteria_6_7(runs),
        Err(e) => {
            let msg = format!("{e} (run experiments/grid2x3/run.sh, or pass --retrain)");
            (Err(msg.clone()), Err(msg))
        }
    };
    report(&mut results, 6, six);
    report(&mut results, 7, seven);
    report(&mut results, 8, criterion_8());
    report(&mut results, 9, criterion_9(runs.as_ref().ok().and_then(|r| r.first())));

    let failed: Vec<u8> = results.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
    } else {
        println!("acceptance: failed {failed:?}");
        std::process::exit(1);
    }
}
