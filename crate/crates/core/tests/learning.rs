//! Network and trainer properties: policy simplex, PA sharing, the PPO to
//! vanilla policy-gradient limit, checkpoints and trainer bookkeeping.

use std::sync::Arc;

use ndarray::{s, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cosignal::agents::AgentConfig;
use cosignal::config::RunConfig;
use cosignal::eval;
use cosignal::net::build_grid;
use cosignal::nn::{grad_check, hcat, masked_softmax, AgentParams, ArchSpec, Checkpoint, ModelConfig, PpoCoefs};
use cosignal::sim::SimConfig;
use cosignal::train::{pa_loss_and_grad, JointPolicy, PaBatch, Phase, TrainConfig, Trainer};
use cosignal::Error;

fn small_model() -> ModelConfig {
    ModelConfig { embed: 8, encoder_hidden: vec![16], message_hidden: vec![16], message_out: 12, decoder_hidden: vec![16] }
}

fn pa_params(seed: u64) -> AgentParams {
    let arch = ArchSpec { obs_dim: 11, n_actions: 5, inbound_slots: 1, sends_to_pa: false, model: small_model() };
    AgentParams::new(arch, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn random_batch(p: &AgentParams, rows: usize, rng: &mut ChaCha8Rng) -> PaBatch {
    let k = p.arch.model.embed;
    PaBatch {
        obs: Array2::from_shape_fn((rows, p.arch.obs_dim), |_| rng.random_range(0.0..1.0)),
        inbound: Array2::from_shape_fn((rows, k), |_| rng.random_range(-1.0..1.0)),
        actions: (0..rows).map(|_| rng.random_range(0..p.arch.n_actions)).collect(),
        logp_old: (0..rows).map(|_| rng.random_range(0.1f64..0.4).ln()).collect(),
        advantages: (0..rows).map(|_| rng.random_range(-2.0..2.0)).collect(),
        targets: (0..rows).map(|_| rng.random_range(-2.0..2.0)).collect(),
    }
}

fn logits(p: &AgentParams, batch: &PaBatch) -> Array2<f64> {
    let z = p.enc.forward(batch.obs.view());
    p.top_forward(hcat(&[z.view(), batch.inbound.view()])).logits().clone()
}

proptest! {
    #[test]
    fn decode_is_a_distribution_under_any_mask(seed in 0u64..1000, bits in 1u32..32) {
        let p = pa_params(seed);
        let mask: Vec<bool> = (0..5).map(|j| bits & (1 << j) != 0).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..11).map(|_| rng.random_range(-3.0..3.0)).collect();
        let e = p.encode(&x);
        let (probs, value) = p.decode(&p.message(&e.z, &[None]), &mask);
        prop_assert!(value.is_finite());
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (q, m) in probs.iter().zip(&mask) {
            prop_assert!(*q >= 0.0);
            if !m {
                prop_assert_eq!(*q, 0.0);
            }
        }
    }

    #[test]
    fn softmax_survives_extreme_logits(a in -1e6f64..1e6, b in -1e6f64..1e6) {
        let p = masked_softmax(&[a, b, 0.0], &[true, true, false]);
        prop_assert!(p.iter().all(|x| x.is_finite()));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn shared_pa_gradient_is_the_sum_over_instances() {
    let p = pa_params(3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch = random_batch(&p, 24, &mut rng);
    let coefs = TrainConfig::default().coefs();
    let (_, whole) = pa_loss_and_grad(&p, &batch, coefs);
    // rows 0..6, 6..15 and 15..24 belong to three platoons
    let mut sum = vec![0.0; p.num_params()];
    for (lo, hi) in [(0, 6), (6, 15), (15, 24)] {
        let part = PaBatch {
            obs: batch.obs.slice(s![lo..hi, ..]).to_owned(),
            inbound: batch.inbound.slice(s![lo..hi, ..]).to_owned(),
            actions: batch.actions[lo..hi].to_vec(),
            logp_old: batch.logp_old[lo..hi].to_vec(),
            advantages: batch.advantages[lo..hi].to_vec(),
            targets: batch.targets[lo..hi].to_vec(),
        };
        // each instance's share of the batch-mean loss
        let share = (hi - lo) as f64 / 24.0;
        let (_, g) = pa_loss_and_grad(&p, &part, coefs);
        for (s, x) in sum.iter_mut().zip(g.flatten()) {
            *s += share * x;
        }
    }
    let whole = whole.flatten();
    let worst = whole.iter().zip(&sum).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-12, "max deviation {worst:e}");
}

#[test]
fn unclipped_single_epoch_ppo_is_vanilla_policy_gradient() {
    let p = pa_params(8);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut batch = random_batch(&p, 20, &mut rng);
    // first epoch: the behaviour policy is the current one
    let l = logits(&p, &batch);
    let mask = [true; 5];
    for b in 0..20 {
        let probs = masked_softmax(l.row(b).as_slice().unwrap(), &mask);
        batch.logp_old[b] = probs[batch.actions[b]].ln();
    }
    let coefs = PpoCoefs { clip: 1e12, entropy: 0.0, value: 0.0 };
    let (_, g) = pa_loss_and_grad(&p, &batch, coefs);
    // vanilla estimator: -(1/n) Σ Â ∇ log π(a|s), checked by finite differences
    let mut scratch = p.clone();
    let vanilla = |flat: &[f64]| {
        scratch.assign(flat);
        let l = logits(&scratch, &batch);
        (0..20)
            .map(|b| {
                let probs = masked_softmax(l.row(b).as_slice().unwrap(), &mask);
                -batch.advantages[b] * probs[batch.actions[b]].ln()
            })
            .sum::<f64>()
            / 20.0
    };
    let flat = p.flatten();
    let err = grad_check(&flat, &g.flatten(), vanilla, 1e-5, 400, &mut rng);
    assert!(err < 1e-5, "relative error {err:e}");
}

#[test]
fn default_width_pa_gradient_matches_finite_differences() {
    let arch = ArchSpec { obs_dim: 11, n_actions: 5, inbound_slots: 1, sends_to_pa: false, model: ModelConfig::default() };
    let p = AgentParams::new(arch, &mut ChaCha8Rng::seed_from_u64(21));
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let batch = random_batch(&p, 16, &mut rng);
    let coefs = TrainConfig::default().coefs();
    let (_, g) = pa_loss_and_grad(&p, &batch, coefs);
    let mut scratch = p.clone();
    let loss = |flat: &[f64]| {
        scratch.assign(flat);
        pa_loss_and_grad(&scratch, &batch, coefs).0.total
    };
    let err = grad_check(&p.flatten(), &g.flatten(), loss, 1e-5, 300, &mut rng);
    assert!(err < 1e-4, "relative error {err:e}");
}

#[test]
fn checkpoints_round_trip_and_reject_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    let net = build_grid(1, 2, 200.0, 1).unwrap();
    let agents = AgentConfig::default();
    let policy = JointPolicy::new(&net, &agents, &small_model(), 2);
    let path = dir.path().join("ckpt.json");
    let ckpt = policy.checkpoint(&net.content_hash(), "cfg", serde_json::json!({"cycle": 1}));
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(JointPolicy::from_checkpoint(loaded.clone()), policy);
    loaded.check_compatible(&JointPolicy::expected_arch_hash(&net, &agents, &small_model()), &net.content_hash()).unwrap();

    let wider = ModelConfig { embed: 16, ..small_model() };
    let err = loaded.check_compatible(&JointPolicy::expected_arch_hash(&net, &agents, &wider), &net.content_hash());
    assert!(matches!(err, Err(Error::CheckpointMismatch(_))));
    let other = build_grid(1, 2, 250.0, 1).unwrap();
    let err = loaded.check_compatible(&JointPolicy::expected_arch_hash(&other, &agents, &small_model()), &other.content_hash());
    assert!(matches!(err, Err(Error::CheckpointMismatch(_))));

    // a stored hash that disagrees with the stored parameters
    let mut forged = ckpt.clone();
    forged.pa.arch.n_actions = 4;
    forged.save(&path).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::CheckpointMismatch(_))));

    let mut cfg = RunConfig::default();
    cfg.network.rows = 1;
    cfg.network.cols = 2;
    ckpt.save(&path).unwrap();
    assert!(matches!(eval::load_policy(&path, &cfg.network.build().unwrap(), &cfg), Err(Error::CheckpointMismatch(_))));
}

fn short_trainer(sim: &SimConfig, seed: u64) -> Trainer {
    let net = Arc::new(build_grid(1, 2, 200.0, 2).unwrap());
    let cfg = TrainConfig { batch_size: 60, minibatch: 32, epochs: 1, seed, ..TrainConfig::default() };
    Trainer::new(net, sim, &AgentConfig::default(), &small_model(), &cfg).unwrap()
}

#[test]
fn pa_phase_without_platoons_skips_the_update() {
    let mut sim = SimConfig::default();
    sim.demand.cav_rate = 0.0;
    let mut trainer = short_trainer(&sim, 1);
    let before = trainer.policy.clone();
    let batch = trainer.collect().unwrap();
    assert_eq!(batch.pa_transitions(), 0);
    assert!(trainer.update_pa(&batch).unwrap().is_none());
    let row = trainer.iterate(1, Phase::Pa).unwrap();
    assert!(row.policy_loss.is_nan() && row.value_loss.is_nan());
    assert_eq!(trainer.policy, before);

    sim.demand.demand_multiplier = 0.0;
    let mut idle = short_trainer(&sim, 1);
    let row = idle.iterate(1, Phase::Pa).unwrap();
    assert!(row.policy_loss.is_nan());
}

#[test]
fn training_is_reproducible() {
    let sim = SimConfig::default();
    let run = |seed| {
        let mut t = short_trainer(&sim, seed);
        let rows = vec![t.iterate(1, Phase::Sa).unwrap(), t.iterate(1, Phase::Pa).unwrap()];
        (rows, t.policy)
    };
    let (a, pa) = run(5);
    let (b, pb) = run(5);
    assert_eq!(pa, pb);
    assert_eq!(format!("{a:?}"), format!("{b:?}"));
    let (_, pc) = run(6);
    assert_ne!(pa, pc);
}
