//! HGMARL networks: MLP blocks, per-agent parameter sets (θ_i), batched
//! forward and reverse-mode passes, PPO head loss, gradient checking and
//! checkpoints.
//!
//! An agent owns a self encoder `E`, an SA-message encoder `E^s`, optionally
//! a PA-message encoder `E^p` (SAs only), a message layer `M` and the policy
//! and value decoders. An agent's message-layer input is its own embedding
//! followed by a fixed number of inbound message slots; vacant slots are zero.

use std::path::Path;

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `in x out`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// Multi-layer perceptron: tanh on hidden layers, linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Orthogonal matrix of shape `rows x cols` scaled by `gain`.
fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut impl Rng) -> Array2<f64> {
    let (n, m) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    let mut a = Array2::from_shape_fn((n, m), |_| rng.sample::<f64, _>(StandardNormal));
    for j in 0..m {
        for p in 0..j {
            let dot = a.column(j).dot(&a.column(p));
            let prev = a.column(p).to_owned();
            a.column_mut(j).scaled_add(-dot, &prev);
        }
        let norm = a.column(j).dot(&a.column(j)).sqrt().max(1e-12);
        a.column_mut(j).mapv_inplace(|x| x / norm);
    }
    let a = if rows >= cols { a } else { a.reversed_axes().as_standard_layout().to_owned() };
    a * gain
}

impl Mlp {
    /// Orthogonal init: gain √2 on hidden layers, `out_gain` on the last.
    pub fn new(sizes: &[usize], out_gain: f64, rng: &mut impl Rng) -> Mlp {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let gain = if l + 2 == sizes.len() { out_gain } else { std::f64::consts::SQRT_2 };
                Dense { w: orthogonal(w[0], w[1], gain, rng), b: Array1::zeros(w[1]) }
            })
            .collect();
        Mlp { layers }
    }

    pub fn zeros(sizes: &[usize]) -> Mlp {
        let layers =
            sizes.windows(2).map(|w| Dense { w: Array2::zeros((w[0], w[1])), b: Array1::zeros(w[1]) }).collect();
        Mlp { layers }
    }

    pub fn zeros_like(&self) -> Mlp {
        let layers = self
            .layers
            .iter()
            .map(|l| Dense { w: Array2::zeros(l.w.raw_dim()), b: Array1::zeros(l.b.len()) })
            .collect();
        Mlp { layers }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.b.len()));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().b.len()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut h = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            h = h.dot(&layer.w) + &layer.b;
            if l + 1 < self.layers.len() {
                h.mapv_inplace(f64::tanh);
            }
        }
        h
    }

    /// Forward pass keeping every activation: `acts[0]` is the input and
    /// `acts[l + 1]` the output of layer `l`.
    pub fn forward_trace(&self, x: Array2<f64>) -> Vec<Array2<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x);
        for (l, layer) in self.layers.iter().enumerate() {
            let mut h = acts[l].dot(&layer.w) + &layer.b;
            if l + 1 < self.layers.len() {
                h.mapv_inplace(f64::tanh);
            }
            acts.push(h);
        }
        acts
    }

    /// Accumulate parameter gradients into `grad` and return the gradient
    /// with respect to the input.
    pub fn backward(&self, acts: &[Array2<f64>], dy: Array2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let mut d = dy;
        for l in (0..self.layers.len()).rev() {
            if l + 1 < self.layers.len() {
                d.zip_mut_with(&acts[l + 1], |g, y| *g *= 1.0 - y * y);
            }
            let g = &mut grad.layers[l];
            g.w += &acts[l].t().dot(&d);
            g.b += &d.sum_axis(Axis(0));
            d = d.dot(&self.layers[l].w.t());
        }
        d
    }

    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        for l in &self.layers {
            f(l.w.as_slice_memory_order().expect("contiguous weights"));
            f(l.b.as_slice_memory_order().expect("contiguous bias"));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for l in &mut self.layers {
            f(l.w.as_slice_memory_order_mut().expect("contiguous weights"));
            f(l.b.as_slice_memory_order_mut().expect("contiguous bias"));
        }
    }
}

/// Hidden sizes shared by every agent.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width k.
    pub embed: usize,
    pub encoder_hidden: Vec<usize>,
    pub message_hidden: Vec<usize>,
    pub message_out: usize,
    pub decoder_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed: 32,
            encoder_hidden: vec![64, 64],
            message_hidden: vec![128, 128],
            message_out: 64,
            decoder_hidden: vec![64, 64],
        }
    }
}

/// Shape of one agent's networks.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchSpec {
    pub obs_dim: usize,
    pub n_actions: usize,
    /// Inbound message slots after the agent's own embedding.
    pub inbound_slots: usize,
    /// Whether the agent encodes messages for PAs (`E^p`).
    pub sends_to_pa: bool,
    pub model: ModelConfig,
}

impl ArchSpec {
    pub fn message_input(&self) -> usize {
        self.model.embed * (1 + self.inbound_slots)
    }

    fn sizes(&self, input: usize, hidden: &[usize], out: usize) -> Vec<usize> {
        let mut s = vec![input];
        s.extend_from_slice(hidden);
        s.push(out);
        s
    }
}

/// Per-agent parameters θ_i.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentParams {
    pub arch: ArchSpec,
    pub enc: Mlp,
    pub enc_s: Mlp,
    pub enc_p: Option<Mlp>,
    pub msg: Mlp,
    pub pi: Mlp,
    pub value: Mlp,
}

/// Embeddings produced by one agent's encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub z: Array1<f64>,
    pub zs: Array1<f64>,
    pub zp: Option<Array1<f64>>,
}

impl AgentParams {
    pub fn new(arch: ArchSpec, rng: &mut impl Rng) -> AgentParams {
        let m = &arch.model;
        let enc_sizes = arch.sizes(arch.obs_dim, &m.encoder_hidden, m.embed);
        let enc = Mlp::new(&enc_sizes, 1.0, rng);
        let enc_s = Mlp::new(&enc_sizes, 1.0, rng);
        let enc_p = arch.sends_to_pa.then(|| Mlp::new(&enc_sizes, 1.0, rng));
        let msg = Mlp::new(&arch.sizes(arch.message_input(), &m.message_hidden, m.message_out), 1.0, rng);
        let pi = Mlp::new(&arch.sizes(m.message_out, &m.decoder_hidden, arch.n_actions), 0.01, rng);
        let value = Mlp::new(&arch.sizes(m.message_out, &m.decoder_hidden, 1), 1.0, rng);
        AgentParams { arch, enc, enc_s, enc_p, msg, pi, value }
    }

    pub fn zeros_like(&self) -> AgentParams {
        AgentParams {
            arch: self.arch.clone(),
            enc: self.enc.zeros_like(),
            enc_s: self.enc_s.zeros_like(),
            enc_p: self.enc_p.as_ref().map(Mlp::zeros_like),
            msg: self.msg.zeros_like(),
            pi: self.pi.zeros_like(),
            value: self.value.zeros_like(),
        }
    }

    fn mlps(&self) -> Vec<&Mlp> {
        let mut v = vec![&self.enc, &self.enc_s];
        v.extend(self.enc_p.as_ref());
        v.extend([&self.msg, &self.pi, &self.value]);
        v
    }

    fn mlps_mut(&mut self) -> Vec<&mut Mlp> {
        let mut v = vec![&mut self.enc, &mut self.enc_s];
        v.extend(self.enc_p.as_mut());
        v.extend([&mut self.msg, &mut self.pi, &mut self.value]);
        v
    }

    /// Number of parameter tensors (weights and biases).
    pub fn tensor_count(&self) -> usize {
        self.mlps().iter().map(|m| 2 * m.layers.len()).sum()
    }

    /// Tensor lengths in flatten order.
    pub fn tensor_sizes(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for m in self.mlps() {
            m.visit(&mut |s| out.push(s.len()));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensor_sizes().iter().sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for m in self.mlps() {
            m.visit(&mut |s| out.extend_from_slice(s));
        }
        out
    }

    pub fn assign(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for m in self.mlps_mut() {
            m.visit_mut(&mut |s| {
                s.copy_from_slice(&flat[offset..offset + s.len()]);
                offset += s.len();
            });
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    pub fn all_finite(&self) -> bool {
        self.flatten().iter().all(|x| x.is_finite())
    }

    /// Eqs. 8-10 on one observation.
    pub fn encode(&self, obs: &[f64]) -> Embeddings {
        let x = ArrayView2::from_shape((1, obs.len()), obs).expect("observation row");
        let row = |m: &Mlp| m.forward(x).row(0).to_owned();
        Embeddings { z: row(&self.enc), zs: row(&self.enc_s), zp: self.enc_p.as_ref().map(row) }
    }

    /// Eqs. 14-15: `h = M([z; inbound slots])`, vacancies zero-padded.
    pub fn message(&self, z: &Array1<f64>, inbound: &[Option<Array1<f64>>]) -> Array1<f64> {
        assert_eq!(inbound.len(), self.arch.inbound_slots, "inbound slot count");
        let k = self.arch.model.embed;
        let mut x = Vec::with_capacity(self.arch.message_input());
        x.extend(z.iter());
        for slot in inbound {
            match slot {
                Some(m) => x.extend(m.iter()),
                None => x.extend(std::iter::repeat_n(0.0, k)),
            }
        }
        let x = Array2::from_shape_vec((1, x.len()), x).unwrap();
        self.msg.forward(x.view()).row(0).to_owned()
    }

    /// Eqs. 16-17: masked policy and value.
    pub fn decode(&self, h: &Array1<f64>, mask: &[bool]) -> (Vec<f64>, f64) {
        let x = h.view().insert_axis(Axis(0));
        let logits = self.pi.forward(x);
        let value = self.value.forward(x)[[0, 0]];
        (masked_softmax(logits.row(0).as_slice().unwrap(), mask), value)
    }

    /// Message layer and both decoders on a batch of message inputs.
    pub fn top_forward(&self, x: Array2<f64>) -> TopTrace {
        let msg = self.msg.forward_trace(x);
        let h = msg.last().unwrap().clone();
        let pi = self.pi.forward_trace(h.clone());
        let value = self.value.forward_trace(h);
        TopTrace { msg, pi, value }
    }

    /// Backward through decoders and message layer; returns d loss / d input.
    pub fn top_backward(&self, trace: &TopTrace, dlogits: Array2<f64>, dvalues: &Array1<f64>, grad: &mut AgentParams) -> Array2<f64> {
        let dv = dvalues.clone().insert_axis(Axis(1));
        let mut dh = self.pi.backward(&trace.pi, dlogits, &mut grad.pi);
        dh += &self.value.backward(&trace.value, dv, &mut grad.value);
        self.msg.backward(&trace.msg, dh, &mut grad.msg)
    }

    /// Hash of the architecture, used to validate checkpoints.
    pub fn arch_hash(&self) -> String {
        arch_hash_of([&self.arch])
    }
}

pub fn arch_hash_of<'a>(archs: impl IntoIterator<Item = &'a ArchSpec>) -> String {
    let all: Vec<&ArchSpec> = archs.into_iter().collect();
    let json = serde_json::to_vec(&all).expect("serializable arch");
    crate::net::hex(&Sha256::digest(json))
}

/// Cached activations of the message layer and decoders.
#[derive(Debug, Clone)]
pub struct TopTrace {
    pub msg: Vec<Array2<f64>>,
    pub pi: Vec<Array2<f64>>,
    pub value: Vec<Array2<f64>>,
}

impl TopTrace {
    pub fn logits(&self) -> &Array2<f64> {
        self.pi.last().unwrap()
    }

    pub fn values(&self) -> Array1<f64> {
        self.value.last().unwrap().column(0).to_owned()
    }
}

/// Softmax over unmasked entries; masked entries get exactly zero.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    let max = logits.iter().zip(mask).filter(|(_, m)| **m).map(|(l, _)| *l).fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> =
        logits.iter().zip(mask).map(|(l, m)| if *m { (l - max).exp() } else { 0.0 }).collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= total);
    p
}

/// Concatenate blocks column-wise.
pub fn hcat(blocks: &[ArrayView2<f64>]) -> Array2<f64> {
    concatenate(Axis(1), blocks).expect("matching row counts")
}

/// Coefficients of the PPO loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoCoefs {
    pub clip: f64,
    pub entropy: f64,
    pub value: f64,
}

/// Per-sample inputs of the PPO head loss.
#[derive(Debug, Clone)]
pub struct HeadBatch<'a> {
    pub masks: &'a [Vec<bool>],
    pub actions: &'a [usize],
    pub logp_old: &'a [f64],
    pub advantages: &'a [f64],
    pub targets: &'a [f64],
}

/// Mean loss components of one head evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    /// Clipped surrogate J (to be maximized).
    pub objective: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// `-(J + c_H H) + c_V L`
    pub total: f64,
}

/// PPO loss on a batch of logits and values, with gradients.
///
/// Returns the mean loss parts and `(d total / d logits, d total / d values)`.
pub fn ppo_head_loss(
    logits: &Array2<f64>,
    values: &Array1<f64>,
    batch: &HeadBatch<'_>,
    coefs: PpoCoefs,
) -> (LossParts, Array2<f64>, Array1<f64>) {
    let n = logits.nrows();
    let inv = 1.0 / n.max(1) as f64;
    let mut parts = LossParts::default();
    let mut dlogits = Array2::zeros(logits.raw_dim());
    let mut dvalues = Array1::zeros(n);
    for b in 0..n {
        let row = logits.row(b);
        let p = masked_softmax(row.as_slice().expect("row-major logits"), &batch.masks[b]);
        let a = batch.actions[b];
        let logp = p[a].ln();
        let ratio = (logp - batch.logp_old[b]).exp();
        let adv = batch.advantages[b];
        let clipped = ratio.clamp(1.0 - coefs.clip, 1.0 + coefs.clip);
        let (obj, dobj_dlogp) = if ratio * adv <= clipped * adv { (ratio * adv, ratio * adv) } else { (clipped * adv, 0.0) };
        let entropy: f64 = -p.iter().filter(|x| **x > 0.0).map(|x| x * x.ln()).sum::<f64>();
        let err = values[b] - batch.targets[b];
        parts.objective += obj * inv;
        parts.entropy += entropy * inv;
        parts.value_loss += err * err * inv;
        for j in 0..p.len() {
            if !batch.masks[b][j] {
                continue;
            }
            let onehot = if j == a { 1.0 } else { 0.0 };
            let dlogp = onehot - p[j];
            let dent = if p[j] > 0.0 { -p[j] * (p[j].ln() + entropy) } else { 0.0 };
            dlogits[[b, j]] = -inv * (dobj_dlogp * dlogp + coefs.entropy * dent);
        }
        dvalues[b] = coefs.value * 2.0 * err * inv;
    }
    parts.total = -(parts.objective + coefs.entropy * parts.entropy) + coefs.value * parts.value_loss;
    (parts, dlogits, dvalues)
}

/// Central-difference gradient check.
///
/// Perturbs up to `samples` randomly chosen coordinates of `params` by `±h`
/// and returns the largest relative error against `analytic`, measured as
/// `|a - n| / max(1e-4, |a| + |n|)`.
pub fn grad_check(
    params: &[f64],
    analytic: &[f64],
    mut loss: impl FnMut(&[f64]) -> f64,
    h: f64,
    samples: usize,
    rng: &mut impl Rng,
) -> f64 {
    assert_eq!(params.len(), analytic.len());
    let picks: Vec<usize> = if samples >= params.len() {
        (0..params.len()).collect()
    } else {
        rand::seq::index::sample(rng, params.len(), samples).into_vec()
    };
    let mut x = params.to_vec();
    let mut worst = 0.0f64;
    for i in picks {
        let orig = x[i];
        x[i] = orig + h;
        let up = loss(&x);
        x[i] = orig - h;
        let down = loss(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-4);
        worst = worst.max(rel);
    }
    worst
}

pub const CHECKPOINT_FORMAT: &str = "cosignal-checkpoint-v1";

/// Saved parameters of every agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub arch_hash: String,
    pub network_hash: String,
    pub config_hash: String,
    pub sa: Vec<AgentParams>,
    pub pa: AgentParams,
    /// Free-form run metadata (cycle, iteration, seed).
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_vec(self).map_err(|e| Error::Config(format!("checkpoint encode: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::CheckpointMismatch(format!("unknown checkpoint format {:?}", ckpt.format)));
        }
        let recomputed = arch_hash_of(ckpt.sa.iter().map(|p| &p.arch).chain([&ckpt.pa.arch]));
        if recomputed != ckpt.arch_hash {
            return Err(Error::CheckpointMismatch("stored parameters do not match the recorded architecture hash".into()));
        }
        Ok(ckpt)
    }

    /// Reject a checkpoint built for another architecture or network.
    pub fn check_compatible(&self, arch_hash: &str, network_hash: &str) -> Result<()> {
        if self.arch_hash != arch_hash {
            return Err(Error::CheckpointMismatch(format!(
                "architecture hash {} does not match expected {}",
                short(&self.arch_hash),
                short(arch_hash)
            )));
        }
        if self.network_hash != network_hash {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint trained on network {} but this run uses {}",
                short(&self.network_hash),
                short(network_hash)
            )));
        }
        Ok(())
    }
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}
