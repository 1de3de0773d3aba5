//! Actor-critic policy: two ReLU trunks (actor and critic) over the 20-d
//! observation, a diagonal Gaussian motor-command head with a
//! state-independent log-std, and analytic gradients of the PPO loss.
//!
//! Flat parameter order (also the checkpoint blob order):
//! actor layers (`weight[out, in]`, `bias[out]`) input to output,
//! `log_std[act_dim]`, then critic layers input to output.

use std::f64::consts::PI;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::MotorCommand;
use crate::env::{Observation, ACT_DIM, OBS_DIM};
use crate::nn::{chain_layout, mlp_backward, mlp_forward, Dense, Scalar};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
pub const CHECKPOINT_FORMAT: &str = "quadrace-policy-v1";

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub obs_dim: usize,
    pub hidden: Vec<usize>,
    pub act_dim: usize,
}

impl Default for PolicyShape {
    fn default() -> Self {
        Self {
            obs_dim: OBS_DIM,
            hidden: vec![64, 64, 64],
            act_dim: ACT_DIM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    actor: Vec<Dense>,
    log_std: usize,
    critic: Vec<Dense>,
    len: usize,
}

impl Layout {
    fn new(shape: &PolicyShape) -> Self {
        let sizes = |out: usize| {
            let mut v = vec![shape.obs_dim];
            v.extend(&shape.hidden);
            v.push(out);
            v
        };
        let actor = chain_layout(&sizes(shape.act_dim), 0);
        let log_std = actor.last().map_or(0, Dense::end);
        let critic = chain_layout(&sizes(1), log_std + shape.act_dim);
        let len = critic.last().map_or(0, Dense::end);
        Self {
            actor,
            log_std,
            critic,
            len,
        }
    }

    fn tensors(&self) -> Vec<TensorEntry> {
        let mut out = Vec::new();
        let dense = |prefix: &str, layers: &[Dense], out: &mut Vec<TensorEntry>| {
            for (i, d) in layers.iter().enumerate() {
                out.push(TensorEntry {
                    name: format!("{prefix}.{i}.weight"),
                    shape: vec![d.output, d.input],
                    offset: d.weight,
                });
                out.push(TensorEntry {
                    name: format!("{prefix}.{i}.bias"),
                    shape: vec![d.output],
                    offset: d.bias,
                });
            }
        };
        dense("actor", &self.actor, &mut out);
        out.push(TensorEntry {
            name: "log_std".into(),
            shape: vec![self.critic[0].weight - self.log_std],
            offset: self.log_std,
        });
        dense("critic", &self.critic, &mut out);
        out
    }
}

/// Actor-critic parameters in one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams<T> {
    shape: PolicyShape,
    layout: Layout,
    data: Vec<T>,
}

/// Batched forward output.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    /// `[batch, act_dim]` Gaussian means (pre-clipping).
    pub mean: Vec<T>,
    /// `[batch]` state values.
    pub value: Vec<T>,
}

/// Coefficients of the PPO objective
/// `policy_coef * L_clip + value_coef * L_value - entropy_coef * H`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoLossSpec {
    pub clip_range: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub policy_coef: f64,
}

impl Default for PpoLossSpec {
    fn default() -> Self {
        Self {
            clip_range: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.0,
            policy_coef: 1.0,
        }
    }
}

/// Training samples for one gradient step.
#[derive(Debug, Clone, Copy)]
pub struct Minibatch<'a, T> {
    /// `[batch, obs_dim]`
    pub obs: &'a [T],
    /// `[batch, act_dim]` unclipped actions from the behavior policy.
    pub actions: &'a [T],
    pub old_log_prob: &'a [T],
    pub advantages: &'a [T],
    pub returns: &'a [T],
}

impl<T> Minibatch<'_, T> {
    pub fn len(&self) -> usize {
        self.returns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.returns.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossStats {
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

/// Diagonal Gaussian log-density.
pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((&m, &ls), &a)| {
            let z = (a - m) * (-ls).exp();
            -0.5 * z * z - ls - 0.5 * LN_2PI
        })
        .sum()
}

/// Entropy of a diagonal Gaussian.
pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|ls| ls + 0.5 * (1.0 + LN_2PI)).sum()
}

/// Orthogonal matrix `[rows, cols]` scaled by `gain`: orthonormal rows when
/// `rows <= cols`, orthonormal columns otherwise.
fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> DMatrix<f64> {
    let (r, c) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    let g = DMatrix::<f64>::from_fn(r, c, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let rr = qr.r();
    for j in 0..c {
        if rr[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let q = if rows >= cols { q } else { q.transpose() };
    q * gain
}

impl<T: Scalar> PolicyParams<T> {
    pub fn zeros(shape: PolicyShape) -> Self {
        let layout = Layout::new(&shape);
        let data = vec![T::zero(); layout.len];
        Self {
            shape,
            layout,
            data,
        }
    }

    /// Orthogonal weights (gain `sqrt 2` hidden, 0.01 action mean, 1 value),
    /// zero biases, zero log-std.
    pub fn init<R: Rng + ?Sized>(shape: PolicyShape, rng: &mut R) -> Self {
        let mut p = Self::zeros(shape);
        let hidden_gain = 2f64.sqrt();
        let actor = p.layout.actor.clone();
        let critic = p.layout.critic.clone();
        for (layers, out_gain) in [(actor, 0.01), (critic, 1.0)] {
            let n = layers.len();
            for (i, d) in layers.iter().enumerate() {
                let gain = if i + 1 == n { out_gain } else { hidden_gain };
                let w = orthogonal(d.output, d.input, gain, rng);
                for o in 0..d.output {
                    for k in 0..d.input {
                        p.data[d.weight + o * d.input + k] = T::from_f64_lossy(w[(o, k)]);
                    }
                }
            }
        }
        p
    }

    pub fn shape(&self) -> &PolicyShape {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn actor_layers(&self) -> &[Dense] {
        &self.layout.actor
    }

    pub fn critic_layers(&self) -> &[Dense] {
        &self.layout.critic
    }

    pub fn log_std(&self) -> &[T] {
        &self.data[self.layout.log_std..self.layout.log_std + self.shape.act_dim]
    }

    pub fn log_std_mut(&mut self) -> &mut [T] {
        let s = self.layout.log_std;
        &mut self.data[s..s + self.shape.act_dim]
    }

    pub fn clamp_log_std(&mut self) {
        let lo = T::from_f64_lossy(LOG_STD_MIN);
        let hi = T::from_f64_lossy(LOG_STD_MAX);
        for x in self.log_std_mut() {
            *x = x.max(lo).min(hi);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Converts every parameter to another precision.
    pub fn cast<U: Scalar>(&self) -> PolicyParams<U> {
        PolicyParams {
            shape: self.shape.clone(),
            layout: self.layout.clone(),
            data: self.data.iter().map(|x| U::from_f64_lossy(x.as_f64())).collect(),
        }
    }

    pub fn forward_batch(&self, obs: &[T], batch: usize) -> ForwardOutput<T> {
        assert_eq!(obs.len(), batch * self.shape.obs_dim, "observation batch shape");
        let mut acts = vec![obs.to_vec()];
        mlp_forward(&self.data, &self.layout.actor, batch, &mut acts);
        let mean = acts.pop().expect("actor output");
        acts.truncate(1);
        mlp_forward(&self.data, &self.layout.critic, batch, &mut acts);
        let value = acts.pop().expect("critic output");
        ForwardOutput { mean, value }
    }

    /// Action mean and state value for one observation.
    pub fn forward(&self, obs: &Observation) -> ([f64; ACT_DIM], f64) {
        let x: Vec<T> = obs.0.iter().map(|&v| T::from_f64_lossy(v)).collect();
        let out = self.forward_batch(&x, 1);
        let mut mean = [0.0; ACT_DIM];
        for (m, v) in mean.iter_mut().zip(&out.mean) {
            *m = v.as_f64();
        }
        (mean, out.value[0].as_f64())
    }

    /// Clipped action mean: the deterministic controller.
    pub fn act_deterministic(&self, obs: &Observation) -> MotorCommand {
        MotorCommand::clipped(self.forward(obs).0)
    }

    /// Samples `N(mean, exp(log_std))`, returns the clipped command, the raw
    /// sample and its log-density.
    pub fn sample_action<R: Rng + ?Sized>(
        &self,
        obs: &Observation,
        rng: &mut R,
    ) -> (MotorCommand, [f64; ACT_DIM], f64) {
        let (mean, _) = self.forward(obs);
        let log_std: Vec<f64> = self.log_std().iter().map(|x| x.as_f64()).collect();
        let mut raw = [0.0; ACT_DIM];
        for i in 0..ACT_DIM {
            let eps: f64 = rng.sample(StandardNormal);
            raw[i] = mean[i] + log_std[i].exp() * eps;
        }
        let lp = gaussian_log_prob(&mean, &log_std, &raw);
        (MotorCommand::clipped(raw), raw, lp)
    }

    /// Log-density of stored unclipped actions and the policy entropy.
    pub fn log_prob_and_entropy(&self, obs: &Observation, action_unclipped: &[f64; ACT_DIM]) -> (f64, f64) {
        let (mean, _) = self.forward(obs);
        let log_std: Vec<f64> = self.log_std().iter().map(|x| x.as_f64()).collect();
        (
            gaussian_log_prob(&mean, &log_std, action_unclipped),
            gaussian_entropy(&log_std),
        )
    }

    /// Evaluates the PPO loss on a minibatch without gradients.
    pub fn ppo_loss(&self, mb: &Minibatch<T>, spec: &PpoLossSpec) -> LossStats {
        self.ppo_loss_impl(mb, spec, None)
    }

    /// PPO loss with gradients accumulated into `grad` (same layout as the
    /// parameters; the caller zeroes it).
    pub fn ppo_loss_and_grad(&self, mb: &Minibatch<T>, spec: &PpoLossSpec, grad: &mut [T]) -> LossStats {
        assert_eq!(grad.len(), self.data.len());
        self.ppo_loss_impl(mb, spec, Some(grad))
    }

    fn ppo_loss_impl(&self, mb: &Minibatch<T>, spec: &PpoLossSpec, grad: Option<&mut [T]>) -> LossStats {
        let batch = mb.len();
        let ad = self.shape.act_dim;
        assert_eq!(mb.obs.len(), batch * self.shape.obs_dim);
        assert_eq!(mb.actions.len(), batch * ad);
        assert_eq!(mb.old_log_prob.len(), batch);
        assert_eq!(mb.advantages.len(), batch);
        if batch == 0 {
            return LossStats::default();
        }
        let inv_n = 1.0 / batch as f64;

        let mut actor_acts = vec![mb.obs.to_vec()];
        mlp_forward(&self.data, &self.layout.actor, batch, &mut actor_acts);
        let mut critic_acts = vec![mb.obs.to_vec()];
        mlp_forward(&self.data, &self.layout.critic, batch, &mut critic_acts);
        let mean = actor_acts.last().expect("actor output");
        let value = critic_acts.last().expect("critic output");

        let log_std: Vec<f64> = self.log_std().iter().map(|x| x.as_f64()).collect();
        let inv_var: Vec<f64> = log_std.iter().map(|ls| (-2.0 * ls).exp()).collect();
        let eps = spec.clip_range;

        let mut d_mean = vec![T::zero(); batch * ad];
        let mut d_log_std = vec![0.0; ad];
        let mut d_value = vec![T::zero(); batch];
        let mut stats = LossStats::default();
        let mut clipped = 0usize;

        for i in 0..batch {
            let m: Vec<f64> = mean[i * ad..(i + 1) * ad].iter().map(|x| x.as_f64()).collect();
            let a: Vec<f64> = mb.actions[i * ad..(i + 1) * ad].iter().map(|x| x.as_f64()).collect();
            let lp = gaussian_log_prob(&m, &log_std, &a);
            let log_ratio = lp - mb.old_log_prob[i].as_f64();
            let ratio = log_ratio.exp();
            let adv = mb.advantages[i].as_f64();
            let surr1 = ratio * adv;
            let surr2 = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
            stats.policy_loss -= surr1.min(surr2) * inv_n;
            if (ratio - 1.0).abs() > eps {
                clipped += 1;
            }
            stats.approx_kl += ((ratio - 1.0) - log_ratio) * inv_n;
            // gradient flows only through the unclipped branch when it is the minimum
            let d_lp = if surr1 <= surr2 {
                -spec.policy_coef * surr1 * inv_n
            } else {
                0.0
            };
            if d_lp != 0.0 {
                for j in 0..ad {
                    let diff = a[j] - m[j];
                    d_mean[i * ad + j] = T::from_f64_lossy(d_lp * diff * inv_var[j]);
                    d_log_std[j] += d_lp * (diff * diff * inv_var[j] - 1.0);
                }
            }
            let v = value[i].as_f64();
            let err = v - mb.returns[i].as_f64();
            stats.value_loss += err * err * inv_n;
            d_value[i] = T::from_f64_lossy(2.0 * spec.value_coef * err * inv_n);
        }
        stats.entropy = gaussian_entropy(&log_std);
        stats.clip_fraction = clipped as f64 * inv_n;
        stats.loss = spec.policy_coef * stats.policy_loss + spec.value_coef * stats.value_loss
            - spec.entropy_coef * stats.entropy;

        if let Some(grad) = grad {
            mlp_backward(&self.data, &self.layout.actor, batch, &actor_acts, d_mean, grad);
            mlp_backward(&self.data, &self.layout.critic, batch, &critic_acts, d_value, grad);
            let s = self.layout.log_std;
            for j in 0..ad {
                grad[s + j] = grad[s + j] + T::from_f64_lossy(d_log_std[j] - spec.entropy_coef);
            }
        }
        stats
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// JSON side of a checkpoint; parameters live in the `blob` file as
/// little-endian `f32` in flat parameter order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub dtype: String,
    pub shape: PolicyShape,
    pub param_count: usize,
    pub tensors: Vec<TensorEntry>,
    pub blob: String,
    #[serde(default)]
    pub training_step: u64,
    #[serde(default)]
    pub hyperparameters: serde_json::Value,
}

impl PolicyParams<f32> {
    /// Writes `<stem>.json` and `<stem>.bin` into `dir`; returns the manifest path.
    pub fn save(
        &self,
        dir: impl AsRef<Path>,
        stem: &str,
        training_step: u64,
        hyperparameters: serde_json::Value,
    ) -> Result<PathBuf, PolicyError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let blob_name = format!("{stem}.bin");
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for x in &self.data {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        fs::write(dir.join(&blob_name), bytes)?;
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            dtype: "f32le".into(),
            shape: self.shape.clone(),
            param_count: self.data.len(),
            tensors: self.layout.tensors(),
            blob: blob_name,
            training_step,
            hyperparameters,
        };
        let path = dir.join(format!("{stem}.json"));
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(path)
    }

    /// Loads a checkpoint from its JSON manifest.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<(Self, CheckpointManifest), PolicyError> {
        let manifest_path = manifest_path.as_ref();
        let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
        let corrupt = |m: String| Err(PolicyError::CorruptCheckpoint(m));
        if manifest.format != CHECKPOINT_FORMAT || manifest.dtype != "f32le" {
            return corrupt(format!("unsupported format {} / {}", manifest.format, manifest.dtype));
        }
        let mut p = Self::zeros(manifest.shape.clone());
        if manifest.param_count != p.len() {
            return corrupt(format!(
                "param_count {} does not match shape ({} expected)",
                manifest.param_count,
                p.len()
            ));
        }
        if manifest.tensors != p.layout.tensors() {
            return corrupt("tensor table does not match the declared shape".into());
        }
        let blob_path = manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&manifest.blob);
        let bytes = fs::read(&blob_path)?;
        if bytes.len() != 4 * p.len() {
            return corrupt(format!(
                "blob has {} bytes, expected {}",
                bytes.len(),
                4 * p.len()
            ));
        }
        for (x, chunk) in p.data.iter_mut().zip(bytes.chunks_exact(4)) {
            *x = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        }
        if !p.is_finite() {
            return corrupt("non-finite parameter".into());
        }
        Ok((p, manifest))
    }
}

/// `log_prob` of the mode of a 4-d Gaussian.
pub fn log_prob_at_mean(log_std: &[f64]) -> f64 {
    -log_std.iter().sum::<f64>() - 0.5 * log_std.len() as f64 * (2.0 * PI).ln()
}
