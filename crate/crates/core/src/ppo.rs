//! PPO trainer: on-policy rollouts over a [`VecEnv`], GAE, clipped
//! surrogate updates with Adam, and the outer training loop.

use std::collections::VecDeque;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::MotorCommand;
use crate::env::{EnvError, EpisodeSummary, Observation, VecEnv, ACT_DIM, OBS_DIM};
use crate::policy::{gaussian_log_prob, LossStats, Minibatch, PolicyError, PolicyParams, PolicyShape, PpoLossSpec};

#[derive(Debug, thiserror::Error)]
pub enum PpoError {
    #[error("invalid PPO config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss or gradient during update {update}")]
    NonFiniteLoss { update: usize },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub n_envs: usize,
    pub gamma: f64,
    pub total_steps: u64,
    pub rollout_length: usize,
    pub minibatch_size: usize,
    pub epochs_per_update: usize,
    pub clip_range: f64,
    pub gae_lambda: f64,
    pub learning_rate: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    /// Initial value of every action log-std.
    pub log_std_init: f64,
    /// Save a numbered checkpoint every this many updates (0 = final only).
    pub checkpoint_every: usize,
    /// Step environments on the rayon pool.
    pub parallel: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            n_envs: 100,
            gamma: 0.999,
            total_steps: 100_000_000,
            rollout_length: 512,
            minibatch_size: 6400,
            epochs_per_update: 10,
            clip_range: 0.2,
            gae_lambda: 0.95,
            learning_rate: 3e-4,
            value_coef: 0.5,
            entropy_coef: 0.0,
            max_grad_norm: 0.5,
            seed: 0,
            hidden: vec![64, 64, 64],
            log_std_init: 0.0,
            checkpoint_every: 0,
            parallel: true,
        }
    }
}

impl PpoConfig {
    /// 2M-step budget with short rollouts, so it gets 400 updates, and a
    /// shorter discount horizon, which learns much faster at this scale.
    pub fn desk() -> Self {
        Self {
            total_steps: 2_000_000,
            rollout_length: 50,
            minibatch_size: 1250,
            gamma: 0.99,
            ..Self::default()
        }
    }

    pub fn steps_per_update(&self) -> usize {
        self.rollout_length * self.n_envs
    }

    pub fn n_updates(&self) -> usize {
        (self.total_steps / self.steps_per_update().max(1) as u64) as usize
    }

    pub fn loss_spec(&self) -> PpoLossSpec {
        PpoLossSpec {
            clip_range: self.clip_range,
            value_coef: self.value_coef,
            entropy_coef: self.entropy_coef,
            policy_coef: 1.0,
        }
    }

    pub fn policy_shape(&self) -> PolicyShape {
        PolicyShape {
            hidden: self.hidden.clone(),
            ..PolicyShape::default()
        }
    }

    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |m: &str| Err(PpoError::InvalidConfig(m.into()));
        if self.n_envs == 0 || self.rollout_length == 0 || self.minibatch_size == 0 {
            return bad("n_envs, rollout_length and minibatch_size must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(self.gae_lambda >= 0.0 && self.gae_lambda <= 1.0) {
            return bad("gae_lambda must lie in [0, 1]");
        }
        if !(self.clip_range > 0.0) {
            return bad("clip_range must be > 0");
        }
        if self.steps_per_update() % self.minibatch_size != 0 {
            return bad("rollout_length * n_envs must be divisible by minibatch_size");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("max_grad_norm must be > 0");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layer widths must be positive");
        }
        Ok(())
    }
}

/// One on-policy segment, stored time-major: index `t * n_envs + e`.
#[derive(Debug, Clone, Default)]
pub struct RolloutBatch {
    pub n_envs: usize,
    pub rollout_length: usize,
    pub obs: Vec<f32>,
    /// Unclipped Gaussian samples.
    pub actions: Vec<f32>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub dones: Vec<bool>,
    /// `V(terminal observation)` for time-limit truncations, 0 otherwise.
    pub truncation_values: Vec<f64>,
    /// Values of the observations following the last step.
    pub last_values: Vec<f64>,
    pub episodes: Vec<EpisodeSummary>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Generalized advantage estimation over a time-major batch.
///
/// `delta_t = r_t + gamma ((1 - done_t) V_{t+1} + B_t) - V_t` where `B_t` is
/// the truncation bootstrap; `A_t = delta_t + gamma lambda (1 - done_t) A_{t+1}`.
/// Returns `(advantages, returns)` with `returns = A + V`.
pub fn compute_gae(batch: &RolloutBatch, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    gae(
        &batch.rewards,
        &batch.values,
        &batch.dones,
        &batch.truncation_values,
        &batch.last_values,
        batch.n_envs,
        gamma,
        lambda,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    truncation_values: &[f64],
    last_values: &[f64],
    n_envs: usize,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(n_envs > 0 && n % n_envs == 0, "rectangular batch");
    assert_eq!(values.len(), n);
    assert_eq!(dones.len(), n);
    assert_eq!(truncation_values.len(), n);
    assert_eq!(last_values.len(), n_envs);
    let steps = n / n_envs;
    let mut adv = vec![0.0; n];
    for e in 0..n_envs {
        let mut next_adv = 0.0;
        let mut next_value = last_values[e];
        for t in (0..steps).rev() {
            let i = t * n_envs + e;
            let live = if dones[i] { 0.0 } else { 1.0 };
            let delta = rewards[i] + gamma * (live * next_value + truncation_values[i]) - values[i];
            next_adv = delta + gamma * lambda * live * next_adv;
            adv[i] = next_adv;
            next_value = values[i];
        }
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// `(x - mean) / (std + 1e-8)` with the population standard deviation.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a = (*a - mean) / (std + 1e-8);
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] = (params[i] as f64 - self.lr * m_hat / (v_hat.sqrt() + self.eps)) as f32;
        }
    }
}

/// Scales `grad` so its L2 norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        for g in grad.iter_mut() {
            *g *= s;
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub grad_norm: f64,
}

fn obs_to_f32(o: &Observation, out: &mut Vec<f32>) {
    out.extend(o.0.iter().map(|&x| x as f32));
}

/// Samples one Gaussian action per row of `mean` (row-major `[n, 4]`).
fn sample_actions<R: Rng>(mean: &[f32], log_std: &[f32], rng: &mut R) -> (Vec<f32>, Vec<f64>) {
    let ls: Vec<f64> = log_std.iter().map(|&x| x as f64).collect();
    let mut raw = Vec::with_capacity(mean.len());
    let mut lps = Vec::with_capacity(mean.len() / ACT_DIM);
    for row in mean.chunks_exact(ACT_DIM) {
        let m: Vec<f64> = row.iter().map(|&x| x as f64).collect();
        let a: Vec<f64> = (0..ACT_DIM)
            .map(|j| {
                let eps: f64 = rng.sample(StandardNormal);
                (m[j] + ls[j].exp() * eps) as f32 as f64
            })
            .collect();
        lps.push(gaussian_log_prob(&m, &ls, &a));
        raw.extend(a.iter().map(|&x| x as f32));
    }
    (raw, lps)
}

/// Runs `rollout_length` lockstep steps of every environment with actions
/// sampled from `policy`.
pub fn collect_rollouts<R: Rng>(
    policy: &PolicyParams<f32>,
    envs: &mut VecEnv,
    rollout_length: usize,
    rng: &mut R,
) -> Result<RolloutBatch, PpoError> {
    let n = envs.len();
    let mut b = RolloutBatch {
        n_envs: n,
        rollout_length,
        ..RolloutBatch::default()
    };
    let total = n * rollout_length;
    b.obs.reserve(total * OBS_DIM);
    b.actions.reserve(total * ACT_DIM);
    let mut current: Vec<f32> = Vec::with_capacity(n * OBS_DIM);
    for o in envs.observations() {
        obs_to_f32(&o, &mut current);
    }
    for _ in 0..rollout_length {
        let out = policy.forward_batch(&current, n);
        let (raw, lps) = sample_actions(&out.mean, policy.log_std(), rng);
        let cmds: Vec<MotorCommand> = raw
            .chunks_exact(ACT_DIM)
            .map(|a| MotorCommand::clipped([a[0] as f64, a[1] as f64, a[2] as f64, a[3] as f64]))
            .collect();
        let results = envs.step(&cmds)?;
        b.obs.extend_from_slice(&current);
        b.actions.extend_from_slice(&raw);
        b.values.extend(out.value.iter().map(|&v| v as f64));
        b.log_probs.extend(lps);
        current.clear();
        let mut truncated_obs: Vec<(usize, Observation)> = Vec::new();
        for (e, r) in results.into_iter().enumerate() {
            let r = r?;
            b.rewards.push(r.reward);
            b.dones.push(r.done);
            b.truncation_values.push(0.0);
            if r.info.truncated {
                if let Some(t) = r.info.terminal_observation {
                    truncated_obs.push((e, t));
                }
            }
            if let Some(ep) = r.info.episode {
                b.episodes.push(ep);
            }
            obs_to_f32(&r.observation, &mut current);
        }
        if !truncated_obs.is_empty() {
            let mut x = Vec::with_capacity(truncated_obs.len() * OBS_DIM);
            for (_, o) in &truncated_obs {
                obs_to_f32(o, &mut x);
            }
            let v = policy.forward_batch(&x, truncated_obs.len()).value;
            let base = b.truncation_values.len() - n;
            for ((e, _), v) in truncated_obs.iter().zip(v) {
                b.truncation_values[base + e] = v as f64;
            }
        }
    }
    b.last_values = policy
        .forward_batch(&current, n)
        .value
        .iter()
        .map(|&v| v as f64)
        .collect();
    Ok(b)
}

/// Optimizer state carried between updates.
#[derive(Debug, Clone)]
pub struct Learner {
    pub policy: PolicyParams<f32>,
    pub adam: Adam,
}

impl Learner {
    pub fn new(policy: PolicyParams<f32>, lr: f64) -> Self {
        let n = policy.len();
        Self {
            policy,
            adam: Adam::new(n, lr),
        }
    }

    /// `epochs` passes of shuffled minibatches over `batch`. On a non-finite
    /// loss or gradient the parameters and optimizer state are restored and
    /// `NonFiniteLoss` is returned.
    pub fn update<R: Rng>(
        &mut self,
        batch: &RolloutBatch,
        config: &PpoConfig,
        update_index: usize,
        rng: &mut R,
    ) -> Result<UpdateStats, PpoError> {
        let (mut adv, returns) = compute_gae(batch, config.gamma, config.gae_lambda);
        normalize_advantages(&mut adv);
        let adv: Vec<f32> = adv.iter().map(|&a| a as f32).collect();
        let returns: Vec<f32> = returns.iter().map(|&r| r as f32).collect();
        let old_lp: Vec<f32> = batch.log_probs.iter().map(|&x| x as f32).collect();

        let saved = self.clone();
        let spec = config.loss_spec();
        let n = batch.len();
        let mb = config.minibatch_size.min(n);
        let mut idx: Vec<usize> = (0..n).collect();
        let mut acc = UpdateStats::default();
        let mut count = 0usize;
        let mut grad32 = vec![0f32; self.policy.len()];
        let (mut o, mut a, mut l, mut ad, mut rt) = (vec![], vec![], vec![], vec![], vec![]);
        for _ in 0..config.epochs_per_update {
            idx.shuffle(rng);
            for chunk in idx.chunks(mb) {
                o.clear();
                a.clear();
                l.clear();
                ad.clear();
                rt.clear();
                for &i in chunk {
                    o.extend_from_slice(&batch.obs[i * OBS_DIM..(i + 1) * OBS_DIM]);
                    a.extend_from_slice(&batch.actions[i * ACT_DIM..(i + 1) * ACT_DIM]);
                    l.push(old_lp[i]);
                    ad.push(adv[i]);
                    rt.push(returns[i]);
                }
                let minibatch = Minibatch {
                    obs: &o,
                    actions: &a,
                    old_log_prob: &l,
                    advantages: &ad,
                    returns: &rt,
                };
                grad32.iter_mut().for_each(|g| *g = 0.0);
                let stats: LossStats = self.policy.ppo_loss_and_grad(&minibatch, &spec, &mut grad32);
                let mut grad: Vec<f64> = grad32.iter().map(|&g| g as f64).collect();
                if !stats.loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    *self = saved;
                    return Err(PpoError::NonFiniteLoss { update: update_index });
                }
                let norm = clip_grad_norm(&mut grad, config.max_grad_norm);
                self.adam.step(self.policy.as_mut_slice(), &grad);
                self.policy.clamp_log_std();
                acc.policy_loss += stats.policy_loss;
                acc.value_loss += stats.value_loss;
                acc.entropy += stats.entropy;
                acc.clip_fraction += stats.clip_fraction;
                acc.approx_kl += stats.approx_kl;
                acc.grad_norm += norm;
                count += 1;
            }
        }
        if !self.policy.is_finite() {
            *self = saved;
            return Err(PpoError::NonFiniteLoss { update: update_index });
        }
        let k = count.max(1) as f64;
        Ok(UpdateStats {
            policy_loss: acc.policy_loss / k,
            value_loss: acc.value_loss / k,
            entropy: acc.entropy / k,
            clip_fraction: acc.clip_fraction / k,
            approx_kl: acc.approx_kl / k,
            grad_norm: acc.grad_norm / k,
        })
    }
}

/// Functional form of [`Learner::update`] for a fresh optimizer.
pub fn ppo_update<R: Rng>(
    policy: &PolicyParams<f32>,
    batch: &RolloutBatch,
    config: &PpoConfig,
    rng: &mut R,
) -> Result<(PolicyParams<f32>, UpdateStats), PpoError> {
    let mut learner = Learner::new(policy.clone(), config.learning_rate);
    let stats = learner.update(batch, config, 0, rng)?;
    Ok((learner.policy, stats))
}

pub const CURVE_HEADER: &str = "update,steps,mean_ep_reward,mean_ep_len,clip_frac,approx_kl,loss_pi,loss_v";

/// One row of `curve.csv`. Episode statistics average the last 100
/// finished episodes (NaN before the first one ends).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub update: usize,
    pub steps: u64,
    pub mean_ep_reward: f64,
    pub mean_ep_len: f64,
    pub clip_frac: f64,
    pub approx_kl: f64,
    pub loss_pi: f64,
    pub loss_v: f64,
}

pub fn write_curve_csv<W: Write>(out: W, rows: &[CurveRow]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(CURVE_HEADER.split(','))?;
    }
    w.flush()
}

pub fn read_curve_csv(path: impl AsRef<Path>) -> anyhow::Result<Vec<CurveRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: PolicyParams<f32>,
    pub curve: Vec<CurveRow>,
    pub final_checkpoint: Option<PathBuf>,
}

/// Collect/update loop. With `out_dir`, writes `curve.csv` after every
/// update and checkpoints per `checkpoint_every` plus `checkpoint_final`.
/// On `NonFiniteLoss` the last good parameters are saved as
/// `checkpoint_last_good` before the error is returned.
pub fn train(
    envs: VecEnv,
    config: &PpoConfig,
    out_dir: Option<&Path>,
    mut on_update: impl FnMut(&CurveRow),
) -> Result<TrainOutcome, PpoError> {
    config.validate()?;
    if envs.len() != config.n_envs {
        return Err(PpoError::InvalidConfig(format!(
            "config expects {} environments, got {}",
            config.n_envs,
            envs.len()
        )));
    }
    let mut envs = envs;
    envs.set_parallel(config.parallel);
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    init_rng.set_stream(1);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(config.seed);
    sample_rng.set_stream(2);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(3);

    let mut policy = PolicyParams::<f32>::init(config.policy_shape(), &mut init_rng);
    policy.log_std_mut().fill(config.log_std_init as f32);
    policy.clamp_log_std();
    let mut learner = Learner::new(policy, config.learning_rate);
    let hyper = serde_json::to_value(config).unwrap_or_default();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }

    let mut recent: VecDeque<EpisodeSummary> = VecDeque::with_capacity(100);
    let mut curve = Vec::new();
    let mut steps = 0u64;
    for update in 1..=config.n_updates() {
        let batch = collect_rollouts(&learner.policy, &mut envs, config.rollout_length, &mut sample_rng)?;
        steps += batch.len() as u64;
        for ep in &batch.episodes {
            if recent.len() == 100 {
                recent.pop_front();
            }
            recent.push_back(*ep);
        }
        let stats = match learner.update(&batch, config, update, &mut shuffle_rng) {
            Ok(s) => s,
            Err(e) => {
                if let Some(dir) = out_dir {
                    learner.policy.save(dir, "checkpoint_last_good", steps, hyper.clone())?;
                }
                return Err(e);
            }
        };
        let k = recent.len() as f64;
        let (mean_rew, mean_len) = if recent.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            (
                recent.iter().map(|e| e.reward).sum::<f64>() / k,
                recent.iter().map(|e| e.length as f64).sum::<f64>() / k,
            )
        };
        let row = CurveRow {
            update,
            steps,
            mean_ep_reward: mean_rew,
            mean_ep_len: mean_len,
            clip_frac: stats.clip_fraction,
            approx_kl: stats.approx_kl,
            loss_pi: stats.policy_loss,
            loss_v: stats.value_loss,
        };
        on_update(&row);
        curve.push(row);
        if let Some(dir) = out_dir {
            write_curve_csv(fs::File::create(dir.join("curve.csv"))?, &curve)?;
            if config.checkpoint_every > 0 && update % config.checkpoint_every == 0 {
                learner
                    .policy
                    .save(dir, &format!("checkpoint_{update:06}"), steps, hyper.clone())?;
            }
        }
    }
    let final_checkpoint = match out_dir {
        Some(dir) => Some(learner.policy.save(dir, "checkpoint_final", steps, hyper)?),
        None => None,
    };
    Ok(TrainOutcome {
        policy: learner.policy,
        curve,
        final_checkpoint,
    })
}
