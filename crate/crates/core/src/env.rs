//! Racing MDP: reset distribution, gate-frame observation, reward,
//! termination and a vectorized stepper with auto-reset.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dynamics::{
    at_gimbal_limit, integrate_step, wrap_angle, ModelParams, MotorCommand, QuadState, DEFAULT_DT,
};
use crate::randomization::{RandomizationScheme, SchemeError};
use crate::track::{check_crossing, out_of_bounds, CrossingKind, Track};

pub const OBS_DIM: usize = 20;
pub const ACT_DIM: usize = 4;
pub const MAX_EPISODE_STEPS: usize = 1200;
pub const RATE_PENALTY: f64 = 0.001;
pub const COLLISION_REWARD: f64 = -10.0;
/// Fixed divisor for rotor speeds in the observation, rad/s.
pub const ROTOR_OBS_SCALE: f64 = 5000.0;
/// Distance in front of the gate plane where episodes start, m.
pub const START_DISTANCE: f64 = 1.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EnvError {
    #[error("episode already finished")]
    AlreadyDone,
    #[error("got {actions} actions for {envs} environments")]
    LengthMismatch { envs: usize, actions: usize },
    #[error(transparent)]
    Scheme(#[from] SchemeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum DoneReason {
    Running,
    Collision,
    GateMiss,
    Timeout,
    NumericBlowup,
}

impl DoneReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Running => "running",
            Self::Collision => "collision",
            Self::GateMiss => "gate_miss",
            Self::Timeout => "timeout",
            Self::NumericBlowup => "numeric_blowup",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Self::Running,
            Self::Collision,
            Self::GateMiss,
            Self::Timeout,
            Self::NumericBlowup,
        ]
        .into_iter()
        .find(|r| r.as_str() == s)
    }
}

/// `[p, v, euler, rates, rotor/5000, next gate position, next gate yaw]`,
/// position/velocity/yaw expressed in the current target gate's frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation(pub [f64; OBS_DIM]);

impl Observation {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeState {
    pub quad: QuadState,
    /// Position before the most recent step.
    pub prev_p: Vector3<f64>,
    pub target_gate: usize,
    pub gates_passed: usize,
    pub step: usize,
    pub done: bool,
    pub done_reason: DoneReason,
    /// Consecutive steps spent at the pitch clamp.
    gimbal_steps: u8,
}

impl EpisodeState {
    /// Wraps an arbitrary quad state as a fresh episode aimed at `target_gate`.
    pub fn new(quad: QuadState, target_gate: usize) -> Self {
        Self {
            prev_p: quad.p,
            quad,
            target_gate,
            gates_passed: 0,
            step: 0,
            done: false,
            done_reason: DoneReason::Running,
            gimbal_steps: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeSummary {
    pub reward: f64,
    pub length: usize,
    pub gates_passed: usize,
    pub reason: DoneReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    pub gates_passed: usize,
    pub speed: f64,
    pub done_reason: DoneReason,
    /// Episode ended by the step cap rather than a terminal event.
    pub truncated: bool,
    /// Set by [`VecEnv::step`] when the slot was auto-reset.
    pub terminal_observation: Option<Observation>,
    pub episode: Option<EpisodeSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// Samples a start state in front of a random gate.
pub fn reset_with_rng<R: Rng + ?Sized>(track: &Track, params: &ModelParams, rng: &mut R) -> EpisodeState {
    let gate_idx = rng.random_range(0..track.len());
    let gate = track.gate(gate_idx);
    let p = gate.center - gate.normal() * START_DISTANCE;
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..=hi);
    let v = Vector3::new(u(-0.5, 0.5), u(-0.5, 0.5), u(-0.5, 0.5));
    let tilt = PI / 9.0;
    let euler = Vector3::new(u(-tilt, tilt), u(-tilt, tilt), wrap_angle(u(-PI, PI)));
    let rates = Vector3::new(u(-0.1, 0.1), u(-0.1, 0.1), u(-0.1, 0.1));
    let (lo, hi) = (params.omega_min, params.omega_max);
    let rotor = Vector4::new(u(lo, hi), u(lo, hi), u(lo, hi), u(lo, hi));
    let quad = QuadState {
        p,
        v,
        euler,
        rates,
        rotor,
    };
    EpisodeState::new(quad, gate_idx)
}

/// Deterministic reset from a seed.
pub fn reset(track: &Track, params: &ModelParams, seed: u64) -> EpisodeState {
    reset_with_rng(track, params, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn observe(ep: &EpisodeState, track: &Track) -> Observation {
    let gate = track.gate(ep.target_gate);
    let next = track.gate(track.next_index(ep.target_gate));
    let q = &ep.quad;
    let p = gate.to_local(&q.p);
    let v = gate.rotate_to_local(&q.v);
    let np = gate.to_local(&next.center);
    let mut o = [0.0; OBS_DIM];
    o[0..3].copy_from_slice(p.as_slice());
    o[3..6].copy_from_slice(v.as_slice());
    o[6] = q.euler.x;
    o[7] = q.euler.y;
    o[8] = wrap_angle(q.euler.z - gate.yaw);
    o[9..12].copy_from_slice(q.rates.as_slice());
    for i in 0..4 {
        o[12 + i] = q.rotor[i] / ROTOR_OBS_SCALE;
    }
    o[16..19].copy_from_slice(np.as_slice());
    o[19] = wrap_angle(next.yaw - gate.yaw);
    Observation(o)
}

/// Progress toward `gate_center` minus the body-rate penalty.
pub fn progress_reward(
    prev_p: &Vector3<f64>,
    p: &Vector3<f64>,
    gate_center: &Vector3<f64>,
    rates: &Vector3<f64>,
) -> f64 {
    (prev_p - gate_center).norm() - (p - gate_center).norm() - RATE_PENALTY * rates.norm()
}

/// Reward for the transition `ep_prev -> ep_curr`, measured against the
/// target gate that was active before the step.
pub fn reward(ep_prev: &EpisodeState, ep_curr: &EpisodeState, collided: bool, track: &Track) -> f64 {
    if collided {
        return COLLISION_REWARD;
    }
    let gate = track.gate(ep_prev.target_gate);
    progress_reward(&ep_prev.quad.p, &ep_curr.quad.p, &gate.center, &ep_curr.quad.rates)
}

fn finish(ep: &mut EpisodeState, reason: DoneReason) {
    ep.done = true;
    ep.done_reason = reason;
}

/// Advances one episode by a single 10 ms step.
pub fn step(
    ep: &mut EpisodeState,
    u: &MotorCommand,
    track: &Track,
    params: &ModelParams,
) -> Result<StepResult, EnvError> {
    if ep.done {
        return Err(EnvError::AlreadyDone);
    }
    let target = track.gate(ep.target_gate);
    let prev_p = ep.quad.p;
    ep.step += 1;
    let mut reward_value;
    match integrate_step(&ep.quad, u, params, DEFAULT_DT) {
        Err(_) => {
            // keep the last finite state so the observation stays valid
            finish(ep, DoneReason::NumericBlowup);
            reward_value = COLLISION_REWARD;
        }
        Ok(next) => {
            ep.prev_p = prev_p;
            ep.quad = next;
            ep.gimbal_steps = if at_gimbal_limit(&next.euler) {
                ep.gimbal_steps.saturating_add(1)
            } else {
                0
            };
            if ep.gimbal_steps >= 2 {
                finish(ep, DoneReason::NumericBlowup);
                reward_value = COLLISION_REWARD;
            } else if out_of_bounds(&next.p, track) {
                finish(ep, DoneReason::Collision);
                reward_value = COLLISION_REWARD;
            } else {
                reward_value = progress_reward(&prev_p, &next.p, &target.center, &next.rates);
                match check_crossing(&prev_p, &next.p, target).kind {
                    CrossingKind::Passed => {
                        ep.gates_passed += 1;
                        ep.target_gate = track.next_index(ep.target_gate);
                    }
                    CrossingKind::Missed => finish(ep, DoneReason::GateMiss),
                    CrossingKind::None => {}
                }
            }
        }
    }
    let mut truncated = false;
    if !ep.done && ep.step >= MAX_EPISODE_STEPS {
        finish(ep, DoneReason::Timeout);
        truncated = true;
    }
    if !reward_value.is_finite() {
        reward_value = COLLISION_REWARD;
    }
    Ok(StepResult {
        observation: observe(ep, track),
        reward: reward_value,
        done: ep.done,
        info: StepInfo {
            gates_passed: ep.gates_passed,
            speed: ep.quad.v.norm(),
            done_reason: ep.done_reason,
            truncated,
            terminal_observation: None,
            episode: None,
        },
    })
}

/// Per-slot random streams: `2 i` for initial states, `2 i + 1` for
/// parameter draws, both derived from one master seed.
pub fn slot_rngs(master_seed: u64, slot: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut state_rng = ChaCha8Rng::seed_from_u64(master_seed);
    state_rng.set_stream(2 * slot);
    let mut param_rng = ChaCha8Rng::seed_from_u64(master_seed);
    param_rng.set_stream(2 * slot + 1);
    (state_rng, param_rng)
}

#[derive(Debug, Clone)]
pub struct EnvSlot {
    pub episode: EpisodeState,
    pub params: ModelParams,
    state_rng: ChaCha8Rng,
    param_rng: ChaCha8Rng,
    episode_reward: f64,
}

impl EnvSlot {
    fn new(track: &Track, scheme: &RandomizationScheme, seed: u64, slot: u64) -> Result<Self, EnvError> {
        let (state_rng, param_rng) = slot_rngs(seed, slot);
        let mut s = Self {
            episode: EpisodeState::new(QuadState::default(), 0),
            params: ModelParams::five_inch(),
            state_rng,
            param_rng,
            episode_reward: 0.0,
        };
        s.reset(track, scheme)?;
        Ok(s)
    }

    fn reset(&mut self, track: &Track, scheme: &RandomizationScheme) -> Result<(), EnvError> {
        self.params = scheme.sample(&mut self.param_rng)?;
        self.episode = reset_with_rng(track, &self.params, &mut self.state_rng);
        self.episode_reward = 0.0;
        Ok(())
    }

    fn step(
        &mut self,
        u: &MotorCommand,
        track: &Track,
        scheme: &RandomizationScheme,
    ) -> Result<StepResult, EnvError> {
        let mut res = step(&mut self.episode, u, track, &self.params)?;
        self.episode_reward += res.reward;
        if res.done {
            res.info.episode = Some(EpisodeSummary {
                reward: self.episode_reward,
                length: self.episode.step,
                gates_passed: self.episode.gates_passed,
                reason: self.episode.done_reason,
            });
            res.info.terminal_observation = Some(res.observation);
            self.reset(track, scheme)?;
            res.observation = observe(&self.episode, track);
        }
        Ok(res)
    }
}

/// A batch of independent racing environments stepped in lockstep.
///
/// Finished slots are reset immediately: the returned observation belongs to
/// the new episode and the final one is kept in
/// [`StepInfo::terminal_observation`]. Results do not depend on whether the
/// batch is stepped serially or on the rayon pool.
#[derive(Debug, Clone)]
pub struct VecEnv {
    track: Track,
    scheme: RandomizationScheme,
    slots: Vec<EnvSlot>,
    parallel: bool,
}

impl VecEnv {
    pub fn new(
        track: Track,
        scheme: RandomizationScheme,
        n_envs: usize,
        seed: u64,
    ) -> Result<Self, EnvError> {
        let slots = (0..n_envs as u64)
            .map(|i| EnvSlot::new(&track, &scheme, seed, i))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            track,
            scheme,
            slots,
            parallel: true,
        })
    }

    pub fn set_parallel(&mut self, parallel: bool) {
        self.parallel = parallel;
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn track(&self) -> &Track {
        &self.track
    }

    pub fn scheme(&self) -> &RandomizationScheme {
        &self.scheme
    }

    pub fn slots(&self) -> &[EnvSlot] {
        &self.slots
    }

    pub fn observations(&self) -> Vec<Observation> {
        self.slots
            .iter()
            .map(|s| observe(&s.episode, &self.track))
            .collect()
    }

    /// Steps every slot; per-slot failures are returned in place.
    pub fn step(&mut self, actions: &[MotorCommand]) -> Result<Vec<Result<StepResult, EnvError>>, EnvError> {
        if actions.len() != self.slots.len() {
            return Err(EnvError::LengthMismatch {
                envs: self.slots.len(),
                actions: actions.len(),
            });
        }
        let track = &self.track;
        let scheme = &self.scheme;
        let results = if self.parallel {
            self.slots
                .par_iter_mut()
                .zip(actions.par_iter())
                .map(|(slot, u)| slot.step(u, track, scheme))
                .collect()
        } else {
            self.slots
                .iter_mut()
                .zip(actions)
                .map(|(slot, u)| slot.step(u, track, scheme))
                .collect()
        };
        Ok(results)
    }
}

/// Functional form of [`VecEnv::step`].
pub fn vec_step(
    envs: &mut VecEnv,
    actions: &[MotorCommand],
) -> Result<Vec<Result<StepResult, EnvError>>, EnvError> {
    envs.step(actions)
}

pub const TRAJECTORY_HEADER: &str = "t,px,py,pz,vx,vy,vz,phi,theta,psi,p_rate,q_rate,r_rate,w1,w2,w3,w4,u1,u2,u3,u4,reward,target_gate,gates_passed";

/// One logged 10 ms step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRow {
    pub t: f64,
    pub state: QuadState,
    pub command: [f64; 4],
    pub reward: f64,
    pub target_gate: usize,
    pub gates_passed: usize,
}

pub fn write_trajectory_csv<W: Write>(mut out: W, rows: &[TrajectoryRow]) -> std::io::Result<()> {
    writeln!(out, "{TRAJECTORY_HEADER}")?;
    for r in rows {
        let s = &r.state;
        let mut line = format!("{}", r.t);
        for x in s.as_array() {
            line.push_str(&format!(",{x}"));
        }
        for x in r.command {
            line.push_str(&format!(",{x}"));
        }
        writeln!(out, "{line},{},{},{}", r.reward, r.target_gate, r.gates_passed)?;
    }
    Ok(())
}

/// Parses a file written by [`write_trajectory_csv`].
pub fn read_trajectory_csv<R: std::io::Read>(input: R) -> std::io::Result<Vec<TrajectoryRow>> {
    let bad = |m: String| std::io::Error::new(std::io::ErrorKind::InvalidData, m);
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(|e| bad(e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != TRAJECTORY_HEADER {
        return Err(bad("unexpected trajectory header".into()));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let f = |i: usize| -> std::io::Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(format!("bad field {i} in trajectory row")))
        };
        let v3 = |i: usize| -> std::io::Result<Vector3<f64>> { Ok(Vector3::new(f(i)?, f(i + 1)?, f(i + 2)?)) };
        rows.push(TrajectoryRow {
            t: f(0)?,
            state: QuadState {
                p: v3(1)?,
                v: v3(4)?,
                euler: v3(7)?,
                rates: v3(10)?,
                rotor: Vector4::new(f(13)?, f(14)?, f(15)?, f(16)?),
            },
            command: [f(17)?, f(18)?, f(19)?, f(20)?],
            reward: f(21)?,
            target_gate: f(22)? as usize,
            gates_passed: f(23)? as usize,
        });
    }
    Ok(rows)
}
