//! Rollout evaluation with deterministic actions, cross-platform sweeps
//! and CSV/SVG export.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{ModelParams, MotorCommand, DEFAULT_DT};
use crate::env::{self, slot_rngs, DoneReason, EnvError, Observation, TrajectoryRow};
use crate::nn::Scalar;
use crate::policy::PolicyParams;
use crate::randomization::RandomizationScheme;
use crate::track::Track;

/// Anything that maps an observation to a motor command.
pub trait Controller: Sync {
    fn act(&self, obs: &Observation) -> MotorCommand;
}

impl<T: Scalar> Controller for PolicyParams<T> {
    fn act(&self, obs: &Observation) -> MotorCommand {
        self.act_deterministic(obs)
    }
}

/// Outputs the same command every step.
#[derive(Debug, Clone, Copy)]
pub struct ConstantController(pub MotorCommand);

impl Controller for ConstantController {
    fn act(&self, _obs: &Observation) -> MotorCommand {
        self.0
    }
}

/// An evaluation environment: track plus airframe distribution.
#[derive(Debug, Clone)]
pub struct EnvSpec {
    pub name: String,
    pub track: Track,
    pub scheme: RandomizationScheme,
}

impl EnvSpec {
    pub fn fixed(name: impl Into<String>, track: Track, params: ModelParams) -> Self {
        Self {
            name: name.into(),
            track,
            scheme: RandomizationScheme::Fixed(params),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    /// Count `GateMiss` endings as crashes.
    pub crash_includes_miss: bool,
    /// Keep full trajectories for the first this many rollouts.
    pub record_trajectories: usize,
    pub parallel: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            crash_includes_miss: false,
            record_trajectories: 0,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub net: String,
    pub env: String,
    pub rollout: usize,
    pub ep_rew: f64,
    pub ep_len: usize,
    pub gates: usize,
    pub crashed: bool,
    pub done_reason: String,
    pub v_mean: f64,
    pub v_max: f64,
    /// Time to pass every gate of the track once, if reached.
    pub lap_time: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub ep_rew: f64,
    pub ep_len: f64,
    pub gates: f64,
    pub crash_pct: f64,
    pub v_mean: f64,
    pub v_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub net: String,
    pub env: String,
    pub seed: u64,
    pub records: Vec<RolloutRecord>,
    /// Trajectories of the first `record_trajectories` rollouts.
    pub trajectories: Vec<Vec<TrajectoryRow>>,
}

impl EvalReport {
    pub fn aggregate(&self) -> Aggregate {
        aggregate(&self.records)
    }

    pub fn blowup_fraction(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        let n = self
            .records
            .iter()
            .filter(|r| r.done_reason == DoneReason::NumericBlowup.as_str())
            .count();
        n as f64 / self.records.len() as f64
    }
}

pub fn aggregate(records: &[RolloutRecord]) -> Aggregate {
    let n = records.len().max(1) as f64;
    let mean = |f: &dyn Fn(&RolloutRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    Aggregate {
        ep_rew: mean(&|r| r.ep_rew),
        ep_len: mean(&|r| r.ep_len as f64),
        gates: mean(&|r| r.gates as f64),
        crash_pct: 100.0 * mean(&|r| if r.crashed { 1.0 } else { 0.0 }),
        v_mean: mean(&|r| r.v_mean),
        v_max: mean(&|r| r.v_max),
    }
}

fn is_crash(reason: DoneReason, include_miss: bool) -> bool {
    match reason {
        DoneReason::Collision | DoneReason::NumericBlowup => true,
        DoneReason::GateMiss => include_miss,
        _ => false,
    }
}

/// Runs one episode from the `index`-th shared seed.
pub fn run_rollout<C: Controller + ?Sized>(
    controller: &C,
    spec: &EnvSpec,
    seed: u64,
    index: usize,
    record: bool,
) -> Result<(env::EpisodeSummary, f64, f64, Option<f64>, Vec<TrajectoryRow>), EnvError> {
    let (mut state_rng, mut param_rng) = slot_rngs(seed, index as u64);
    let params = spec.scheme.sample(&mut param_rng)?;
    let mut ep = env::reset_with_rng(&spec.track, &params, &mut state_rng);
    let mut obs = env::observe(&ep, &spec.track);
    let mut traj = Vec::new();
    let (mut total, mut v_sum, mut v_max) = (0.0, 0.0, 0.0f64);
    let mut lap_time = None;
    if record {
        traj.push(TrajectoryRow {
            t: 0.0,
            state: ep.quad,
            command: [0.0; 4],
            reward: 0.0,
            target_gate: ep.target_gate,
            gates_passed: 0,
        });
    }
    while !ep.done {
        let u = controller.act(&obs);
        let r = env::step(&mut ep, &u, &spec.track, &params)?;
        total += r.reward;
        v_sum += r.info.speed;
        v_max = v_max.max(r.info.speed);
        if lap_time.is_none() && ep.gates_passed >= spec.track.len() {
            lap_time = Some(ep.step as f64 * DEFAULT_DT);
        }
        if record {
            traj.push(TrajectoryRow {
                t: ep.step as f64 * DEFAULT_DT,
                state: ep.quad,
                command: u.values(),
                reward: r.reward,
                target_gate: ep.target_gate,
                gates_passed: ep.gates_passed,
            });
        }
        obs = r.observation;
    }
    let summary = env::EpisodeSummary {
        reward: total,
        length: ep.step,
        gates_passed: ep.gates_passed,
        reason: ep.done_reason,
    };
    let v_mean = v_sum / ep.step.max(1) as f64;
    Ok((summary, v_mean, v_max, lap_time, traj))
}

/// `n` deterministic-action episodes; rollout `i` uses the `i`-th stream of
/// `seed` for both its airframe draw and its initial state, so every
/// controller sees the same starts on the same `spec`.
pub fn evaluate<C: Controller + ?Sized>(
    controller: &C,
    net: &str,
    spec: &EnvSpec,
    n: usize,
    seed: u64,
    opts: &EvalOptions,
) -> Result<EvalReport, EnvError> {
    let one = |i: usize| run_rollout(controller, spec, seed, i, i < opts.record_trajectories);
    let results: Vec<_> = if opts.parallel {
        (0..n).into_par_iter().map(one).collect()
    } else {
        (0..n).map(one).collect()
    };
    let mut records = Vec::with_capacity(n);
    let mut trajectories = Vec::new();
    for (i, res) in results.into_iter().enumerate() {
        let (s, v_mean, v_max, lap_time, traj) = res?;
        records.push(RolloutRecord {
            net: net.to_string(),
            env: spec.name.clone(),
            rollout: i,
            ep_rew: s.reward,
            ep_len: s.length,
            gates: s.gates_passed,
            crashed: is_crash(s.reason, opts.crash_includes_miss),
            done_reason: s.reason.as_str().to_string(),
            v_mean,
            v_max,
            lap_time,
        });
        if !traj.is_empty() {
            trajectories.push(traj);
        }
    }
    Ok(EvalReport {
        net: net.to_string(),
        env: spec.name.clone(),
        seed,
        records,
        trajectories,
    })
}

/// Every controller on every environment, row-major over controllers.
pub fn cross_eval<C: Controller>(
    controllers: &[(String, C)],
    envs: &[EnvSpec],
    n: usize,
    seed: u64,
    opts: &EvalOptions,
) -> Result<Vec<EvalReport>, EnvError> {
    let mut out = Vec::with_capacity(controllers.len() * envs.len());
    for (name, c) in controllers {
        for spec in envs {
            out.push(evaluate(c, name, spec, n, seed, opts)?);
        }
    }
    Ok(out)
}

pub const AGGREGATE_HEADER: &str = "net,env,ep_rew,ep_len,gates,crash_pct,v_mean,v_max";

pub fn write_rollouts_csv<W: Write>(out: W, reports: &[&EvalReport]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        for rec in &r.records {
            w.serialize(rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_rollouts_csv(path: impl AsRef<Path>) -> csv::Result<Vec<RolloutRecord>> {
    csv::Reader::from_path(path)?.deserialize().collect()
}

pub fn write_aggregate_csv<W: Write>(out: W, reports: &[&EvalReport]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(AGGREGATE_HEADER.split(','))?;
    for r in reports {
        let a = r.aggregate();
        w.write_record([
            r.net.clone(),
            r.env.clone(),
            a.ep_rew.to_string(),
            a.ep_len.to_string(),
            a.gates.to_string(),
            a.crash_pct.to_string(),
            a.v_mean.to_string(),
            a.v_max.to_string(),
        ])?;
    }
    w.flush()
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Top-down (x right, y up on the page is world x north / y east) view of
/// the gates and the given trajectories.
pub fn trajectory_svg(track: &Track, trajectories: &[Vec<TrajectoryRow>]) -> String {
    let [sx, sy, _] = track.bounds().size;
    let (w, h) = (600.0, 600.0 * sx / sy);
    // world (x north, y east) -> page (east to the right, north up)
    let px = |y: f64| (y / sy + 0.5) * w;
    let py = |x: f64| (0.5 - x / sx) * h;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}">"#
    );
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#ffffff" stroke="#888"/>"##);
    for (k, g) in track.gates().iter().enumerate() {
        let l = g.lateral() * g.half_size;
        let (a, b) = (g.center + l, g.center - l);
        let _ = writeln!(
            s,
            r##"<line class="gate" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#000" stroke-width="4"/>"##,
            px(a.y),
            py(a.x),
            px(b.y),
            py(b.x)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="12">{}</text>"#,
            px(g.center.y) + 6.0,
            py(g.center.x) - 6.0,
            k
        );
    }
    for (i, traj) in trajectories.iter().enumerate() {
        let pts: Vec<String> = traj
            .iter()
            .map(|r| format!("{:.2},{:.2}", px(r.state.p.y), py(r.state.p.x)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="trajectory" fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            PALETTE[i % PALETTE.len()],
            pts.join(" ")
        );
    }
    s.push_str("</svg>\n");
    s
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// One box (quartiles, whiskers at min/max) per labelled sample.
pub fn boxplot_svg(groups: &[(String, Vec<f64>)], y_label: &str) -> String {
    let (w, h, margin) = (120.0 * groups.len().max(1) as f64 + 80.0, 400.0, 50.0);
    let all: Vec<f64> = groups.iter().flat_map(|g| g.1.iter().copied()).filter(|v| v.is_finite()).collect();
    let mut lo = all.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    if hi - lo < 1e-9 {
        hi = lo + 1.0;
    }
    let y = |v: f64| h - margin - (v - lo) / (hi - lo) * (h - 2.0 * margin);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}">"#
    );
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    let _ = writeln!(
        s,
        r#"<text x="10" y="20" font-size="13">{y_label} (range {lo:.2} to {hi:.2})</text>"#
    );
    for (i, (label, values)) in groups.iter().enumerate() {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        v.sort_by(|a, b| a.total_cmp(b));
        let cx = 80.0 + 120.0 * i as f64 + 40.0;
        let color = PALETTE[i % PALETTE.len()];
        if v.is_empty() {
            continue;
        }
        let (q0, q1, q2, q3, q4) = (
            quantile(&v, 0.0),
            quantile(&v, 0.25),
            quantile(&v, 0.5),
            quantile(&v, 0.75),
            quantile(&v, 1.0),
        );
        let _ = writeln!(
            s,
            r##"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="#000"/>"##,
            y(q0),
            y(q4)
        );
        let _ = writeln!(
            s,
            r##"<rect class="box" x="{:.2}" y="{:.2}" width="60" height="{:.2}" fill="{color}" fill-opacity="0.5" stroke="#000"/>"##,
            cx - 30.0,
            y(q3),
            (y(q1) - y(q3)).max(0.5)
        );
        let _ = writeln!(
            s,
            r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#000" stroke-width="2"/>"##,
            cx - 30.0,
            y(q2),
            cx + 30.0,
            y(q2)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">{}</text>"#,
            cx,
            h - margin + 20.0,
            label
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Groups per-rollout records by `net/env` for box plots, keeping first-seen order.
pub fn reward_groups(records: &[RolloutRecord]) -> Vec<(String, Vec<f64>)> {
    let mut groups: Vec<(String, Vec<f64>)> = Vec::new();
    for r in records {
        let key = format!("{}/{}", r.net, r.env);
        match groups.iter_mut().find(|g| g.0 == key) {
            Some(g) => g.1.push(r.ep_rew),
            None => groups.push((key, vec![r.ep_rew])),
        }
    }
    groups
}

/// Writes `rollouts.csv`, `aggregate.csv`, `rewards.svg`, and per report
/// with recorded trajectories a `traj_<net>_<env>.svg` plus CSVs.
pub fn export(dir: &Path, reports: &[&EvalReport], track: &Track) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    write_rollouts_csv(fs::File::create(dir.join("rollouts.csv"))?, reports).map_err(std::io::Error::other)?;
    write_aggregate_csv(fs::File::create(dir.join("aggregate.csv"))?, reports)?;
    let records: Vec<RolloutRecord> = reports.iter().flat_map(|r| r.records.iter().cloned()).collect();
    fs::write(dir.join("rewards.svg"), boxplot_svg(&reward_groups(&records), "episode reward"))?;
    for r in reports {
        if r.trajectories.is_empty() {
            continue;
        }
        let stem = format!("traj_{}_{}", sanitize(&r.net), sanitize(&r.env));
        fs::write(dir.join(format!("{stem}.svg")), trajectory_svg(track, &r.trajectories))?;
        for (i, t) in r.trajectories.iter().enumerate() {
            env::write_trajectory_csv(fs::File::create(dir.join(format!("{stem}_{i}.csv")))?, t)?;
        }
    }
    Ok(())
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}
