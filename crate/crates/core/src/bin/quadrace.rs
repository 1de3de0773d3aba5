use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use quadrace::dynamics::{ModelParams, MotorCommand};
use quadrace::env::{self, VecEnv};
use quadrace::eval::{self, EnvSpec, EvalOptions, EvalReport};
use quadrace::policy::PolicyParams;
use quadrace::ppo::{self, PpoConfig};
use quadrace::randomization::RandomizationScheme;
use quadrace::sysid;
use quadrace::track::{self, Track};

#[derive(Parser)]
#[command(name = "quadrace", version, about = "Quadcopter racing simulator and PPO lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy with PPO.
    Train(TrainArgs),
    /// Evaluate one checkpoint on one environment.
    Eval(EvalArgs),
    /// Evaluate every checkpoint of a manifest on every environment.
    CrossEval(CrossEvalArgs),
    /// Render a reward box plot from a per-rollout CSV.
    Plot(PlotArgs),
    /// Fly a checkpoint (or a constant command) once and log the trajectory.
    Fly(FlyArgs),
    /// Simulate a chirp excitation flight and write a flight log.
    GenLog(GenLogArgs),
    /// Identify model parameters from flight logs.
    Sysid(SysidArgs),
    /// Write the built-in parameter sets and track as JSON.
    Defaults {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct EnvArgs {
    /// Airframe parameters JSON; `3inch` and `5inch` select the built-ins.
    #[arg(long, default_value = "5inch")]
    params: String,
    /// `fixed`, `general` or `pct:<p>`.
    #[arg(long, default_value = "fixed")]
    dr: String,
    /// Track JSON (default: built-in figure eight).
    #[arg(long)]
    track: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    env: EnvArgs,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// PPO config JSON; missing fields take the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the desk-scale preset instead of the library defaults.
    #[arg(long)]
    desk: bool,
    #[arg(long)]
    n_envs: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Step environments serially.
    #[arg(long)]
    serial: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long = "env-params", default_value = "5inch")]
    env_params: String,
    #[arg(long, default_value = "fixed")]
    dr: String,
    #[arg(long)]
    track: Option<PathBuf>,
    #[arg(short = 'n', long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    crash_includes_miss: bool,
    /// Trajectories to record for plotting.
    #[arg(long, default_value_t = 5)]
    record: usize,
}

#[derive(Args)]
struct CrossEvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Overrides the manifest's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    crash_includes_miss: bool,
}

#[derive(Args)]
struct PlotArgs {
    /// Per-rollout CSV written by `eval` or `cross-eval`.
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Track drawn under the trajectories (default: built-in figure eight).
    #[arg(long)]
    track: Option<PathBuf>,
}

#[derive(Args)]
struct FlyArgs {
    #[command(flatten)]
    env: EnvArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Constant motor command used when no checkpoint is given.
    #[arg(long, default_value_t = 0.0)]
    constant: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenLogArgs {
    #[arg(long, default_value = "5inch")]
    params: String,
    #[arg(long, default_value_t = 20.0)]
    duration: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Gaussian force noise as a fraction of each axis' RMS force.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long)]
    out: PathBuf,
    /// Also write a motor step-response log here.
    #[arg(long)]
    motor_out: Option<PathBuf>,
}

#[derive(Args)]
struct SysidArgs {
    /// Flight log CSV (force and moment fit).
    #[arg(long)]
    log: PathBuf,
    /// Motor step-response CSV.
    #[arg(long)]
    motor_log: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn load_params(s: &str) -> Result<ModelParams> {
    match s {
        "3inch" => Ok(ModelParams::three_inch()),
        "5inch" => Ok(ModelParams::five_inch()),
        path => ModelParams::load_json(path),
    }
}

fn load_track(path: Option<&Path>) -> Result<Track> {
    match path {
        Some(p) => Track::load_json(p).with_context(|| format!("reading track {}", p.display())),
        None => Ok(track::default_figure8()),
    }
}

fn scheme(dr: &str, params: &str) -> Result<RandomizationScheme> {
    let base = if dr == "general" { None } else { Some(load_params(params)?) };
    Ok(RandomizationScheme::parse(dr, base)?)
}

fn env_name(params: &str, dr: &str) -> String {
    let stem = Path::new(params)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| params.to_string());
    format!("{stem}-{dr}")
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let mut cfg = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?).context("parsing PPO config")?,
        None if a.desk => PpoConfig::desk(),
        None => PpoConfig::default(),
    };
    if let Some(s) = a.steps {
        cfg.total_steps = s;
    }
    if let Some(n) = a.n_envs {
        cfg.n_envs = n;
    }
    if let Some(c) = a.checkpoint_every {
        cfg.checkpoint_every = c;
    }
    cfg.seed = a.seed;
    cfg.parallel = !a.serial;
    cfg.validate()?;
    let track = load_track(a.env.track.as_deref())?;
    let scheme = scheme(&a.env.dr, &a.env.params)?;
    let envs = VecEnv::new(track, scheme, cfg.n_envs, cfg.seed)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let start = Instant::now();
    let n_updates = cfg.n_updates();
    let outcome = ppo::train(envs, &cfg, Some(&a.out), |r| {
        eprintln!(
            "update {}/{} steps {} rew {:.3} len {:.1} kl {:.4} clip {:.3} [{:.0}s]",
            r.update,
            n_updates,
            r.steps,
            r.mean_ep_reward,
            r.mean_ep_len,
            r.approx_kl,
            r.clip_frac,
            start.elapsed().as_secs_f64()
        );
    })?;
    if let Some(p) = outcome.final_checkpoint {
        println!("{}", p.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn report_exit(reports: &[&EvalReport]) -> ExitCode {
    let mut code = ExitCode::SUCCESS;
    for r in reports {
        let a = r.aggregate();
        println!(
            "{} on {}: ep_rew {:.3} ep_len {:.1} gates {:.2} crash {:.1}% v_mean {:.2} v_max {:.2}",
            r.net, r.env, a.ep_rew, a.ep_len, a.gates, a.crash_pct, a.v_mean, a.v_max
        );
        if r.blowup_fraction() > 0.5 {
            eprintln!("{} on {}: numeric blow-up in more than half of the rollouts", r.net, r.env);
            code = ExitCode::from(3);
        }
    }
    code
}

fn eval_cmd(a: EvalArgs) -> Result<ExitCode> {
    let (policy, _) = PolicyParams::<f32>::load(&a.checkpoint)?;
    let track = load_track(a.track.as_deref())?;
    let spec = EnvSpec {
        name: env_name(&a.env_params, &a.dr),
        track: track.clone(),
        scheme: scheme(&a.dr, &a.env_params)?,
    };
    let net = a.name.unwrap_or_else(|| {
        a.checkpoint
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "policy".into())
    });
    let opts = EvalOptions {
        crash_includes_miss: a.crash_includes_miss,
        record_trajectories: a.record,
        ..EvalOptions::default()
    };
    let report = eval::evaluate(&policy, &net, &spec, a.n, a.seed, &opts)?;
    eval::export(&a.out, &[&report], &track)?;
    Ok(report_exit(&[&report]))
}

#[derive(Deserialize)]
struct ManifestPolicy {
    name: String,
    checkpoint: PathBuf,
}

#[derive(Deserialize)]
struct ManifestEnv {
    name: String,
    params: String,
    #[serde(default = "default_dr")]
    dr: String,
}

fn default_dr() -> String {
    "fixed".into()
}

#[derive(Deserialize)]
struct CrossManifest {
    policies: Vec<ManifestPolicy>,
    envs: Vec<ManifestEnv>,
    #[serde(default)]
    track: Option<PathBuf>,
    #[serde(default = "default_n")]
    n: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    out: Option<PathBuf>,
    #[serde(default = "default_record")]
    record: usize,
}

fn default_n() -> usize {
    1000
}

fn default_record() -> usize {
    3
}

fn cross_eval_cmd(a: CrossEvalArgs) -> Result<ExitCode> {
    let text = fs::read_to_string(&a.manifest).with_context(|| format!("reading {}", a.manifest.display()))?;
    let m: CrossManifest = serde_json::from_str(&text)?;
    let base = a.manifest.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    let resolve_params = |s: &str| match s {
        "3inch" | "5inch" => s.to_string(),
        p => resolve(Path::new(p)).to_string_lossy().into_owned(),
    };
    let track = load_track(m.track.as_deref().map(resolve).as_deref())?;
    let mut envs = Vec::new();
    for e in &m.envs {
        envs.push(EnvSpec {
            name: e.name.clone(),
            track: track.clone(),
            scheme: scheme(&e.dr, &resolve_params(&e.params))?,
        });
    }
    let mut policies = Vec::new();
    for p in &m.policies {
        let (params, _) = PolicyParams::<f32>::load(resolve(&p.checkpoint))?;
        policies.push((p.name.clone(), params));
    }
    let opts = EvalOptions {
        crash_includes_miss: a.crash_includes_miss,
        record_trajectories: m.record,
        ..EvalOptions::default()
    };
    let reports = eval::cross_eval(&policies, &envs, m.n, m.seed, &opts)?;
    let out = match (a.out, m.out) {
        (Some(o), _) => o,
        (None, Some(o)) => resolve(&o),
        (None, None) => bail!("no output directory: pass --out or set \"out\" in the manifest"),
    };
    let refs: Vec<&EvalReport> = reports.iter().collect();
    eval::export(&out, &refs, &track)?;
    Ok(report_exit(&refs))
}

fn plot_cmd(a: PlotArgs) -> Result<ExitCode> {
    let records = eval::read_rollouts_csv(&a.report)?;
    let out = a
        .out
        .unwrap_or_else(|| a.report.with_file_name("rewards.svg"));
    fs::write(&out, eval::boxplot_svg(&eval::reward_groups(&records), "episode reward"))?;
    let dir = a.report.parent().unwrap_or(Path::new("."));
    let mut traj_files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "csv")
                && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("traj_"))
        })
        .collect();
    traj_files.sort();
    if !traj_files.is_empty() {
        let mut trajs = Vec::new();
        for f in &traj_files {
            trajs.push(env::read_trajectory_csv(fs::File::open(f)?)?);
        }
        let track = load_track(a.track.as_deref())?;
        fs::write(dir.join("trajectories.svg"), eval::trajectory_svg(&track, &trajs))?;
    }
    println!("{}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn fly_cmd(a: FlyArgs) -> Result<ExitCode> {
    let track = load_track(a.env.track.as_deref())?;
    let spec = EnvSpec {
        name: env_name(&a.env.params, &a.env.dr),
        track: track.clone(),
        scheme: scheme(&a.env.dr, &a.env.params)?,
    };
    let (summary, _, _, _, traj) = match &a.checkpoint {
        Some(c) => {
            let (p, _) = PolicyParams::<f32>::load(c)?;
            eval::run_rollout(&p, &spec, a.seed, 0, true)?
        }
        None => {
            let c = eval::ConstantController(MotorCommand::new([a.constant; 4])?);
            eval::run_rollout(&c, &spec, a.seed, 0, true)?
        }
    };
    if let Some(dir) = a.out.parent() {
        fs::create_dir_all(dir)?;
    }
    env::write_trajectory_csv(fs::File::create(&a.out)?, &traj)?;
    println!(
        "reward {:.3} steps {} gates {} end {}",
        summary.reward,
        summary.length,
        summary.gates_passed,
        summary.reason.as_str()
    );
    Ok(ExitCode::SUCCESS)
}

fn gen_log_cmd(a: GenLogArgs) -> Result<ExitCode> {
    let params = load_params(&a.params)?;
    let log = sysid::simulate_chirp_flight(&params, a.duration, a.seed, a.noise)?;
    log.write_csv(fs::File::create(&a.out)?)?;
    if let Some(p) = a.motor_out {
        let m = sysid::simulate_motor_steps(&params, quadrace::dynamics::DEFAULT_DT)?;
        m.write_csv(fs::File::create(p)?)?;
    }
    println!("{} rows", log.len());
    Ok(ExitCode::SUCCESS)
}

fn sysid_cmd(a: SysidArgs) -> Result<ExitCode> {
    let log = sysid::FlightLog::read_csv(fs::File::open(&a.log)?)?;
    let motor = sysid::MotorLog::read_csv(fs::File::open(&a.motor_log)?)?;
    let fit = sysid::identify(&log, &motor)?;
    fit.params.save_json(&a.out)?;
    println!("{}", serde_json::to_string_pretty(&fit.residuals)?);
    Ok(ExitCode::SUCCESS)
}

fn defaults_cmd(out: PathBuf) -> Result<ExitCode> {
    fs::create_dir_all(&out)?;
    ModelParams::three_inch().save_json(out.join("params_3inch.json"))?;
    ModelParams::five_inch().save_json(out.join("params_5inch.json"))?;
    fs::write(out.join("track_figure8.json"), track::FIGURE8_JSON)?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval_cmd(a),
        Command::CrossEval(a) => cross_eval_cmd(a),
        Command::Plot(a) => plot_cmd(a),
        Command::Fly(a) => fly_cmd(a),
        Command::GenLog(a) => gen_log_cmd(a),
        Command::Sysid(a) => sysid_cmd(a),
        Command::Defaults { out } => defaults_cmd(out),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
