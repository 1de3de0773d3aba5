//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the verdict lines are always shown.
//! Criterion 9 is reported but never fails the run; every other failure
//! makes the process exit non-zero.

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{Rotation3, Vector3};
use quadrace::dynamics::{
    command_for_rotor_speed, hover_rotor_speeds, integrate_step, wrap_angle, ModelParams, MotorCommand, QuadState,
    DEFAULT_DT,
};
use quadrace::env::{self, DoneReason, EpisodeState, COLLISION_REWARD, RATE_PENALTY};
use quadrace::eval::{self, EnvSpec, EvalOptions, EvalReport};
use quadrace::policy::{gaussian_log_prob, Minibatch, PolicyParams, PolicyShape, PpoLossSpec};
use quadrace::ppo::{self, gae, PpoConfig};
use quadrace::randomization::{sample_general, RandomizationScheme};
use quadrace::sysid::{identify, simulate_chirp_flight, simulate_motor_steps};
use quadrace::track::{self, Bounds, Gate, Track};
use quadrace::env::VecEnv;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seed of the desk-scale training runs behind criteria 8 and 9.
const TRAIN_SEED: u64 = 2;
const EVAL_SEED: u64 = 0;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn hover(params: &ModelParams, p: Vector3<f64>) -> (QuadState, MotorCommand) {
    let w = hover_rotor_speeds(params).expect("hover exists");
    let u = MotorCommand::clipped([0, 1, 2, 3].map(|i| command_for_rotor_speed(w[i], params)));
    let mut s = QuadState::at_rest(p, 0.0);
    s.rotor = w;
    (s, u)
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let p = ModelParams::five_inch();

    let mut s = QuadState::at_rest(Vector3::new(0.0, 0.0, -3.0), p.omega_min);
    let steps = (p.tau / DEFAULT_DT).round() as usize;
    for _ in 0..steps {
        s = integrate_step(&s, &MotorCommand::splat(1.0), &p, DEFAULT_DT).unwrap();
    }
    let reached = (s.rotor[0] - p.omega_min) / (p.omega_max - p.omega_min);
    let target = 1.0 - (-1.0f64).exp();
    let step_err = rel(reached, target);

    let (mut s, u) = hover(&p, Vector3::new(0.0, 0.0, -2.0));
    let p0 = s.p;
    for _ in 0..100 {
        s = integrate_step(&s, &u, &p, DEFAULT_DT).unwrap();
    }
    let drift = (s.p - p0).norm();

    // Richardson estimate: |x(h) - x(h/2)| / |x(h/2) - x(h/4)| -> 2^4
    let fly = |dt: f64| {
        let mut s = QuadState::at_rest(Vector3::new(0.0, 0.0, -3.0), 1800.0);
        s.v = Vector3::new(1.0, -0.5, 0.2);
        s.euler = Vector3::new(0.1, -0.2, 0.3);
        s.rates = Vector3::new(0.5, -0.3, 0.2);
        let u = MotorCommand::new([0.55, 0.45, 0.5, 0.52]).unwrap();
        let n = (0.4 / dt).round() as usize;
        for _ in 0..n {
            s = integrate_step(&s, &u, &p, dt).unwrap();
        }
        s.as_array()
    };
    let dist = |a: [f64; 16], b: [f64; 16]| a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let (a, b, c) = (fly(0.01), fly(0.005), fly(0.0025));
    let ratio = dist(a, b) / dist(b, c);

    let runtime = start.elapsed().as_secs_f64();
    verdict(
        step_err <= 0.02 && drift < 1e-6 && (12.0..=20.0).contains(&ratio) && runtime < 1.0,
        format!(
            "motor reached {reached:.5} of gap at t=tau (target {target:.5}, rel err {step_err:.4}); \
             hover drift {drift:.2e} m; RK4 ratio {ratio:.2}; {runtime:.3} s"
        ),
    )
}

fn rotate_scene(track: &Track, ep: &EpisodeState, angle: f64, shift: Vector3<f64>) -> (Track, EpisodeState) {
    let r = Rotation3::from_axis_angle(&Vector3::z_axis(), angle);
    let gates = track
        .gates()
        .iter()
        .map(|g| Gate {
            center: r * g.center + shift,
            yaw: wrap_angle(g.yaw + angle),
            half_size: g.half_size,
        })
        .collect();
    let moved = Track::new(gates, *track.bounds()).unwrap();
    let mut q = ep.quad;
    q.p = r * q.p + shift;
    q.v = r * q.v;
    q.euler.z = wrap_angle(q.euler.z + angle);
    (moved, EpisodeState::new(q, ep.target_gate))
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2002);
    let bounds = Bounds {
        size: [1000.0, 1000.0, 1000.0],
    };
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(2..8);
        let gates = (0..n)
            .map(|_| {
                Gate::new(
                    Vector3::new(
                        rng.random_range(-20.0..20.0),
                        rng.random_range(-20.0..20.0),
                        rng.random_range(-8.0..-1.0),
                    ),
                    rng.random_range(-3.2..3.2),
                )
            })
            .collect();
        let t = Track::new(gates, bounds).unwrap();
        let mut q = QuadState::at_rest(
            Vector3::new(
                rng.random_range(-20.0..20.0),
                rng.random_range(-20.0..20.0),
                rng.random_range(-8.0..-1.0),
            ),
            0.0,
        );
        q.v = Vector3::from_fn(|_, _| rng.random_range(-10.0..10.0));
        q.euler = Vector3::new(
            rng.random_range(-3.1..3.1),
            rng.random_range(-1.4..1.4),
            rng.random_range(-3.1..3.1),
        );
        q.rates = Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0));
        q.rotor = nalgebra::Vector4::from_fn(|_, _| rng.random_range(300.0..3000.0));
        let ep = EpisodeState::new(q, rng.random_range(0..n));
        let angle = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let shift = Vector3::new(
            rng.random_range(-50.0..50.0),
            rng.random_range(-50.0..50.0),
            rng.random_range(-3.0..0.0),
        );
        let (t2, ep2) = rotate_scene(&t, &ep, angle, shift);
        let a = env::observe(&ep, &t);
        let b = env::observe(&ep2, &t2);
        for (x, y) in a.0.iter().zip(&b.0) {
            worst = worst.max((x - y).abs());
        }
    }
    let runtime = start.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-9 && runtime < 1.0,
        format!("max |obs deviation| {worst:.2e} over 1000 scenes; {runtime:.3} s"),
    )
}

fn criterion_3() -> Verdict {
    let track = track::default_figure8();
    let params = ModelParams::five_inch();
    let (_, hover_u) = hover(&params, Vector3::zeros());
    let mut rng = ChaCha8Rng::seed_from_u64(3003);
    let mut segments = 0;
    let mut worst: f64 = 0.0;
    let mut episode = 0u64;
    while segments < 1000 {
        let mut ep = env::reset(&track, &params, episode);
        episode += 1;
        let mut states = vec![ep.clone()];
        let mut rewards = Vec::new();
        while !ep.done {
            let u = MotorCommand::clipped(hover_u.values().map(|h| h + rng.random_range(-0.08..0.08)));
            let r = env::step(&mut ep, &u, &track, &params).unwrap();
            // crash endings pay the flat penalty instead of progress
            if matches!(ep.done_reason, DoneReason::Collision | DoneReason::NumericBlowup) {
                break;
            }
            rewards.push(r.reward);
            states.push(ep.clone());
        }
        if rewards.len() < 2 {
            continue;
        }
        for _ in 0..20 {
            let a = rng.random_range(0..rewards.len() - 1);
            let b = rng.random_range(a + 1..=rewards.len());
            // the reward of step k is measured against the target held before it
            if (a..b).any(|k| states[k].target_gate != states[a].target_gate) {
                continue;
            }
            let g = track.gate(states[a].target_gate).center;
            let lhs: f64 = (a..b)
                .map(|k| rewards[k] + RATE_PENALTY * states[k + 1].quad.rates.norm())
                .sum();
            let rhs = (states[a].quad.p - g).norm() - (states[b].quad.p - g).norm();
            worst = worst.max((lhs - rhs).abs());
            segments += 1;
        }
    }

    let mut q = QuadState::at_rest(Vector3::new(0.0, 0.0, -0.02), params.omega_min);
    q.v = Vector3::new(0.0, 0.0, 5.0);
    let mut ep = EpisodeState::new(q, 0);
    let crash = env::step(&mut ep, &MotorCommand::splat(0.0), &track, &params).unwrap();
    let crash_ok = crash.reward == -10.0 && COLLISION_REWARD == -10.0 && ep.done_reason == DoneReason::Collision;

    // gate 5 m ahead, 0.3 m of progress, body rates (3, 4, 0) with norm 5
    let hand = 0.3 - 0.001 * 5.0;
    let got = env::progress_reward(
        &Vector3::zeros(),
        &Vector3::new(0.3, 0.0, 0.0),
        &Vector3::new(5.0, 0.0, 0.0),
        &Vector3::new(3.0, 4.0, 0.0),
    );
    let rate_err = (got - hand).abs();

    verdict(
        worst <= 1e-10 && crash_ok && rate_err <= 1e-15,
        format!(
            "telescoping max err {worst:.2e} over {segments} segments; collision reward {}; \
             rate term {got} vs hand {hand}",
            crash.reward
        ),
    )
}

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4004);
    let gamma = 0.999;
    let t_len = 10;
    let mut worst: f64 = 0.0;
    let mut td_exact = true;
    for _ in 0..100 {
        let rewards: Vec<f64> = (0..t_len).map(|_| rng.random_range(-2.0..2.0)).collect();
        let values: Vec<f64> = (0..t_len).map(|_| rng.random_range(-5.0..5.0)).collect();
        let dones: Vec<bool> = (0..t_len).map(|_| rng.random_bool(0.2)).collect();
        // bootstrap value only on some terminal steps (timeouts)
        let trunc: Vec<f64> = dones
            .iter()
            .map(|&d| if d && rng.random_bool(0.5) { rng.random_range(-5.0..5.0) } else { 0.0 })
            .collect();
        let last = [rng.random_range(-5.0..5.0)];

        let (adv, _) = gae(&rewards, &values, &dones, &trunc, &last, 1, gamma, 1.0);
        for t in 0..t_len {
            let mut g = 0.0;
            let mut disc = 1.0;
            let mut ended = false;
            for k in t..t_len {
                g += disc * rewards[k];
                if dones[k] {
                    g += disc * gamma * trunc[k];
                    ended = true;
                    break;
                }
                disc *= gamma;
            }
            if !ended {
                g += disc * last[0];
            }
            worst = worst.max((adv[t] - (g - values[t])).abs());
        }

        let (adv0, _) = gae(&rewards, &values, &dones, &trunc, &last, 1, gamma, 0.0);
        for t in 0..t_len {
            let next = if dones[t] {
                0.0
            } else if t + 1 < t_len {
                values[t + 1]
            } else {
                last[0]
            };
            let delta = rewards[t] + gamma * (next + trunc[t]) - values[t];
            td_exact &= adv0[t] == delta;
        }
    }
    verdict(
        worst <= 1e-10 && td_exact,
        format!("lambda=1 max err {worst:.2e} over 100 sequences; lambda=0 equals TD residual exactly: {td_exact}"),
    )
}

fn criterion_5() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5005);
    let mut p = PolicyParams::<f64>::init(PolicyShape::default(), &mut rng);
    for x in p.as_mut_slice().iter_mut() {
        *x += rng.random_range(-0.05..0.05);
    }
    for s in p.log_std_mut() {
        *s = rng.random_range(-1.0..0.0);
    }
    let batch = 32;
    let obs: Vec<f64> = (0..batch * 20).map(|_| rng.random_range(-2.0..2.0)).collect();
    let actions: Vec<f64> = (0..batch * 4).map(|_| rng.random_range(-0.5..1.5)).collect();
    let out = p.forward_batch(&obs, batch);
    let ls = p.log_std().to_vec();
    let old_log_prob: Vec<f64> = (0..batch)
        .map(|i| gaussian_log_prob(&out.mean[i * 4..i * 4 + 4], &ls, &actions[i * 4..i * 4 + 4]) + rng.random_range(-0.4..0.4))
        .collect();
    let advantages: Vec<f64> = (0..batch).map(|_| rng.random_range(-1.5..1.5)).collect();
    let returns: Vec<f64> = (0..batch).map(|_| rng.random_range(-3.0..3.0)).collect();
    let mb = Minibatch {
        obs: &obs,
        actions: &actions,
        old_log_prob: &old_log_prob,
        advantages: &advantages,
        returns: &returns,
    };

    let actor_len: usize = p.actor_layers().iter().map(|l| l.param_count()).sum();
    let log_std = actor_len..actor_len + 4;
    let critic = actor_len + 4..p.len();
    let only = |policy: f64, value: f64, entropy: f64| PpoLossSpec {
        clip_range: 0.2,
        policy_coef: policy,
        value_coef: value,
        entropy_coef: entropy,
    };
    let terms = [
        ("policy", only(1.0, 0.0, 0.0), 0..actor_len + 4),
        ("value", only(0.0, 1.0, 0.0), critic),
        ("entropy", only(0.0, 0.0, 1.0), log_std.clone()),
    ];
    let h = 1e-6;
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, spec, block) in terms {
        let mut grad = vec![0.0; p.len()];
        p.ppo_loss_and_grad(&mb, &spec, &mut grad);
        // coordinates inside the block the term depends on, plus the log-std
        // entries and a spread over the whole vector
        let mut coords: Vec<usize> = (0..100).map(|_| rng.random_range(block.clone())).collect();
        coords.extend(log_std.clone());
        coords.extend((0..20).map(|_| rng.random_range(0..p.len())));
        let mut worst: f64 = 0.0;
        for &i in &coords {
            let mut q = p.clone();
            q.as_mut_slice()[i] += h;
            let up = q.ppo_loss(&mb, &spec).loss;
            q.as_mut_slice()[i] -= 2.0 * h;
            let down = q.ppo_loss(&mb, &spec).loss;
            let fd = (up - down) / (2.0 * h);
            let scale = fd.abs().max(grad[i].abs());
            // entries below 1e-6 are compared absolutely
            let err = (fd - grad[i]).abs() / scale.max(1e-6);
            worst = worst.max(err);
        }
        pass &= worst <= 1e-4;
        parts.push(format!("{name} {worst:.1e} ({} coords)", coords.len()));
    }
    let runtime = start.elapsed().as_secs_f64();
    verdict(
        pass && runtime < 30.0,
        format!("max relative error: {}; {runtime:.2} s", parts.join(", ")),
    )
}

fn criterion_6() -> Verdict {
    let start = Instant::now();
    let p = ModelParams::five_inch();
    let flight = simulate_chirp_flight(&p, 20.0, 6, 0.0).unwrap();
    let motor = simulate_motor_steps(&p, DEFAULT_DT).unwrap();
    let id = identify(&flight, &motor).unwrap().params;
    let mut pairs = vec![
        ("k_omega_hat", id.k_omega_hat, p.k_omega_hat),
        ("k_x_hat", id.k_x_hat, p.k_x_hat),
        ("k_y_hat", id.k_y_hat, p.k_y_hat),
        ("omega_min", id.omega_min, p.omega_min),
        ("omega_max", id.omega_max, p.omega_max),
        ("k_l", id.k_l, p.k_l),
    ];
    for i in 0..4 {
        pairs.push(("k_p_hat", id.k_p_hat[i], p.k_p_hat[i]));
        pairs.push(("k_q_hat", id.k_q_hat[i], p.k_q_hat[i]));
        pairs.push(("k_r_hat", id.k_r_hat[i], p.k_r_hat[i]));
        pairs.push(("k_rd_hat", id.k_rd_hat[i], p.k_rd_hat[i]));
    }
    let (worst_name, worst) = pairs
        .iter()
        .map(|(n, a, b)| (*n, rel(*a, *b)))
        .fold(("", 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
    let tau_err = rel(id.tau, p.tau);
    let runtime = start.elapsed().as_secs_f64();
    verdict(
        worst <= 0.005 && tau_err <= 0.01 && runtime < 10.0,
        format!(
            "worst coefficient {worst_name} rel err {worst:.2e}; tau rel err {tau_err:.2e}; \
             {} flight rows; {runtime:.2} s",
            flight.len()
        ),
    )
}

fn criterion_7() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7007);
    let within = |x: f64, lo: f64, hi: f64| (lo..=hi).contains(&x);
    let mut bad = 0usize;
    for _ in 0..100_000 {
        let s = sample_general(&mut rng);
        let mut ok = within(s.omega_min, 0.0, 500.0)
            && within(s.omega_max, 3000.0, 5000.0)
            && within(s.k_l, 0.0, 1.0)
            && s.k_l < 1.0
            && within(s.tau, 0.01, 0.1)
            && within(s.k_omega_hat, 10.0, 30.0)
            && within(s.k_x_hat, 0.1, 0.3)
            && within(s.k_y_hat, 0.1, 0.3)
            && within(s.k_r_hat[0], 20.0, 80.0)
            && within(s.k_rd_hat[0], 2.0, 8.0)
            && s.k_r_hat.iter().all(|&k| k == s.k_r_hat[0])
            && s.k_rd_hat.iter().all(|&k| k == s.k_rd_hat[0]);
        // per-rotor values are a shared U(200, 800) draw plus or minus up to 50
        for k in [s.k_p_hat, s.k_q_hat] {
            let lo = k.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = k.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            ok &= within(lo, 150.0, 850.0) && within(hi, 150.0, 850.0) && hi - lo <= 100.0;
        }
        bad += usize::from(!ok);
    }

    let mut identity = true;
    let mut k_l_max: f64 = 0.0;
    for base in [ModelParams::three_inch(), ModelParams::five_inch()] {
        let zero = RandomizationScheme::percentage(base, 0.0).unwrap();
        for _ in 0..1000 {
            identity &= zero.sample(&mut rng).unwrap() == base;
        }
        for p in [0.1, 0.2, 0.3, 0.9] {
            let scheme = RandomizationScheme::percentage(base, p).unwrap();
            for _ in 0..25_000 {
                k_l_max = k_l_max.max(scheme.sample(&mut rng).unwrap().k_l);
            }
        }
    }
    verdict(
        bad == 0 && identity && k_l_max < 1.0,
        format!(
            "{bad} of 100000 general samples out of bounds; p=0 identity: {identity}; \
             max k_l under percentage schemes {k_l_max:.6}"
        ),
    )
}

struct TrainedRun {
    policy: PolicyParams<f32>,
    first_quartile: f64,
    last_quartile: f64,
    seconds: f64,
}

fn train_desk(params: ModelParams) -> TrainedRun {
    let start = Instant::now();
    let cfg = PpoConfig {
        seed: TRAIN_SEED,
        ..PpoConfig::desk()
    };
    let envs = VecEnv::new(
        track::default_figure8(),
        RandomizationScheme::Fixed(params),
        cfg.n_envs,
        cfg.seed,
    )
    .unwrap();
    let out = ppo::train(envs, &cfg, None, |_| {}).unwrap();
    let rewards: Vec<f64> = out.curve.iter().map(|r| r.mean_ep_reward).collect();
    let q = rewards.len() / 4;
    let mean = |xs: &[f64]| {
        let finite: Vec<f64> = xs.iter().cloned().filter(|x| x.is_finite()).collect();
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    TrainedRun {
        policy: out.policy,
        first_quartile: mean(&rewards[..q]),
        last_quartile: mean(&rewards[rewards.len() - q..]),
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn evaluate_on_five_inch(policy: &PolicyParams<f32>, net: &str) -> EvalReport {
    let spec = EnvSpec::fixed("5inch-fixed", track::default_figure8(), ModelParams::five_inch());
    eval::evaluate(policy, net, &spec, 100, EVAL_SEED, &EvalOptions::default()).unwrap()
}

fn criterion_8(run: &TrainedRun) -> Verdict {
    let a = evaluate_on_five_inch(&run.policy, "5inch").aggregate();
    verdict(
        a.gates >= 5.0 && a.ep_rew >= 20.0 && run.last_quartile > run.first_quartile,
        format!(
            "seed {TRAIN_SEED}: gates {:.2}, ep_rew {:.2}, crash {:.1}%; curve quartiles {:.2} -> {:.2}; \
             training {:.0} s",
            a.gates, a.ep_rew, a.crash_pct, run.first_quartile, run.last_quartile, run.seconds
        ),
    )
}

fn criterion_9(run: &TrainedRun) -> Verdict {
    let a = evaluate_on_five_inch(&run.policy, "3inch").aggregate();
    let spec = EnvSpec::fixed("5inch-fixed", track::default_figure8(), ModelParams::five_inch());
    let with_miss = EvalOptions {
        crash_includes_miss: true,
        ..EvalOptions::default()
    };
    let a_miss = eval::evaluate(&run.policy, "3inch", &spec, 100, EVAL_SEED, &with_miss)
        .unwrap()
        .aggregate();
    let own_spec = EnvSpec::fixed("3inch-fixed", track::default_figure8(), ModelParams::three_inch());
    let own = eval::evaluate(&run.policy, "3inch", &own_spec, 100, EVAL_SEED, &EvalOptions::default())
        .unwrap()
        .aggregate();
    verdict(
        a.crash_pct >= 80.0,
        format!(
            "3-inch policy on 5-inch: crash {:.1}% (collisions only), {:.1}% counting gate misses, \
             gates {:.2}, ep_len {:.1}, ep_rew {:.2}; on its own 3-inch env: crash {:.1}%, gates {:.2}, \
             ep_rew {:.2}; training {:.0} s",
            a.crash_pct, a_miss.crash_pct, a.gates, a.ep_len, a.ep_rew, own.crash_pct, own.gates, own.ep_rew, run.seconds
        ),
    )
}

fn criterion_10() -> Verdict {
    let cfg = PpoConfig {
        n_envs: 8,
        rollout_length: 64,
        minibatch_size: 128,
        epochs_per_update: 3,
        total_steps: 8 * 64 * 6,
        hidden: vec![32, 32, 32],
        parallel: false,
        seed: 10,
        ..PpoConfig::default()
    };
    let scheme = RandomizationScheme::Fixed(ModelParams::five_inch());
    let run = || {
        let envs = VecEnv::new(track::default_figure8(), scheme.clone(), cfg.n_envs, cfg.seed).unwrap();
        ppo::train(envs, &cfg, None, |_| {}).unwrap()
    };
    let (a, b) = (run(), run());
    let curve_bits = |c: &[ppo::CurveRow]| -> Vec<u64> {
        c.iter()
            .flat_map(|r| {
                [r.mean_ep_reward, r.mean_ep_len, r.clip_frac, r.approx_kl, r.loss_pi, r.loss_v].map(f64::to_bits)
            })
            .collect()
    };
    let curves_equal = curve_bits(&a.curve) == curve_bits(&b.curve);
    let params_equal = a.policy.as_slice().iter().map(|x| x.to_bits()).eq(b.policy.as_slice().iter().map(|x| x.to_bits()));

    let spec = EnvSpec {
        name: "5inch-general".into(),
        track: track::default_figure8(),
        scheme: RandomizationScheme::General,
    };
    let opts = EvalOptions {
        record_trajectories: 2,
        ..EvalOptions::default()
    };
    let eval_with = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| eval::evaluate(&a.policy, "net", &spec, 64, 99, &opts).unwrap())
    };
    let serial = eval::evaluate(
        &a.policy,
        "net",
        &spec,
        64,
        99,
        &EvalOptions {
            parallel: false,
            ..opts
        },
    )
    .unwrap();
    let reports_equal = [1, 2, 4, 7].iter().all(|&n| eval_with(n) == serial);
    verdict(
        curves_equal && params_equal && reports_equal,
        format!(
            "serial training curves identical: {curves_equal}; checkpoints bitwise identical: {params_equal}; \
             eval reports identical at 1/2/4/7 threads and serial: {reports_equal}"
        ),
    )
}

fn main() -> ExitCode {
    let quick = std::env::var_os("QUADRACE_SKIP_TRAINING").is_some();
    let mut failed = false;
    let mut report = |id: u32, soft: bool, v: Verdict| {
        let tag = if v.pass { "PASS" } else { "FAIL" };
        let note = if soft && !v.pass { " (soft)" } else { "" };
        println!("criterion {id:>2}: {tag}{note}  {}", v.detail);
        failed |= !v.pass && !soft;
    };
    report(1, false, criterion_1());
    report(2, false, criterion_2());
    report(3, false, criterion_3());
    report(4, false, criterion_4());
    report(5, false, criterion_5());
    report(6, false, criterion_6());
    report(7, false, criterion_7());
    if quick {
        println!("criterion  8: SKIPPED  QUADRACE_SKIP_TRAINING is set");
        println!("criterion  9: SKIPPED  QUADRACE_SKIP_TRAINING is set");
    } else {
        report(8, false, criterion_8(&train_desk(ModelParams::five_inch())));
        report(9, true, criterion_9(&train_desk(ModelParams::three_inch())));
    }
    report(10, false, criterion_10());
    if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
