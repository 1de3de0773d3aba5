//! Parametric quadcopter model.
//!
//! World frame is NED (x forward, y right, z down), gravity is `+g` along
//! world z and rotor thrust acts along body `-z`. Attitude uses ZYX
//! (yaw-pitch-roll) Euler angles. Every force/moment coefficient is stored in
//! its normalized form (scaled by `omega_max` or `omega_max^2`) so that
//! platforms with very different rotor speeds share comparable numbers.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::ops::{Add, Mul};
use std::path::Path;

use nalgebra::{Matrix3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

pub const GRAVITY: f64 = 9.81;

/// Fixed integration step: 1200 steps make a 12 s episode.
pub const DEFAULT_DT: f64 = 0.01;

/// Pitch is clamped to `pi/2 - GIMBAL_MARGIN` inside the Euler-rate matrix.
pub const GIMBAL_MARGIN: f64 = 1e-3;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("pitch {theta} rad is at the Euler singularity clamp")]
    NearGimbalLock { theta: f64 },
    #[error("state became non-finite during integration")]
    NonFiniteState,
    #[error("invalid model parameters: {0}")]
    InvalidParams(String),
    #[error("motor command {0} outside [0, 1]")]
    InvalidCommand(f64),
    #[error("time step must be positive, got {0}")]
    InvalidStep(f64),
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Normalized model parameters of a single airframe.
///
/// The `*_hat` coefficients are the physical ones multiplied by
/// `omega_max^2` (thrust, roll, pitch) or `omega_max` (drag, yaw).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "ParamsFile", try_from = "ParamsFile")]
pub struct ModelParams {
    pub k_omega_hat: f64,
    pub k_x_hat: f64,
    pub k_y_hat: f64,
    /// Roll effectiveness of rotors 1..4.
    pub k_p_hat: [f64; 4],
    /// Pitch effectiveness of rotors 1..4.
    pub k_q_hat: [f64; 4],
    /// Yaw effectiveness of rotor speed (`k_r1..k_r4`).
    pub k_r_hat: [f64; 4],
    /// Yaw effectiveness of rotor acceleration (`k_r5..k_r8`).
    pub k_rd_hat: [f64; 4],
    pub omega_min: f64,
    pub omega_max: f64,
    pub k_l: f64,
    pub tau: f64,
}

/// The same parameters with physical (un-normalized) coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalParams {
    pub k_omega: f64,
    pub k_x: f64,
    pub k_y: f64,
    pub k_p: [f64; 4],
    pub k_q: [f64; 4],
    pub k_r: [f64; 4],
    pub k_rd: [f64; 4],
    pub omega_min: f64,
    pub omega_max: f64,
    pub k_l: f64,
    pub tau: f64,
}

impl ModelParams {
    /// Identified parameters of the 3-inch racer.
    pub fn three_inch() -> Self {
        Self {
            k_omega_hat: 14.3,
            k_x_hat: 0.16,
            k_y_hat: 0.18,
            k_p_hat: [615.0, 598.0, 650.0, 479.0],
            k_q_hat: [217.0, 238.0, 280.0, 196.0],
            k_r_hat: [47.1; 4],
            k_rd_hat: [5.57; 4],
            omega_min: 305.4,
            omega_max: 4887.57,
            k_l: 0.84,
            tau: 0.04,
        }
    }

    /// Identified parameters of the 5-inch racer.
    pub fn five_inch() -> Self {
        Self {
            k_omega_hat: 27.1,
            k_x_hat: 0.16,
            k_y_hat: 0.24,
            k_p_hat: [711.0, 718.0, 691.0, 724.0],
            k_q_hat: [573.0, 637.0, 548.0, 640.0],
            k_r_hat: [35.2; 4],
            k_rd_hat: [6.49; 4],
            omega_min: 238.49,
            omega_max: 3295.5,
            k_l: 0.95,
            tau: 0.04,
        }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let bad = |msg: String| Err(DynamicsError::InvalidParams(msg));
        let coeffs = [self.k_omega_hat, self.k_x_hat, self.k_y_hat]
            .into_iter()
            .chain(self.k_p_hat)
            .chain(self.k_q_hat)
            .chain(self.k_r_hat)
            .chain(self.k_rd_hat);
        for c in coeffs {
            if !c.is_finite() || c < 0.0 {
                return bad(format!("coefficient {c} must be finite and non-negative"));
            }
        }
        if !(self.omega_min.is_finite() && self.omega_max.is_finite()) {
            return bad("rotor limits must be finite".into());
        }
        if !(self.omega_min >= 0.0 && self.omega_max > self.omega_min) {
            return bad(format!(
                "need omega_max > omega_min >= 0, got [{}, {}]",
                self.omega_min, self.omega_max
            ));
        }
        if !(0.0..1.0).contains(&self.k_l) {
            return bad(format!("k_l = {} outside [0, 1)", self.k_l));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return bad(format!("tau = {} must be positive", self.tau));
        }
        Ok(())
    }

    pub fn denormalize(&self) -> PhysicalParams {
        let w = self.omega_max;
        let w2 = w * w;
        PhysicalParams {
            k_omega: self.k_omega_hat / w2,
            k_x: self.k_x_hat / w,
            k_y: self.k_y_hat / w,
            k_p: self.k_p_hat.map(|k| k / w2),
            k_q: self.k_q_hat.map(|k| k / w2),
            k_r: self.k_r_hat.map(|k| k / w),
            k_rd: self.k_rd_hat.map(|k| k / w),
            omega_min: self.omega_min,
            omega_max: self.omega_max,
            k_l: self.k_l,
            tau: self.tau,
        }
    }

    /// Rotor speed at which total thrust balances gravity.
    pub fn hover_rotor_speed(&self) -> f64 {
        self.omega_max * (GRAVITY / (4.0 * self.k_omega_hat)).sqrt()
    }

    pub fn load_json(path: impl AsRef<Path>) -> anyhow::Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
        let params: Self = serde_json::from_str(&text)
            .map_err(|e| anyhow::anyhow!("parsing {}: {e}", path.display()))?;
        Ok(params)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> anyhow::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

impl PhysicalParams {
    pub fn normalize(&self) -> ModelParams {
        let w = self.omega_max;
        let w2 = w * w;
        ModelParams {
            k_omega_hat: self.k_omega * w2,
            k_x_hat: self.k_x * w,
            k_y_hat: self.k_y * w,
            k_p_hat: self.k_p.map(|k| k * w2),
            k_q_hat: self.k_q.map(|k| k * w2),
            k_r_hat: self.k_r.map(|k| k * w),
            k_rd_hat: self.k_rd.map(|k| k * w),
            omega_min: self.omega_min,
            omega_max: self.omega_max,
            k_l: self.k_l,
            tau: self.tau,
        }
    }
}

/// Flat on-disk layout with one key per normalized symbol.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsFile {
    k_omega_hat: f64,
    k_x_hat: f64,
    k_y_hat: f64,
    k_p1_hat: f64,
    k_p2_hat: f64,
    k_p3_hat: f64,
    k_p4_hat: f64,
    k_q1_hat: f64,
    k_q2_hat: f64,
    k_q3_hat: f64,
    k_q4_hat: f64,
    k_r1_hat: f64,
    k_r2_hat: f64,
    k_r3_hat: f64,
    k_r4_hat: f64,
    k_r5_hat: f64,
    k_r6_hat: f64,
    k_r7_hat: f64,
    k_r8_hat: f64,
    omega_min: f64,
    omega_max: f64,
    k_l: f64,
    tau: f64,
}

impl From<ModelParams> for ParamsFile {
    fn from(p: ModelParams) -> Self {
        Self {
            k_omega_hat: p.k_omega_hat,
            k_x_hat: p.k_x_hat,
            k_y_hat: p.k_y_hat,
            k_p1_hat: p.k_p_hat[0],
            k_p2_hat: p.k_p_hat[1],
            k_p3_hat: p.k_p_hat[2],
            k_p4_hat: p.k_p_hat[3],
            k_q1_hat: p.k_q_hat[0],
            k_q2_hat: p.k_q_hat[1],
            k_q3_hat: p.k_q_hat[2],
            k_q4_hat: p.k_q_hat[3],
            k_r1_hat: p.k_r_hat[0],
            k_r2_hat: p.k_r_hat[1],
            k_r3_hat: p.k_r_hat[2],
            k_r4_hat: p.k_r_hat[3],
            k_r5_hat: p.k_rd_hat[0],
            k_r6_hat: p.k_rd_hat[1],
            k_r7_hat: p.k_rd_hat[2],
            k_r8_hat: p.k_rd_hat[3],
            omega_min: p.omega_min,
            omega_max: p.omega_max,
            k_l: p.k_l,
            tau: p.tau,
        }
    }
}

impl TryFrom<ParamsFile> for ModelParams {
    type Error = DynamicsError;

    fn try_from(f: ParamsFile) -> Result<Self, Self::Error> {
        let p = ModelParams {
            k_omega_hat: f.k_omega_hat,
            k_x_hat: f.k_x_hat,
            k_y_hat: f.k_y_hat,
            k_p_hat: [f.k_p1_hat, f.k_p2_hat, f.k_p3_hat, f.k_p4_hat],
            k_q_hat: [f.k_q1_hat, f.k_q2_hat, f.k_q3_hat, f.k_q4_hat],
            k_r_hat: [f.k_r1_hat, f.k_r2_hat, f.k_r3_hat, f.k_r4_hat],
            k_rd_hat: [f.k_r5_hat, f.k_r6_hat, f.k_r7_hat, f.k_r8_hat],
            omega_min: f.omega_min,
            omega_max: f.omega_max,
            k_l: f.k_l,
            tau: f.tau,
        };
        p.validate()?;
        Ok(p)
    }
}

/// Full quadcopter state (16 scalars).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct QuadState {
    /// World position, m.
    pub p: Vector3<f64>,
    /// World velocity, m/s.
    pub v: Vector3<f64>,
    /// Roll, pitch, yaw, rad.
    pub euler: Vector3<f64>,
    /// Body rates, rad/s.
    pub rates: Vector3<f64>,
    /// Rotor speeds, rad/s.
    pub rotor: Vector4<f64>,
}

impl QuadState {
    /// Level, motionless state with all rotors at `rotor_speed`.
    pub fn at_rest(p: Vector3<f64>, rotor_speed: f64) -> Self {
        Self {
            p,
            rotor: Vector4::repeat(rotor_speed),
            ..Default::default()
        }
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|x| x.is_finite())
    }

    /// Flattened `[p, v, euler, rates, rotor]`.
    pub fn as_array(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        out[0..3].copy_from_slice(self.p.as_slice());
        out[3..6].copy_from_slice(self.v.as_slice());
        out[6..9].copy_from_slice(self.euler.as_slice());
        out[9..12].copy_from_slice(self.rates.as_slice());
        out[12..16].copy_from_slice(self.rotor.as_slice());
        out
    }
}

impl Add for QuadState {
    type Output = QuadState;
    fn add(self, o: QuadState) -> QuadState {
        QuadState {
            p: self.p + o.p,
            v: self.v + o.v,
            euler: self.euler + o.euler,
            rates: self.rates + o.rates,
            rotor: self.rotor + o.rotor,
        }
    }
}

impl Mul<f64> for QuadState {
    type Output = QuadState;
    fn mul(self, s: f64) -> QuadState {
        QuadState {
            p: self.p * s,
            v: self.v * s,
            euler: self.euler * s,
            rates: self.rates * s,
            rotor: self.rotor * s,
        }
    }
}

/// Normalized motor commands, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MotorCommand([f64; 4]);

impl MotorCommand {
    pub fn new(u: [f64; 4]) -> Result<Self, DynamicsError> {
        for &x in &u {
            if !(0.0..=1.0).contains(&x) {
                return Err(DynamicsError::InvalidCommand(x));
            }
        }
        Ok(Self(u))
    }

    /// Clips each entry into `[0, 1]`; NaN maps to 0.
    pub fn clipped(u: [f64; 4]) -> Self {
        Self(u.map(|x| if x.is_nan() { 0.0 } else { x.clamp(0.0, 1.0) }))
    }

    pub fn splat(u: f64) -> Self {
        Self::clipped([u; 4])
    }

    pub fn values(&self) -> [f64; 4] {
        self.0
    }
}

impl fmt::Display for MotorCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c, d] = self.0;
        write!(f, "[{a:.3}, {b:.3}, {c:.3}, {d:.3}]")
    }
}

/// Commanded rotor speed for a normalized command.
pub fn steady_state_motor_speed(u: &MotorCommand, params: &ModelParams) -> Vector4<f64> {
    let span = params.omega_max - params.omega_min;
    let k_l = params.k_l;
    Vector4::from_fn(|i, _| {
        let ui = u.0[i];
        span * (k_l * ui * ui + (1.0 - k_l) * ui).sqrt() + params.omega_min
    })
}

/// Inverse of [`steady_state_motor_speed`] for a single rotor.
pub fn command_for_rotor_speed(omega: f64, params: &ModelParams) -> f64 {
    let s = ((omega - params.omega_min) / (params.omega_max - params.omega_min)).clamp(0.0, 1.0);
    let s2 = s * s;
    let k_l = params.k_l;
    if k_l < 1e-12 {
        return s2;
    }
    let b = 1.0 - k_l;
    ((-b + (b * b + 4.0 * k_l * s2).sqrt()) / (2.0 * k_l)).clamp(0.0, 1.0)
}

/// Per-rotor speeds giving level hover: thrust equal to gravity and zero
/// roll, pitch and yaw acceleration. Newton's method on the four balance
/// equations; `None` if it does not converge inside the rotor limits.
pub fn hover_rotor_speeds(params: &ModelParams) -> Option<Vector4<f64>> {
    use nalgebra::Matrix4;
    let sp = [-1.0, -1.0, 1.0, 1.0];
    let sq = [-1.0, 1.0, -1.0, 1.0];
    let sr = [-1.0, 1.0, 1.0, -1.0];
    let mut w = Vector4::repeat(params.hover_rotor_speed() / params.omega_max);
    for _ in 0..50 {
        let mut f = Vector4::zeros();
        let mut jac = Matrix4::zeros();
        for i in 0..4 {
            f[0] += params.k_omega_hat * w[i] * w[i];
            f[1] += sp[i] * params.k_p_hat[i] * w[i] * w[i];
            f[2] += sq[i] * params.k_q_hat[i] * w[i] * w[i];
            f[3] += sr[i] * params.k_r_hat[i] * w[i];
            jac[(0, i)] = 2.0 * params.k_omega_hat * w[i];
            jac[(1, i)] = 2.0 * sp[i] * params.k_p_hat[i] * w[i];
            jac[(2, i)] = 2.0 * sq[i] * params.k_q_hat[i] * w[i];
            jac[(3, i)] = sr[i] * params.k_r_hat[i];
        }
        f[0] -= GRAVITY;
        if f.amax() < 1e-13 {
            let speeds = w * params.omega_max;
            let inside = speeds
                .iter()
                .all(|&x| x >= params.omega_min && x <= params.omega_max);
            return inside.then_some(speeds);
        }
        w -= jac.lu().solve(&f)?;
    }
    None
}

/// Body-to-world rotation for ZYX Euler angles.
pub fn rotation_matrix(euler: &Vector3<f64>) -> Matrix3<f64> {
    let (sr, cr) = euler.x.sin_cos();
    let (sp, cp) = euler.y.sin_cos();
    let (sy, cy) = euler.z.sin_cos();
    Matrix3::new(
        cy * cp,
        cy * sp * sr - sy * cr,
        cy * sp * cr + sy * sr,
        sy * cp,
        sy * sp * sr + cy * cr,
        sy * sp * cr - cy * sr,
        -sp,
        cp * sr,
        cp * cr,
    )
}

fn gimbal_limit() -> f64 {
    FRAC_PI_2 - GIMBAL_MARGIN
}

/// True when pitch sits at or beyond the Euler-rate clamp.
pub fn at_gimbal_limit(euler: &Vector3<f64>) -> bool {
    euler.y.abs() >= gimbal_limit()
}

/// Body-rate to Euler-rate matrix with pitch clamped away from the
/// singularity. The flag reports whether the clamp was active.
pub fn euler_rate_matrix_clamped(euler: &Vector3<f64>) -> (Matrix3<f64>, bool) {
    let limit = gimbal_limit();
    let clamped = euler.y.abs() >= limit;
    let theta = euler.y.clamp(-limit, limit);
    let (sr, cr) = euler.x.sin_cos();
    let (st, ct) = theta.sin_cos();
    let tt = st / ct;
    let q = Matrix3::new(
        1.0,
        sr * tt,
        cr * tt,
        0.0,
        cr,
        -sr,
        0.0,
        sr / ct,
        cr / ct,
    );
    (q, clamped)
}

/// Body-rate to Euler-rate matrix; refuses states at the pitch clamp.
pub fn euler_rate_matrix(euler: &Vector3<f64>) -> Result<Matrix3<f64>, DynamicsError> {
    match euler_rate_matrix_clamped(euler) {
        (_, true) => Err(DynamicsError::NearGimbalLock { theta: euler.y }),
        (q, false) => Ok(q),
    }
}

/// Specific force in the body frame, m/s^2.
pub fn specific_force(state: &QuadState, params: &ModelParams) -> Vector3<f64> {
    let r = rotation_matrix(&state.euler);
    let v_body = r.transpose() * state.v;
    body_specific_force(&v_body, &state.rotor, params)
}

/// Specific force from an already rotated body velocity.
pub fn body_specific_force(
    v_body: &Vector3<f64>,
    rotor: &Vector4<f64>,
    params: &ModelParams,
) -> Vector3<f64> {
    // work in rotor speeds scaled by omega_max so the hat coefficients apply directly
    let inv = 1.0 / params.omega_max;
    let sum_w = rotor.sum() * inv;
    let sum_w2 = rotor.iter().map(|w| (w * inv) * (w * inv)).sum::<f64>();
    Vector3::new(
        -params.k_x_hat * v_body.x * sum_w,
        -params.k_y_hat * v_body.y * sum_w,
        -params.k_omega_hat * sum_w2,
    )
}

/// Angular acceleration (rad/s^2) produced by the rotors.
pub fn moment(state: &QuadState, omega_dot: &Vector4<f64>, params: &ModelParams) -> Vector3<f64> {
    let inv = 1.0 / params.omega_max;
    let w = state.rotor * inv;
    let wd = omega_dot * inv;
    let w2 = w.component_mul(&w);
    let kp = &params.k_p_hat;
    let kq = &params.k_q_hat;
    let kr = &params.k_r_hat;
    let krd = &params.k_rd_hat;
    Vector3::new(
        -kp[0] * w2[0] - kp[1] * w2[1] + kp[2] * w2[2] + kp[3] * w2[3],
        -kq[0] * w2[0] + kq[1] * w2[1] - kq[2] * w2[2] + kq[3] * w2[3],
        -kr[0] * w[0] + kr[1] * w[1] + kr[2] * w[2] - kr[3] * w[3] - krd[0] * wd[0]
            + krd[1] * wd[1]
            + krd[2] * wd[2]
            - krd[3] * wd[3],
    )
}

/// First-order rotor lag toward the commanded speed.
pub fn rotor_acceleration(
    state: &QuadState,
    u: &MotorCommand,
    params: &ModelParams,
) -> Vector4<f64> {
    (steady_state_motor_speed(u, params) - state.rotor) / params.tau
}

fn derivative_with_q(
    state: &QuadState,
    q: &Matrix3<f64>,
    omega_c: &Vector4<f64>,
    params: &ModelParams,
) -> QuadState {
    let r = rotation_matrix(&state.euler);
    let v_body = r.transpose() * state.v;
    let force = body_specific_force(&v_body, &state.rotor, params);
    let omega_dot = (omega_c - state.rotor) / params.tau;
    QuadState {
        p: state.v,
        v: Vector3::new(0.0, 0.0, GRAVITY) + r * force,
        euler: q * state.rates,
        rates: moment(state, &omega_dot, params),
        rotor: omega_dot,
    }
}

/// Time derivative of the full state.
pub fn state_derivative(
    state: &QuadState,
    u: &MotorCommand,
    params: &ModelParams,
) -> Result<QuadState, DynamicsError> {
    let q = euler_rate_matrix(&state.euler)?;
    let omega_c = steady_state_motor_speed(u, params);
    Ok(derivative_with_q(state, &q, &omega_c, params))
}

fn derivative_clamped(state: &QuadState, omega_c: &Vector4<f64>, params: &ModelParams) -> QuadState {
    let (q, _) = euler_rate_matrix_clamped(&state.euler);
    derivative_with_q(state, &q, omega_c, params)
}

/// One classic RK4 step with the command held constant.
///
/// Roll and yaw are wrapped into `(-pi, pi]` and rotor speeds clamped to the
/// motor limits after the full step. Pitch at the singularity is clamped
/// inside the Euler-rate matrix; callers check [`at_gimbal_limit`].
pub fn integrate_step(
    state: &QuadState,
    u: &MotorCommand,
    params: &ModelParams,
    dt: f64,
) -> Result<QuadState, DynamicsError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(DynamicsError::InvalidStep(dt));
    }
    let omega_c = steady_state_motor_speed(u, params);
    let k1 = derivative_clamped(state, &omega_c, params);
    let k2 = derivative_clamped(&(*state + k1 * (0.5 * dt)), &omega_c, params);
    let k3 = derivative_clamped(&(*state + k2 * (0.5 * dt)), &omega_c, params);
    let k4 = derivative_clamped(&(*state + k3 * dt), &omega_c, params);
    let mut next = *state + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    next.euler.x = wrap_angle(next.euler.x);
    next.euler.z = wrap_angle(next.euler.z);
    next.rotor = next
        .rotor
        .map(|w| w.clamp(params.omega_min, params.omega_max));
    if !next.is_finite() {
        return Err(DynamicsError::NonFiniteState);
    }
    Ok(next)
}
