//! Least-squares identification of the normalized model from flight logs,
//! plus simulated excitation flights to test it.

use std::f64::consts::PI;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, Matrix4, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    body_specific_force, command_for_rotor_speed, hover_rotor_speeds, integrate_step, moment, rotation_matrix,
    steady_state_motor_speed, DynamicsError, ModelParams, MotorCommand, QuadState,
};
use crate::env::TRAJECTORY_HEADER;

/// Gram matrices of the column-equilibrated regressors above this
/// condition number are rejected.
pub const MAX_CONDITION: f64 = 1e10;

/// Smallest command span a motor log must cover.
pub const MIN_COMMAND_SPAN: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum SysidError {
    #[error("regressors for {axis} are rank deficient (condition {condition:.3e})")]
    RankDeficient { axis: String, condition: f64 },
    #[error("insufficient excitation: {0}")]
    InsufficientExcitation(String),
    #[error("log needs at least {needed} rows, has {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("invalid log: {0}")]
    InvalidLog(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One sample of a flight log. Velocities are world-frame as in the
/// trajectory log; `force` is the measured body-frame specific force
/// without gravity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub state: QuadState,
    pub command: [f64; 4],
    pub force: Vector3<f64>,
    pub rates_dot: Option<Vector3<f64>>,
    pub rotor_dot: Option<Vector4<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlightLog {
    pub rows: Vec<LogRow>,
}

const DERIV_COLUMNS: &str = "p_rate_dot,q_rate_dot,r_rate_dot,w1_dot,w2_dot,w3_dot,w4_dot";

impl FlightLog {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn validate(&self) -> Result<(), SysidError> {
        for w in self.rows.windows(2) {
            if !(w[1].t > w[0].t) {
                return Err(SysidError::InvalidLog(format!("time not increasing at t = {}", w[1].t)));
            }
        }
        for r in &self.rows {
            if !(r.t.is_finite() && r.state.is_finite() && r.force.iter().all(|x| x.is_finite())) {
                return Err(SysidError::InvalidLog(format!("non-finite entry at t = {}", r.t)));
            }
        }
        Ok(())
    }

    /// Drops derivative columns so they are rebuilt by finite differences.
    pub fn without_derivatives(mut self) -> Self {
        for r in &mut self.rows {
            r.rates_dot = None;
            r.rotor_dot = None;
        }
        self
    }

    /// Keeps every `k`-th row.
    pub fn subsample(&self, k: usize) -> Self {
        Self {
            rows: self.rows.iter().step_by(k.max(1)).copied().collect(),
        }
    }

    /// Trajectory-log columns, then `fx,fy,fz`, then the derivative
    /// columns when every row has them.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let with_deriv = self.rows.iter().all(|r| r.rates_dot.is_some() && r.rotor_dot.is_some());
        write!(out, "{TRAJECTORY_HEADER},fx,fy,fz")?;
        if with_deriv {
            write!(out, ",{DERIV_COLUMNS}")?;
        }
        writeln!(out)?;
        for r in &self.rows {
            let mut line = r.t.to_string();
            for x in r.state.as_array() {
                line.push_str(&format!(",{x}"));
            }
            for x in r.command {
                line.push_str(&format!(",{x}"));
            }
            line.push_str(",0,0,0");
            for x in r.force.iter() {
                line.push_str(&format!(",{x}"));
            }
            if let (true, Some(a), Some(b)) = (with_deriv, r.rates_dot, r.rotor_dot) {
                for x in a.iter().chain(b.iter()) {
                    line.push_str(&format!(",{x}"));
                }
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, SysidError> {
        let mut rdr = csv::Reader::from_reader(input);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let col = |name: &str| header.iter().position(|h| h == name);
        let need = |name: &str| col(name).ok_or_else(|| SysidError::InvalidLog(format!("missing column {name}")));
        let names = [
            "t", "px", "py", "pz", "vx", "vy", "vz", "phi", "theta", "psi", "p_rate", "q_rate", "r_rate", "w1", "w2",
            "w3", "w4", "u1", "u2", "u3", "u4", "fx", "fy", "fz",
        ];
        let idx: Vec<usize> = names.iter().map(|n| need(n)).collect::<Result<_, _>>()?;
        let deriv: Option<Vec<usize>> = DERIV_COLUMNS.split(',').map(col).collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let f = |i: usize| -> Result<f64, SysidError> {
                rec.get(i)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| SysidError::InvalidLog(format!("bad number in column {}", header[i])))
            };
            let v: Vec<f64> = idx.iter().map(|&i| f(i)).collect::<Result<_, _>>()?;
            let d: Option<Vec<f64>> = match &deriv {
                Some(cols) => Some(cols.iter().map(|&i| f(i)).collect::<Result<_, _>>()?),
                None => None,
            };
            rows.push(LogRow {
                t: v[0],
                state: QuadState {
                    p: Vector3::new(v[1], v[2], v[3]),
                    v: Vector3::new(v[4], v[5], v[6]),
                    euler: Vector3::new(v[7], v[8], v[9]),
                    rates: Vector3::new(v[10], v[11], v[12]),
                    rotor: Vector4::new(v[13], v[14], v[15], v[16]),
                },
                command: [v[17], v[18], v[19], v[20]],
                force: Vector3::new(v[21], v[22], v[23]),
                rates_dot: d.as_ref().map(|d| Vector3::new(d[0], d[1], d[2])),
                rotor_dot: d.as_ref().map(|d| Vector4::new(d[3], d[4], d[5], d[6])),
            });
        }
        let log = Self { rows };
        log.validate()?;
        Ok(log)
    }

    /// Rows usable for regression with angular and rotor accelerations.
    /// Missing derivatives come from 3-point central differences, which
    /// drops the first and last row.
    fn with_derivatives(&self) -> Vec<(LogRow, Vector3<f64>, Vector4<f64>)> {
        let rows = &self.rows;
        let exact = rows.iter().all(|r| r.rates_dot.is_some() && r.rotor_dot.is_some());
        if exact {
            return rows
                .iter()
                .map(|r| (*r, r.rates_dot.unwrap_or_default(), r.rotor_dot.unwrap_or_default()))
                .collect();
        }
        (1..rows.len().saturating_sub(1))
            .map(|k| {
                let (a, b) = (&rows[k - 1], &rows[k + 1]);
                let h = b.t - a.t;
                (
                    rows[k],
                    (b.state.rates - a.state.rates) / h,
                    (b.state.rotor - a.state.rotor) / h,
                )
            })
            .collect()
    }
}

/// Solves `min |A x - b|` after scaling every column of `A` to unit norm.
/// Returns `(x, rms residual)`.
fn least_squares(axis: &str, a: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, f64), SysidError> {
    let (rows, cols) = a.shape();
    if rows < 10 * cols {
        return Err(SysidError::TooFewRows {
            needed: 10 * cols,
            got: rows,
        });
    }
    let norms: Vec<f64> = (0..cols).map(|j| a.column(j).norm()).collect();
    let max_norm = norms.iter().cloned().fold(0.0, f64::max);
    if norms.iter().any(|&n| !(n > 1e-12 * max_norm.max(1e-300))) || max_norm == 0.0 {
        return Err(SysidError::RankDeficient {
            axis: axis.into(),
            condition: f64::INFINITY,
        });
    }
    let mut scaled = a.clone();
    for (j, n) in norms.iter().enumerate() {
        scaled.column_mut(j).scale_mut(1.0 / n);
    }
    let gram = scaled.transpose() * &scaled;
    let sv = gram.singular_values();
    let condition = sv.max() / sv.min();
    if !(condition <= MAX_CONDITION) {
        return Err(SysidError::RankDeficient {
            axis: axis.into(),
            condition,
        });
    }
    let svd = scaled.clone().svd(true, true);
    let y = svd
        .solve(b, 0.0)
        .map_err(|e| SysidError::InvalidLog(e.to_string()))?;
    let x = DVector::from_iterator(cols, y.iter().zip(&norms).map(|(v, n)| v / n));
    let rms = ((a * &x - b).norm_squared() / rows as f64).sqrt();
    Ok((x, rms))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForceFit {
    pub k_omega_hat: f64,
    pub k_x_hat: f64,
    pub k_y_hat: f64,
    /// RMS residual per body axis.
    pub rms: [f64; 3],
}

/// Per-axis regressions of the measured body specific force:
/// `f_x = -k_x v_x sum(w)`, `f_y = -k_y v_y sum(w)`, `f_z = -k_omega sum(w^2)`
/// with rotor speeds divided by `omega_max`.
pub fn fit_force_params(log: &FlightLog, omega_max: f64) -> Result<ForceFit, SysidError> {
    log.validate()?;
    let n = log.len();
    let inv = 1.0 / omega_max;
    let mut ax = DMatrix::zeros(n, 1);
    let mut ay = DMatrix::zeros(n, 1);
    let mut az = DMatrix::zeros(n, 1);
    let mut bx = DVector::zeros(n);
    let mut by = DVector::zeros(n);
    let mut bz = DVector::zeros(n);
    for (k, r) in log.rows.iter().enumerate() {
        let vb = rotation_matrix(&r.state.euler).transpose() * r.state.v;
        let w = r.state.rotor * inv;
        ax[(k, 0)] = -vb.x * w.sum();
        ay[(k, 0)] = -vb.y * w.sum();
        az[(k, 0)] = -w.norm_squared();
        bx[k] = r.force.x;
        by[k] = r.force.y;
        bz[k] = r.force.z;
    }
    let (kx, rx) = least_squares("force x", &ax, &bx)?;
    let (ky, ry) = least_squares("force y", &ay, &by)?;
    let (kz, rz) = least_squares("force z", &az, &bz)?;
    Ok(ForceFit {
        k_omega_hat: kz[0],
        k_x_hat: kx[0],
        k_y_hat: ky[0],
        rms: [rx, ry, rz],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentFit {
    pub k_p_hat: [f64; 4],
    pub k_q_hat: [f64; 4],
    pub k_r_hat: [f64; 4],
    pub k_rd_hat: [f64; 4],
    pub rms: [f64; 3],
}

const ROLL_SIGNS: [f64; 4] = [-1.0, -1.0, 1.0, 1.0];
const PITCH_SIGNS: [f64; 4] = [-1.0, 1.0, -1.0, 1.0];
const YAW_SIGNS: [f64; 4] = [-1.0, 1.0, 1.0, -1.0];

/// Roll and pitch over signed `w_i^2` regressors, yaw over signed `w_i` and
/// `w_dot_i` regressors; the targets are body angular accelerations.
pub fn fit_moment_params(log: &FlightLog, omega_max: f64) -> Result<MomentFit, SysidError> {
    log.validate()?;
    let rows = log.with_derivatives();
    let n = rows.len();
    let inv = 1.0 / omega_max;
    let mut ap = DMatrix::zeros(n, 4);
    let mut aq = DMatrix::zeros(n, 4);
    let mut ar = DMatrix::zeros(n, 8);
    let mut bp = DVector::zeros(n);
    let mut bq = DVector::zeros(n);
    let mut br = DVector::zeros(n);
    for (k, (r, rates_dot, rotor_dot)) in rows.iter().enumerate() {
        let w = r.state.rotor * inv;
        let wd = rotor_dot * inv;
        for i in 0..4 {
            ap[(k, i)] = ROLL_SIGNS[i] * w[i] * w[i];
            aq[(k, i)] = PITCH_SIGNS[i] * w[i] * w[i];
            ar[(k, i)] = YAW_SIGNS[i] * w[i];
            ar[(k, 4 + i)] = YAW_SIGNS[i] * wd[i];
        }
        bp[k] = rates_dot.x;
        bq[k] = rates_dot.y;
        br[k] = rates_dot.z;
    }
    let (kp, rp) = least_squares("roll moment", &ap, &bp)?;
    let (kq, rq) = least_squares("pitch moment", &aq, &bq)?;
    let (kr, rr) = least_squares("yaw moment", &ar, &br)?;
    Ok(MomentFit {
        k_p_hat: [kp[0], kp[1], kp[2], kp[3]],
        k_q_hat: [kq[0], kq[1], kq[2], kq[3]],
        k_r_hat: [kr[0], kr[1], kr[2], kr[3]],
        k_rd_hat: [kr[4], kr[5], kr[6], kr[7]],
        rms: [rp, rq, rr],
    })
}

/// Single-motor command/speed log sampled at a fixed period. `u[k]` is
/// held from `t[k]` to `t[k + 1]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MotorLog {
    pub t: Vec<f64>,
    pub u: Vec<f64>,
    pub omega: Vec<f64>,
}

impl MotorLog {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn subsample(&self, k: usize) -> Self {
        let k = k.max(1);
        let pick = |v: &Vec<f64>| v.iter().step_by(k).copied().collect();
        Self {
            t: pick(&self.t),
            u: pick(&self.u),
            omega: pick(&self.omega),
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "u", "omega"])?;
        for k in 0..self.len() {
            w.write_record([self.t[k].to_string(), self.u[k].to_string(), self.omega[k].to_string()])?;
        }
        w.flush()
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, SysidError> {
        let mut log = Self::default();
        for rec in csv::Reader::from_reader(input).deserialize::<(f64, f64, f64)>() {
            let (t, u, w) = rec?;
            log.t.push(t);
            log.u.push(u);
            log.omega.push(w);
        }
        Ok(log)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotorFit {
    pub omega_min: f64,
    pub omega_max: f64,
    pub k_l: f64,
    pub tau: f64,
    /// RMS residual of the steady-state curve.
    pub rms: f64,
}

/// Identifies the first-order motor model from a step log.
///
/// Within each held command the discrete response is
/// `w[k+1] = r w[k] + (1 - r) w_ss`, so one shared decay ratio `r` and one
/// intercept per hold are fitted jointly; `tau = -dt / ln r`. The steady
/// states per command level then give `(omega_min, omega_max, k_l)` by
/// Gauss-Newton on the motor curve.
pub fn fit_motor_params(log: &MotorLog) -> Result<MotorFit, SysidError> {
    let n = log.len();
    if log.u.len() != n || log.omega.len() != n {
        return Err(SysidError::InvalidLog("column lengths differ".into()));
    }
    if n < 10 {
        return Err(SysidError::TooFewRows { needed: 10, got: n });
    }
    let u_lo = log.u.iter().cloned().fold(f64::INFINITY, f64::min);
    let u_hi = log.u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(u_hi - u_lo >= MIN_COMMAND_SPAN) {
        return Err(SysidError::InsufficientExcitation(format!(
            "command spans {:.3}, need at least {MIN_COMMAND_SPAN}",
            (u_hi - u_lo).max(0.0)
        )));
    }
    let dt = (log.t[n - 1] - log.t[0]) / (n - 1) as f64;
    if !(dt > 0.0) {
        return Err(SysidError::InvalidLog("time not increasing".into()));
    }

    // holds: maximal runs of equal command, as (u, first pair index, last pair index)
    let mut holds: Vec<(f64, usize, usize)> = Vec::new();
    for k in 0..n - 1 {
        match holds.last_mut() {
            Some(h) if h.0 == log.u[k] => h.2 = k,
            _ => holds.push((log.u[k], k, k)),
        }
    }
    holds.retain(|h| h.2 >= h.1 + 2);
    let pairs: usize = holds.iter().map(|h| h.2 - h.1 + 1).sum();
    let cols = 1 + holds.len();
    let mut a = DMatrix::zeros(pairs, cols);
    let mut b = DVector::zeros(pairs);
    let mut row = 0;
    for (j, h) in holds.iter().enumerate() {
        for k in h.1..=h.2 {
            a[(row, 0)] = log.omega[k];
            a[(row, 1 + j)] = 1.0;
            b[row] = log.omega[k + 1];
            row += 1;
        }
    }
    // decay ratio and intercepts; only rows off steady state carry the ratio
    let sol = a
        .clone()
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|e| SysidError::InvalidLog(e.to_string()))?;
    let r = sol[0];
    if !(r > 0.0 && r < 1.0) {
        return Err(SysidError::InsufficientExcitation(format!(
            "decay ratio {r} outside (0, 1); holds never leave steady state"
        )));
    }
    let tau = -dt / r.ln();

    // steady state per distinct command level
    let mut levels: Vec<(f64, f64, usize)> = Vec::new();
    for (j, h) in holds.iter().enumerate() {
        let ss = sol[1 + j] / (1.0 - r);
        match levels.iter_mut().find(|l| l.0 == h.0) {
            Some(l) => {
                l.1 += ss;
                l.2 += 1;
            }
            None => levels.push((h.0, ss, 1)),
        }
    }
    let levels: Vec<(f64, f64)> = levels.iter().map(|l| (l.0, l.1 / l.2 as f64)).collect();
    if levels.len() < 3 {
        return Err(SysidError::InsufficientExcitation(
            "need at least three distinct command levels".into(),
        ));
    }
    let (omega_min, omega_max, k_l, rms) = fit_motor_curve(&levels)?;
    Ok(MotorFit {
        omega_min,
        omega_max,
        k_l,
        tau,
        rms,
    })
}

fn curve(u: f64, lo: f64, span: f64, k_l: f64) -> f64 {
    lo + span * (k_l * u * u + (1.0 - k_l) * u).max(0.0).sqrt()
}

/// Fits `w = lo + span sqrt(k_l u^2 + (1 - k_l) u)` to `(u, w)` points.
fn fit_motor_curve(levels: &[(f64, f64)]) -> Result<(f64, f64, f64, f64), SysidError> {
    let (u0, w0) = levels.iter().cloned().fold((f64::INFINITY, 0.0), |a, l| if l.0 < a.0 { l } else { a });
    let (u1, w1) = levels.iter().cloned().fold((f64::NEG_INFINITY, 0.0), |a, l| if l.0 > a.0 { l } else { a });
    // endpoint-normalized linear fit for the initial k_l
    let mut lo = w0;
    let mut span = w1 - w0;
    let (mut num, mut den) = (0.0, 0.0);
    for &(u, w) in levels {
        let y = ((w - lo) / span).powi(2) - u;
        let x = u * u - u;
        num += x * y;
        den += x * x;
    }
    let mut k_l = if den > 0.0 { (num / den).clamp(0.0, 1.0) } else { 0.5 };
    if u0 > 0.0 || u1 < 1.0 {
        // endpoints are not the curve extremes; let Gauss-Newton move them
        span /= (curve(u1, 0.0, 1.0, k_l) - curve(u0, 0.0, 1.0, k_l)).max(1e-6);
        lo = w0 - span * curve(u0, 0.0, 1.0, k_l);
    }
    let resid = |lo: f64, span: f64, k_l: f64| -> f64 {
        levels.iter().map(|&(u, w)| (curve(u, lo, span, k_l) - w).powi(2)).sum::<f64>()
    };
    let mut cost = resid(lo, span, k_l);
    for _ in 0..100 {
        let mut jtj = nalgebra::Matrix3::<f64>::zeros();
        let mut jtr = Vector3::<f64>::zeros();
        for &(u, w) in levels {
            let s = (k_l * u * u + (1.0 - k_l) * u).max(1e-300).sqrt();
            let j = Vector3::new(1.0, s, if s > 0.0 { span * (u * u - u) / (2.0 * s) } else { 0.0 });
            let r = lo + span * s - w;
            jtj += j * j.transpose();
            jtr += j * r;
        }
        let Some(step) = jtj.lu().solve(&-jtr) else { break };
        let mut lambda = 1.0;
        let mut improved = false;
        while lambda > 1e-6 {
            let (a, b, c) = (lo + lambda * step.x, span + lambda * step.y, (k_l + lambda * step.z).clamp(0.0, 1.0));
            let next = resid(a, b, c);
            if next <= cost {
                lo = a;
                span = b;
                k_l = c;
                improved = cost - next > 1e-30 * (1.0 + cost);
                cost = next;
                break;
            }
            lambda *= 0.5;
        }
        if !improved || step.norm() < 1e-14 * (1.0 + span.abs()) {
            break;
        }
    }
    Ok((lo, lo + span, k_l, (cost / levels.len() as f64).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub force_rms: [f64; 3],
    pub moment_rms: [f64; 3],
    pub motor_rms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Identification {
    pub params: ModelParams,
    pub residuals: Residuals,
}

/// Motor model from `motor`, then forces and moments from `flight` using
/// the identified `omega_max`.
pub fn identify(flight: &FlightLog, motor: &MotorLog) -> Result<Identification, SysidError> {
    let m = fit_motor_params(motor)?;
    let f = fit_force_params(flight, m.omega_max)?;
    let mo = fit_moment_params(flight, m.omega_max)?;
    let params = ModelParams {
        k_omega_hat: f.k_omega_hat,
        k_x_hat: f.k_x_hat,
        k_y_hat: f.k_y_hat,
        k_p_hat: mo.k_p_hat,
        k_q_hat: mo.k_q_hat,
        k_r_hat: mo.k_r_hat,
        k_rd_hat: mo.k_rd_hat,
        omega_min: m.omega_min,
        omega_max: m.omega_max,
        k_l: m.k_l.min(crate::randomization::K_L_CAP),
        tau: m.tau,
    };
    params.validate()?;
    Ok(Identification {
        params,
        residuals: Residuals {
            force_rms: f.rms,
            moment_rms: mo.rms,
            motor_rms: m.rms,
        },
    })
}

/// Per-motor swept-sine excitation added to the stabilizing controller.
#[derive(Debug, Clone, PartialEq)]
pub struct Chirp {
    pub amplitude: f64,
    pub f0: f64,
    pub f1: f64,
    pub duration: f64,
    /// Per-motor phase offsets and sweep-rate factors.
    pub phase: [f64; 4],
    pub rate: [f64; 4],
}

impl Chirp {
    pub fn new<R: Rng + ?Sized>(duration: f64, rng: &mut R) -> Self {
        Self {
            amplitude: 0.03,
            f0: 0.2,
            f1: 4.0,
            duration,
            phase: [0; 4].map(|_| rng.random_range(0.0..2.0 * PI)),
            rate: [0.7, 0.85, 1.0, 1.15].map(|r: f64| r * rng.random_range(0.95..1.05)),
        }
    }

    /// Excitation for motor `i` at time `t`.
    pub fn value(&self, i: usize, t: f64) -> f64 {
        let k = (self.f1 - self.f0) / self.duration * self.rate[i];
        let phase = 2.0 * PI * (self.f0 * t + 0.5 * k * t * t) + self.phase[i];
        self.amplitude * phase.sin()
    }
}

/// Hover-linearized mixer plus cascaded position/attitude PD used to keep
/// the simulated excitation flight airborne.
struct Stabilizer {
    hover: Vector4<f64>,
    inv_mix: Matrix4<f64>,
    params: ModelParams,
}

impl Stabilizer {
    fn new(params: &ModelParams) -> Result<Self, SysidError> {
        let hover = hover_rotor_speeds(params)
            .ok_or_else(|| SysidError::InvalidLog("airframe has no hover trim".into()))?;
        // columns: d(f_z, M_x, M_y, M_z)/d w_i at hover
        let outputs = |w: &Vector4<f64>| {
            let mut s = QuadState::default();
            s.rotor = *w;
            let f = body_specific_force(&Vector3::zeros(), w, params);
            let m = moment(&s, &Vector4::zeros(), params);
            Vector4::new(f.z, m.x, m.y, m.z)
        };
        let mut mix = Matrix4::zeros();
        for i in 0..4 {
            let h = 1e-3 * hover[i];
            let mut a = hover;
            let mut b = hover;
            a[i] += h;
            b[i] -= h;
            mix.set_column(i, &((outputs(&a) - outputs(&b)) / (2.0 * h)));
        }
        let inv_mix = mix
            .try_inverse()
            .ok_or_else(|| SysidError::InvalidLog("singular mixer".into()))?;
        Ok(Self {
            hover,
            inv_mix,
            params: *params,
        })
    }

    fn command(&self, s: &QuadState, t: f64) -> [f64; 4] {
        let g = crate::dynamics::GRAVITY;
        let p_ref = Vector3::new(1.5 * (0.5 * t).sin(), 1.5 * (0.7 * t).sin(), -2.0 + 0.5 * (0.3 * t).sin());
        let v_ref = Vector3::new(0.75 * (0.5 * t).cos(), 1.05 * (0.7 * t).cos(), 0.15 * (0.3 * t).cos());
        let a = 4.0 * (p_ref - s.p) + 3.0 * (v_ref - s.v);
        let (sy, cy) = s.euler.z.sin_cos();
        let ax = cy * a.x + sy * a.y;
        let ay = -sy * a.x + cy * a.y;
        let phi_ref = (ay / g).clamp(-0.4, 0.4);
        let theta_ref = (-ax / g).clamp(-0.4, 0.4);
        let psi_ref = 0.5 * (0.4 * t).sin();
        let (kp, kd) = (100.0, 20.0);
        let alpha = Vector3::new(
            kp * (phi_ref - s.euler.x) - kd * s.rates.x,
            kp * (theta_ref - s.euler.y) - kd * s.rates.y,
            kp * crate::dynamics::wrap_angle(psi_ref - s.euler.z) - kd * s.rates.z,
        );
        let tilt = (s.euler.x.cos() * s.euler.y.cos()).max(0.5);
        let fz = (a.z - g) / tilt;
        let dw = self.inv_mix * Vector4::new(fz + g, alpha.x, alpha.y, alpha.z);
        let w = self.hover + dw;
        [0, 1, 2, 3].map(|i| command_for_rotor_speed(w[i], &self.params))
    }
}

fn log_row(s: &QuadState, u: &MotorCommand, t: f64, params: &ModelParams) -> LogRow {
    let r = rotation_matrix(&s.euler);
    let vb = r.transpose() * s.v;
    let omega_c = steady_state_motor_speed(u, params);
    let rotor_dot = (omega_c - s.rotor) / params.tau;
    LogRow {
        t,
        state: *s,
        command: u.values(),
        force: body_specific_force(&vb, &s.rotor, params),
        rates_dot: Some(moment(s, &rotor_dot, params)),
        rotor_dot: Some(rotor_dot),
    }
}

/// Closed-loop flight with chirped per-motor commands, logged every
/// `dt` with exact angular and rotor accelerations. `force_noise` adds
/// Gaussian noise with that fraction of each axis' RMS force.
pub fn simulate_chirp_flight_dt(
    params: &ModelParams,
    duration: f64,
    dt: f64,
    seed: u64,
    force_noise: f64,
) -> Result<FlightLog, SysidError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chirp = Chirp::new(duration, &mut rng);
    let ctrl = Stabilizer::new(params)?;
    let mut s = QuadState::at_rest(Vector3::new(0.0, 0.0, -2.0), 0.0);
    s.rotor = ctrl.hover;
    let steps = (duration / dt).round() as usize;
    let mut rows = Vec::with_capacity(steps);
    for k in 0..steps {
        let t = k as f64 * dt;
        let base = ctrl.command(&s, t);
        let u = MotorCommand::clipped([0, 1, 2, 3].map(|i| base[i] + chirp.value(i, t)));
        rows.push(log_row(&s, &u, t, params));
        s = integrate_step(&s, &u, params, dt)?;
    }
    if force_noise > 0.0 {
        let n = rows.len() as f64;
        let rms = Vector3::from_fn(|i, _| (rows.iter().map(|r| r.force[i] * r.force[i]).sum::<f64>() / n).sqrt());
        for r in &mut rows {
            for i in 0..3 {
                let e: f64 = rng.sample(StandardNormal);
                r.force[i] += force_noise * rms[i] * e;
            }
        }
    }
    Ok(FlightLog { rows })
}

/// [`simulate_chirp_flight_dt`] at the simulator's 10 ms step.
pub fn simulate_chirp_flight(
    params: &ModelParams,
    duration: f64,
    seed: u64,
    force_noise: f64,
) -> Result<FlightLog, SysidError> {
    simulate_chirp_flight_dt(params, duration, crate::dynamics::DEFAULT_DT, seed, force_noise)
}

/// Command staircase over `[0, 1]` (each level held 0.3 s) applied to
/// one motor, integrated with RK4 at `dt`.
pub fn simulate_motor_steps(params: &ModelParams, dt: f64) -> Result<MotorLog, SysidError> {
    params.validate()?;
    let levels = [0.0, 1.0, 0.5, 0.1, 0.8, 0.3, 0.0, 0.65, 0.2, 0.9, 0.4, 1.0, 0.05, 0.7];
    let hold = (0.3 / dt).round() as usize;
    let mut log = MotorLog::default();
    let mut w = params.omega_min;
    let mut k = 0usize;
    for &u in &levels {
        let wc = steady_state_motor_speed(&MotorCommand::splat(u), params)[0];
        let f = |w: f64| (wc - w) / params.tau;
        for _ in 0..hold {
            log.t.push(k as f64 * dt);
            log.u.push(u);
            log.omega.push(w);
            let k1 = f(w);
            let k2 = f(w + 0.5 * dt * k1);
            let k3 = f(w + 0.5 * dt * k2);
            let k4 = f(w + dt * k3);
            w = (w + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)).clamp(params.omega_min, params.omega_max);
            k += 1;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::DEFAULT_DT;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn chirp_flight_stays_airborne() {
        for p in [ModelParams::five_inch(), ModelParams::three_inch()] {
            let log = simulate_chirp_flight(&p, 20.0, 1, 0.0).unwrap();
            assert_eq!(log.len(), 2000);
            for r in &log.rows {
                assert!(r.state.p.norm() < 6.0, "{:?}", r.state.p);
                assert!(r.state.euler.x.abs() < 1.0 && r.state.euler.y.abs() < 1.0);
            }
        }
    }

    #[test]
    fn force_fit_recovers_five_inch() {
        let p = ModelParams::five_inch();
        let log = simulate_chirp_flight(&p, 20.0, 2, 0.0).unwrap();
        let f = fit_force_params(&log, p.omega_max).unwrap();
        assert!(rel(f.k_omega_hat, 27.1) < 1e-9);
        assert!(rel(f.k_x_hat, 0.16) < 1e-9);
        assert!(rel(f.k_y_hat, 0.24) < 1e-9);
        assert!(f.rms.iter().all(|&r| r < 1e-9));
    }

    #[test]
    fn moment_fit_recovers_three_inch() {
        let p = ModelParams::three_inch();
        let log = simulate_chirp_flight(&p, 20.0, 3, 0.0).unwrap();
        let m = fit_moment_params(&log, p.omega_max).unwrap();
        for i in 0..4 {
            assert!(rel(m.k_p_hat[i], p.k_p_hat[i]) < 1e-6);
            assert!(rel(m.k_q_hat[i], p.k_q_hat[i]) < 1e-6);
            assert!(rel(m.k_r_hat[i], p.k_r_hat[i]) < 1e-6);
            assert!(rel(m.k_rd_hat[i], p.k_rd_hat[i]) < 1e-6);
        }
        // sign pattern: positive coefficients under the fixed roll signs
        assert!(m.k_p_hat.iter().all(|&k| k > 0.0));
    }

    #[test]
    fn finite_difference_derivatives_at_fine_sampling() {
        let p = ModelParams::five_inch();
        let log = simulate_chirp_flight_dt(&p, 20.0, 0.002, 4, 0.0).unwrap().without_derivatives();
        let m = fit_moment_params(&log, p.omega_max).unwrap();
        for i in 0..4 {
            assert!(rel(m.k_p_hat[i], p.k_p_hat[i]) < 5e-3, "{:?}", m);
            assert!(rel(m.k_q_hat[i], p.k_q_hat[i]) < 5e-3, "{:?}", m);
            assert!(rel(m.k_r_hat[i], p.k_r_hat[i]) < 5e-3, "{:?}", m);
            assert!(rel(m.k_rd_hat[i], p.k_rd_hat[i]) < 5e-3, "{:?}", m);
        }
    }

    #[test]
    fn hover_log_is_rank_deficient_for_drag() {
        let p = ModelParams::five_inch();
        let mut log = simulate_chirp_flight(&p, 5.0, 5, 0.0).unwrap();
        for r in &mut log.rows {
            r.state.v = Vector3::zeros();
        }
        assert!(matches!(
            fit_force_params(&log, p.omega_max),
            Err(SysidError::RankDeficient { .. })
        ));
    }

    #[test]
    fn constant_rotor_log_is_rank_deficient_for_yaw() {
        let p = ModelParams::five_inch();
        let mut log = simulate_chirp_flight(&p, 5.0, 6, 0.0).unwrap();
        for r in &mut log.rows {
            r.state.rotor = Vector4::repeat(2000.0);
            r.rotor_dot = Some(Vector4::zeros());
        }
        assert!(matches!(
            fit_moment_params(&log, p.omega_max),
            Err(SysidError::RankDeficient { .. })
        ));
    }

    #[test]
    fn motor_fit_recovers_five_inch() {
        let p = ModelParams::five_inch();
        let log = simulate_motor_steps(&p, DEFAULT_DT).unwrap();
        let m = fit_motor_params(&log).unwrap();
        assert!(rel(m.omega_min, 238.49) < 1e-6, "{m:?}");
        assert!(rel(m.omega_max, 3295.5) < 1e-6, "{m:?}");
        assert!(rel(m.k_l, 0.95) < 1e-6, "{m:?}");
        assert!(rel(m.tau, 0.04) < 1e-3, "{m:?}");
        let m2 = fit_motor_params(&log.subsample(2)).unwrap();
        assert!(rel(m2.tau, m.tau) < 1e-3, "{m2:?}");
    }

    #[test]
    fn constant_command_is_insufficient() {
        let p = ModelParams::five_inch();
        let mut log = simulate_motor_steps(&p, DEFAULT_DT).unwrap();
        for u in &mut log.u {
            *u = 0.4;
        }
        assert!(matches!(
            fit_motor_params(&log),
            Err(SysidError::InsufficientExcitation(_))
        ));
    }

    #[test]
    fn noisy_forces_within_five_percent() {
        let p = ModelParams::five_inch();
        for seed in 0..20 {
            let log = simulate_chirp_flight(&p, 20.0, 100 + seed, 0.01).unwrap();
            let f = fit_force_params(&log, p.omega_max).unwrap();
            assert!(rel(f.k_omega_hat, p.k_omega_hat) < 0.05);
            assert!(rel(f.k_x_hat, p.k_x_hat) < 0.05, "{f:?}");
            assert!(rel(f.k_y_hat, p.k_y_hat) < 0.05, "{f:?}");
        }
    }

    #[test]
    fn csv_round_trip_and_identify() {
        let p = ModelParams::five_inch();
        let log = simulate_chirp_flight(&p, 20.0, 7, 0.0).unwrap();
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let back = FlightLog::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, log);
        let motor = simulate_motor_steps(&p, DEFAULT_DT).unwrap();
        let mut buf = Vec::new();
        motor.write_csv(&mut buf).unwrap();
        let motor_back = MotorLog::read_csv(buf.as_slice()).unwrap();
        assert_eq!(motor_back, motor);
        let id = identify(&back, &motor_back).unwrap();
        assert!(rel(id.params.k_omega_hat, p.k_omega_hat) < 1e-4);
        assert!(rel(id.params.k_p_hat[2], p.k_p_hat[2]) < 1e-4);
    }

    #[test]
    fn residuals_vanish_at_truth() {
        let p = ModelParams::five_inch();
        let log = simulate_chirp_flight(&p, 10.0, 8, 0.0).unwrap();
        for r in &log.rows {
            let vb = rotation_matrix(&r.state.euler).transpose() * r.state.v;
            let f = body_specific_force(&vb, &r.state.rotor, &p);
            assert!((f - r.force).norm() < 1e-9);
        }
    }
}
