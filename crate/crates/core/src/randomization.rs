//! Per-episode sampling of model parameters.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::dynamics::ModelParams;

/// Cap applied to the linearization constant after scaling.
pub const K_L_CAP: f64 = 1.0 - 1e-6;

const MAX_RESAMPLES: usize = 100;

/// Uniform bounds of the general scheme.
pub mod general_bounds {
    pub const OMEGA_MIN: (f64, f64) = (0.0, 500.0);
    pub const OMEGA_MAX: (f64, f64) = (3000.0, 5000.0);
    pub const K_L: (f64, f64) = (0.0, 1.0);
    pub const TAU: (f64, f64) = (0.01, 0.1);
    pub const K_OMEGA: (f64, f64) = (10.0, 30.0);
    pub const K_X: (f64, f64) = (0.1, 0.3);
    pub const K_Y: (f64, f64) = (0.1, 0.3);
    pub const K_P: (f64, f64) = (200.0, 800.0);
    pub const K_Q: (f64, f64) = (200.0, 800.0);
    /// Additive per-rotor jitter on the roll/pitch effectiveness.
    pub const ROTOR_JITTER: f64 = 50.0;
    pub const K_R: (f64, f64) = (20.0, 80.0);
    pub const K_RD: (f64, f64) = (2.0, 8.0);
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SchemeError {
    #[error("randomization fraction must be finite and >= 0, got {0}")]
    BadFraction(f64),
    #[error("scaled parameters stayed invalid after {0} resamples")]
    InvalidScheme(usize),
    #[error("unknown randomization scheme '{0}' (expected general, fixed or pct:<p>)")]
    Unknown(String),
    #[error("scheme '{0}' needs base parameters")]
    MissingBase(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum RandomizationScheme {
    /// Wide uniform ranges covering both reference airframes.
    General,
    /// Each parameter of `base` multiplied by its own `U(1 - p, 1 + p)` draw.
    Percentage { base: ModelParams, p: f64 },
    Fixed(ModelParams),
}

impl RandomizationScheme {
    pub fn percentage(base: ModelParams, p: f64) -> Result<Self, SchemeError> {
        if !(p.is_finite() && p >= 0.0) {
            return Err(SchemeError::BadFraction(p));
        }
        Ok(Self::Percentage { base, p })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ModelParams, SchemeError> {
        match self {
            Self::General => Ok(sample_general(rng)),
            Self::Percentage { base, p } => sample_percentage(base, *p, rng),
            Self::Fixed(base) => Ok(*base),
        }
    }

    /// Parses `general`, `fixed` or `pct:<p>`; the latter two need `base`.
    pub fn parse(spec: &str, base: Option<ModelParams>) -> Result<Self, SchemeError> {
        let spec = spec.trim();
        match spec {
            "general" => Ok(Self::General),
            "fixed" => base
                .map(Self::Fixed)
                .ok_or_else(|| SchemeError::MissingBase(spec.into())),
            _ => {
                let p = spec
                    .strip_prefix("pct:")
                    .and_then(|s| f64::from_str(s).ok())
                    .ok_or_else(|| SchemeError::Unknown(spec.into()))?;
                let base = base.ok_or_else(|| SchemeError::MissingBase(spec.into()))?;
                Self::percentage(base, p)
            }
        }
    }
}

impl fmt::Display for RandomizationScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::General => write!(f, "general"),
            Self::Percentage { p, .. } => write!(f, "pct:{p}"),
            Self::Fixed(_) => write!(f, "fixed"),
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    rng.random_range(lo..hi)
}

/// Draws one airframe from the general scheme.
pub fn sample_general<R: Rng + ?Sized>(rng: &mut R) -> ModelParams {
    use general_bounds::*;
    let omega_min = uniform(rng, OMEGA_MIN);
    let omega_max = uniform(rng, OMEGA_MAX);
    let k_l = uniform(rng, K_L);
    let tau = uniform(rng, TAU);
    let k_omega_hat = uniform(rng, K_OMEGA);
    let k_x_hat = uniform(rng, K_X);
    let k_y_hat = uniform(rng, K_Y);
    let k_p = uniform(rng, K_P);
    let k_p_hat = [0; 4].map(|_| k_p + rng.random_range(-ROTOR_JITTER..ROTOR_JITTER));
    let k_q = uniform(rng, K_Q);
    let k_q_hat = [0; 4].map(|_| k_q + rng.random_range(-ROTOR_JITTER..ROTOR_JITTER));
    let k_r = uniform(rng, K_R);
    let k_rd = uniform(rng, K_RD);
    ModelParams {
        k_omega_hat,
        k_x_hat,
        k_y_hat,
        k_p_hat,
        k_q_hat,
        k_r_hat: [k_r; 4],
        k_rd_hat: [k_rd; 4],
        omega_min,
        omega_max,
        k_l,
        tau,
    }
}

/// Scales every parameter of `base` by an independent `U(1 - p, 1 + p)`.
///
/// `k_l` is capped at [`K_L_CAP`]. Draws that leave the parameters invalid
/// (for `p >= 1`, e.g. a non-positive `tau`) are resampled.
pub fn sample_percentage<R: Rng + ?Sized>(
    base: &ModelParams,
    p: f64,
    rng: &mut R,
) -> Result<ModelParams, SchemeError> {
    if !(p.is_finite() && p >= 0.0) {
        return Err(SchemeError::BadFraction(p));
    }
    if p == 0.0 {
        return Ok(*base);
    }
    for _ in 0..MAX_RESAMPLES {
        let mut scale = |x: f64| x * rng.random_range(1.0 - p..=1.0 + p);
        let out = ModelParams {
            k_omega_hat: scale(base.k_omega_hat),
            k_x_hat: scale(base.k_x_hat),
            k_y_hat: scale(base.k_y_hat),
            k_p_hat: base.k_p_hat.map(&mut scale),
            k_q_hat: base.k_q_hat.map(&mut scale),
            k_r_hat: base.k_r_hat.map(&mut scale),
            k_rd_hat: base.k_rd_hat.map(&mut scale),
            omega_min: scale(base.omega_min),
            omega_max: scale(base.omega_max),
            k_l: scale(base.k_l).min(K_L_CAP),
            tau: scale(base.tau),
        };
        if out.validate().is_ok() {
            return Ok(out);
        }
    }
    Err(SchemeError::InvalidScheme(MAX_RESAMPLES))
}
