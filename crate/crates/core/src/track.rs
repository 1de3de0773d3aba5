//! Race gates, track layout and the crossing/collision geometry.
//!
//! Gates are vertical squares parameterized by center and yaw. The gate
//! normal `(cos yaw, sin yaw, 0)` points in the direction of travel. The
//! bounding box is centered on the origin horizontally and spans from the
//! ground (`z = 0`, NED) up to `-height`.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dynamics::wrap_angle;

pub const DEFAULT_HALF_SIZE: f64 = 0.75;

#[derive(Debug, thiserror::Error)]
pub enum TrackError {
    #[error("track has no gates")]
    Empty,
    #[error("gate {index} has non-positive half size {half_size}")]
    BadGate { index: usize, half_size: f64 },
    #[error("gate {index} center {center:?} is not strictly inside the bounds")]
    OutsideBounds { index: usize, center: [f64; 3] },
    #[error("bounds must be positive, got {0:?}")]
    BadBounds([f64; 3]),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gate {
    pub center: Vector3<f64>,
    pub yaw: f64,
    pub half_size: f64,
}

impl Gate {
    pub fn new(center: Vector3<f64>, yaw: f64) -> Self {
        Self {
            center,
            yaw: wrap_angle(yaw),
            half_size: DEFAULT_HALF_SIZE,
        }
    }

    pub fn normal(&self) -> Vector3<f64> {
        Vector3::new(self.yaw.cos(), self.yaw.sin(), 0.0)
    }

    /// Horizontal in-plane axis (the gate frame's y axis).
    pub fn lateral(&self) -> Vector3<f64> {
        Vector3::new(-self.yaw.sin(), self.yaw.cos(), 0.0)
    }

    /// Signed distance of `p` to the gate plane, positive past the gate.
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        (p - self.center).dot(&self.normal())
    }

    /// Expresses a world point in the gate frame (yaw-only rotation).
    pub fn to_local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotate_to_local(&(p - self.center))
    }

    /// Rotates a world vector into the gate frame.
    pub fn rotate_to_local(&self, v: &Vector3<f64>) -> Vector3<f64> {
        let (s, c) = self.yaw.sin_cos();
        Vector3::new(c * v.x + s * v.y, -s * v.x + c * v.y, v.z)
    }
}

/// Axis-aligned flight volume: `|x| <= sx/2`, `|y| <= sy/2`, `-sz <= z < 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub size: [f64; 3],
}

impl Bounds {
    fn contains_strictly(&self, p: &Vector3<f64>) -> bool {
        let [sx, sy, sz] = self.size;
        p.x.abs() < sx / 2.0 && p.y.abs() < sy / 2.0 && p.z < 0.0 && p.z > -sz
    }
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            size: [10.0, 10.0, 7.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    gates: Vec<Gate>,
    bounds: Bounds,
}

impl Track {
    pub fn new(gates: Vec<Gate>, bounds: Bounds) -> Result<Self, TrackError> {
        if bounds.size.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(TrackError::BadBounds(bounds.size));
        }
        if gates.is_empty() {
            return Err(TrackError::Empty);
        }
        for (index, g) in gates.iter().enumerate() {
            if !(g.half_size.is_finite() && g.half_size > 0.0) {
                return Err(TrackError::BadGate {
                    index,
                    half_size: g.half_size,
                });
            }
            if !bounds.contains_strictly(&g.center) {
                return Err(TrackError::OutsideBounds {
                    index,
                    center: [g.center.x, g.center.y, g.center.z],
                });
            }
        }
        Ok(Self { gates, bounds })
    }

    pub fn gates(&self) -> &[Gate] {
        &self.gates
    }

    pub fn gate(&self, i: usize) -> &Gate {
        &self.gates[i % self.gates.len()]
    }

    pub fn next_index(&self, i: usize) -> usize {
        (i + 1) % self.gates.len()
    }

    pub fn len(&self) -> usize {
        self.gates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gates.is_empty()
    }

    pub fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    pub fn from_json_str(s: &str) -> Result<Self, TrackError> {
        let file: TrackFile = serde_json::from_str(s)?;
        file.try_into()
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self, TrackError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&TrackFile::from(self)).expect("track serializes")
    }

    /// Mean of the gate centers.
    pub fn centroid(&self) -> Vector3<f64> {
        self.gates.iter().map(|g| g.center).sum::<Vector3<f64>>() / self.gates.len() as f64
    }

    /// Sum of wrapped heading changes over one lap. Zero for a figure-eight,
    /// `+-2 pi` for a simple loop.
    pub fn heading_winding(&self) -> f64 {
        (0..self.len())
            .map(|i| wrap_angle(self.gate(i + 1).yaw - self.gate(i).yaw))
            .sum()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct GateFile {
    center: [f64; 3],
    yaw: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    half_size: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrackFile {
    bounds: [f64; 3],
    gates: Vec<GateFile>,
}

impl TryFrom<TrackFile> for Track {
    type Error = TrackError;

    fn try_from(f: TrackFile) -> Result<Self, TrackError> {
        let gates = f
            .gates
            .into_iter()
            .map(|g| Gate {
                center: Vector3::from(g.center),
                yaw: wrap_angle(g.yaw),
                half_size: g.half_size.unwrap_or(DEFAULT_HALF_SIZE),
            })
            .collect();
        Track::new(gates, Bounds { size: f.bounds })
    }
}

impl From<&Track> for TrackFile {
    fn from(t: &Track) -> Self {
        TrackFile {
            bounds: t.bounds.size,
            gates: t
                .gates
                .iter()
                .map(|g| GateFile {
                    center: [g.center.x, g.center.y, g.center.z],
                    yaw: g.yaw,
                    half_size: (g.half_size != DEFAULT_HALF_SIZE).then_some(g.half_size),
                })
                .collect(),
        }
    }
}

pub const FIGURE8_JSON: &str = include_str!("../data/track_figure8.json");

/// The shipped seven-gate figure-eight.
///
/// Gates sit at equal arc length on the lemniscate `x = 3.5 sin t`,
/// `y = 5.5 sin t cos t` at 1.5 m altitude, each facing along the curve
/// tangent.
pub fn default_figure8() -> Track {
    Track::from_json_str(FIGURE8_JSON).expect("shipped track is valid")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CrossingKind {
    Passed,
    Missed,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossingEvent {
    pub kind: CrossingKind,
    pub point: Option<Vector3<f64>>,
}

impl CrossingEvent {
    const NONE: CrossingEvent = CrossingEvent {
        kind: CrossingKind::None,
        point: None,
    };
}

/// Detects a crossing of the gate's infinite plane between two positions.
///
/// A forward crossing (behind to in front) inside the aperture is `Passed`,
/// outside it `Missed`. Any backward crossing is `Missed`.
pub fn check_crossing(p_prev: &Vector3<f64>, p_curr: &Vector3<f64>, gate: &Gate) -> CrossingEvent {
    let d0 = gate.signed_distance(p_prev);
    let d1 = gate.signed_distance(p_curr);
    let forward = d0 < 0.0 && d1 >= 0.0;
    let backward = d0 >= 0.0 && d1 < 0.0;
    if !(forward || backward) {
        return CrossingEvent::NONE;
    }
    let s = d0 / (d0 - d1);
    let point = p_prev + (p_curr - p_prev) * s;
    let offset = point - gate.center;
    let lateral = offset.dot(&gate.lateral()).abs();
    let vertical = offset.z.abs();
    let inside = lateral <= gate.half_size && vertical <= gate.half_size;
    let kind = if forward && inside {
        CrossingKind::Passed
    } else {
        CrossingKind::Missed
    };
    CrossingEvent {
        kind,
        point: Some(point),
    }
}

/// Collision with the ground or the walls of the flight volume.
pub fn out_of_bounds(p: &Vector3<f64>, track: &Track) -> bool {
    let [sx, sy, sz] = track.bounds.size;
    p.z >= 0.0 || p.z < -sz || p.x.abs() > sx / 2.0 || p.y.abs() > sy / 2.0
}
