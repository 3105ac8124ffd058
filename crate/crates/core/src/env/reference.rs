use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use crate::numerics::RandomStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    /// Cart position only.
    Cartpole,
    /// Position in three dimensions.
    Quadrotor,
}

impl ReferenceKind {
    pub fn dim(self) -> usize {
        match self {
            ReferenceKind::Cartpole => 1,
            ReferenceKind::Quadrotor => 3,
        }
    }
}

/// Waypoint layout of the zig-zag generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZigzagConfig {
    /// Seconds between consecutive waypoints.
    pub segment_duration: f64,
    /// Per-axis bound on waypoint coordinates; waypoints lie in `[-a, a]`.
    pub amplitude: Vec<f64>,
}

impl ZigzagConfig {
    pub fn default_for(kind: ReferenceKind) -> Self {
        match kind {
            ReferenceKind::Cartpole => Self {
                segment_duration: 1.0,
                amplitude: vec![1.0],
            },
            ReferenceKind::Quadrotor => Self {
                segment_duration: 1.0,
                amplitude: vec![1.0, 1.0, 0.3],
            },
        }
    }
}

/// Piecewise-linear position reference sampled on the control grid. Beyond
/// its last sample the reference holds the final waypoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Reference {
    dt: f64,
    dim: usize,
    waypoints: Vec<Vec<f64>>,
    segment_duration: f64,
    positions: Vec<f64>,
    velocities: Vec<f64>,
}

impl Reference {
    /// A reference that stays at `point` forever.
    pub fn stationary(point: Vec<f64>, dt: f64) -> Self {
        let dim = point.len();
        Self {
            dt,
            dim,
            positions: point.clone(),
            velocities: vec![0.0; dim],
            waypoints: vec![point],
            segment_duration: f64::INFINITY,
        }
    }

    fn from_waypoints(waypoints: Vec<Vec<f64>>, segment_duration: f64, duration: f64, dt: f64) -> Self {
        let dim = waypoints[0].len();
        let steps = (duration / dt).round() as usize;
        let mut positions = Vec::with_capacity((steps + 1) * dim);
        let mut velocities = Vec::with_capacity((steps + 1) * dim);
        for k in 0..=steps {
            let t = k as f64 * dt;
            let seg = ((t / segment_duration).floor() as usize).min(waypoints.len().saturating_sub(2));
            if waypoints.len() == 1 {
                positions.extend_from_slice(&waypoints[0]);
                velocities.extend(std::iter::repeat_n(0.0, dim));
                continue;
            }
            let s = ((t - seg as f64 * segment_duration) / segment_duration).clamp(0.0, 1.0);
            let (a, b) = (&waypoints[seg], &waypoints[seg + 1]);
            for i in 0..dim {
                positions.push(a[i] + s * (b[i] - a[i]));
                velocities.push((b[i] - a[i]) / segment_duration);
            }
        }
        Self {
            dt,
            dim,
            waypoints,
            segment_duration,
            positions,
            velocities,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn waypoints(&self) -> &[Vec<f64>] {
        &self.waypoints
    }

    pub fn segment_duration(&self) -> f64 {
        self.segment_duration
    }

    /// Number of stored grid samples.
    pub fn len(&self) -> usize {
        self.positions.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn position(&self, k: usize) -> &[f64] {
        let k = k.min(self.len() - 1);
        &self.positions[k * self.dim..(k + 1) * self.dim]
    }

    /// Segment velocity at step `k`; zero once the reference holds its end point.
    pub fn velocity(&self, k: usize) -> &[f64] {
        const ZERO: [f64; 8] = [0.0; 8];
        if k >= self.len() - 1 {
            return &ZERO[..self.dim];
        }
        &self.velocities[k * self.dim..(k + 1) * self.dim]
    }

    /// CSV with header `t,x_ref_0,...`, one row per stored grid sample.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for i in 0..self.dim {
            let _ = write!(out, ",x_ref_{i}");
        }
        out.push('\n');
        for k in 0..self.len() {
            let _ = write!(out, "{}", k as f64 * self.dt);
            for v in self.position(k) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Zig-zag waypoints starting at the origin: the first axis alternates sign
/// between consecutive waypoints, the remaining axes are uniform within their
/// bounds. Velocity jumps at every waypoint, so the reference is not exactly
/// trackable.
pub fn zigzag_reference(
    kind: ReferenceKind,
    layout: &ZigzagConfig,
    duration: f64,
    dt: f64,
    seed: u64,
) -> Reference {
    let dim = kind.dim();
    assert_eq!(layout.amplitude.len(), dim, "amplitude must have one entry per axis");
    assert!(dt > 0.0 && layout.segment_duration > 0.0);
    let origin = vec![0.0; dim];
    if duration <= 0.0 {
        return Reference::from_waypoints(vec![origin], layout.segment_duration, 0.0, dt);
    }
    let count = (duration / layout.segment_duration).ceil() as usize;
    let mut rng = RandomStream::new(seed).domain(0x0216_22a9).rng(0);
    let mut waypoints = vec![origin];
    for j in 0..count {
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        let mut point = Vec::with_capacity(dim);
        point.push(sign * layout.amplitude[0] * rng.random_range(0.5..=1.0));
        for a in &layout.amplitude[1..] {
            point.push(if *a > 0.0 { rng.random_range(-*a..=*a) } else { 0.0 });
        }
        waypoints.push(point);
    }
    Reference::from_waypoints(waypoints, layout.segment_duration, duration, dt)
}
