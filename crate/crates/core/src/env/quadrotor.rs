use nalgebra::{Matrix3, Vector3};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use super::cartpole::wrap_angle;
use super::{Environment, Reference};
use crate::error::{Error, Result};
use crate::numerics::RandomStream;

/// `p (3), v (3), R (9, row-major), omega (3)`.
pub const QUADROTOR_STATE_DIM: usize = 18;

const ROTATION_TOLERANCE: f64 = 1e-6;

/// Quadrotor model with `+z` pointing down: gravity acts along `+e3` and the
/// mass-normalized thrust `f` is non-positive, so hover is `f = -g`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadrotorParams {
    pub gravity: f64,
    pub dt: f64,
    /// Largest thrust magnitude per unit mass; `f` lies in `[-thrust_max, 0]`.
    pub thrust_max: f64,
    /// Bound on each commanded body rate, rad/s.
    pub rate_max: f64,
    /// Time constant of the body-rate inner loop.
    pub rate_time_constant: f64,
    /// Standard deviation of the position disturbance; zero disables it.
    pub disturbance_std: f64,
    pub disturbance_seed: u64,
}

impl Default for QuadrotorParams {
    fn default() -> Self {
        Self {
            gravity: 9.81,
            dt: 0.02,
            thrust_max: 2.0 * 9.81,
            rate_max: 8.0,
            rate_time_constant: 0.05,
            disturbance_std: 0.0,
            disturbance_seed: 0,
        }
    }
}

/// Tracking cost `position |p - p_ref|^2 + velocity |v - v_ref|^2 +
/// control |u - u_hover|^2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadrotorCost {
    pub position: f64,
    pub velocity: f64,
    pub control: f64,
    /// Weight on `2 (1 - cos(yaw))`.
    pub yaw: f64,
    /// Multiplier on the state terms at the end of the horizon.
    pub terminal: f64,
}

impl Default for QuadrotorCost {
    fn default() -> Self {
        Self {
            position: 1.0,
            velocity: 0.0,
            control: 1e-3,
            yaw: 0.0,
            terminal: 1.0,
        }
    }
}

fn rotation(x: &[f64]) -> Matrix3<f64> {
    Matrix3::from_row_slice(&x[6..15])
}

fn rotation_deviation(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).norm()
}

fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let c0 = r.column(0).normalize();
    let c1 = r.column(1) - c0 * c0.dot(&r.column(1));
    let c1 = c1.normalize();
    let c2 = c0.cross(&c1);
    Matrix3::from_columns(&[c0, c1, c2])
}

fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Yaw angle of `R` about the vertical axis.
pub fn yaw_of(r: &Matrix3<f64>) -> f64 {
    r[(1, 0)].atan2(r[(0, 0)])
}

fn integrate(params: &QuadrotorParams, x: &[f64], u: &[f64], disturbance: Vector3<f64>, next: &mut [f64]) {
    let dt = params.dt;
    let r = rotation(x);
    let v = Vector3::new(x[3], x[4], x[5]);
    let w = Vector3::new(x[15], x[16], x[17]);
    let w_des = Vector3::new(u[1], u[2], u[3]);
    let acc = Vector3::new(0.0, 0.0, params.gravity) + r.column(2) * u[0] + disturbance;
    for i in 0..3 {
        next[i] = x[i] + dt * v[i];
        next[3 + i] = v[i] + dt * acc[i];
    }
    let r_next = orthonormalize(&(r * (Matrix3::identity() + hat(&w) * dt)));
    for i in 0..3 {
        for j in 0..3 {
            next[6 + 3 * i + j] = r_next[(i, j)];
        }
    }
    let blend = -(-dt / params.rate_time_constant).exp_m1();
    for i in 0..3 {
        next[15 + i] = w[i] + blend * (w_des[i] - w[i]);
    }
}

/// One explicit Euler step with `R` re-orthonormalized and the body rate
/// following `omega_des` through an exact first-order lag. Control is
/// `(f, omega_des)`; no disturbance is applied.
pub fn quadrotor_step(params: &QuadrotorParams, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    if x.len() != QUADROTOR_STATE_DIM {
        return Err(Error::DimensionMismatch {
            expected: QUADROTOR_STATE_DIM,
            got: x.len(),
        });
    }
    if u.len() != 4 {
        return Err(Error::DimensionMismatch {
            expected: 4,
            got: u.len(),
        });
    }
    if !x.iter().chain(u).all(|v| v.is_finite()) {
        return Err(Error::NonFiniteState { step: 0 });
    }
    let deviation = rotation_deviation(&rotation(x));
    if deviation > ROTATION_TOLERANCE {
        return Err(Error::InvalidRotation { deviation });
    }
    let mut next = vec![0.0; QUADROTOR_STATE_DIM];
    integrate(params, x, u, Vector3::zeros(), &mut next);
    if !next.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteState { step: 1 });
    }
    Ok(next)
}

/// Quadrotor tracking a position reference. The disturbance at step `k` is a
/// pure function of `(disturbance_seed, k)`.
#[derive(Clone, Debug)]
pub struct Quadrotor {
    pub params: QuadrotorParams,
    pub cost: QuadrotorCost,
    pub reference: Arc<Reference>,
}

impl Quadrotor {
    pub fn new(params: QuadrotorParams, cost: QuadrotorCost, reference: Arc<Reference>) -> Self {
        assert_eq!(reference.dim(), 3, "quadrotor reference is three-dimensional");
        Self {
            params,
            cost,
            reference,
        }
    }

    /// Same model with the disturbance switched off.
    pub fn without_disturbance(&self) -> Self {
        let mut out = self.clone();
        out.params.disturbance_std = 0.0;
        out
    }

    /// At rest at the origin, level.
    pub fn initial_state() -> Vec<f64> {
        let mut x = vec![0.0; QUADROTOR_STATE_DIM];
        x[6] = 1.0;
        x[10] = 1.0;
        x[14] = 1.0;
        x
    }

    fn disturbance(&self, k: usize) -> Vector3<f64> {
        if self.params.disturbance_std <= 0.0 {
            return Vector3::zeros();
        }
        let mut rng = RandomStream::new(self.params.disturbance_seed)
            .domain(0xd157)
            .at_step(k as u64)
            .rng(0);
        let mut d = Vector3::zeros();
        for v in d.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = self.params.disturbance_std * z;
        }
        d
    }

    fn state_cost(&self, x: &[f64], k: usize) -> f64 {
        let p_ref = self.reference.position(k);
        let v_ref = self.reference.velocity(k);
        let mut pos = 0.0;
        let mut vel = 0.0;
        for i in 0..3 {
            pos += (x[i] - p_ref[i]).powi(2);
            vel += (x[3 + i] - v_ref[i]).powi(2);
        }
        let mut c = self.cost.position * pos + self.cost.velocity * vel;
        if self.cost.yaw != 0.0 {
            c += self.cost.yaw * 2.0 * (1.0 - yaw_of(&rotation(x)).cos());
        }
        c
    }
}

impl Environment for Quadrotor {
    fn state_dim(&self) -> usize {
        QUADROTOR_STATE_DIM
    }

    fn control_dim(&self) -> usize {
        4
    }

    fn step_into(&self, x: &[f64], u: &[f64], k: usize, next: &mut [f64]) {
        integrate(&self.params, x, u, self.disturbance(k), next);
    }

    fn running_cost(&self, x: &[f64], u: &[f64], k: usize) -> f64 {
        let du = (u[0] + self.params.gravity).powi(2) + u[1] * u[1] + u[2] * u[2] + u[3] * u[3];
        self.state_cost(x, k) + self.cost.control * du
    }

    fn terminal_cost(&self, x: &[f64], k: usize) -> f64 {
        self.cost.terminal * self.state_cost(x, k)
    }

    fn control_bounds(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let w = self.params.rate_max;
        Some((
            vec![-self.params.thrust_max, -w, -w, -w],
            vec![0.0, w, w, w],
        ))
    }

    fn equilibrium_control(&self) -> Vec<f64> {
        vec![-self.params.gravity, 0.0, 0.0, 0.0]
    }

    /// Position error in centimeters.
    fn tracking_error(&self, x: &[f64], k: usize) -> Option<f64> {
        let p_ref = self.reference.position(k);
        let sq: f64 = (0..3).map(|i| (x[i] - p_ref[i]).powi(2)).sum();
        Some(100.0 * sq.sqrt())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlatnessGains {
    pub position: f64,
    pub velocity: f64,
    pub integral: f64,
    pub attitude: f64,
    pub yaw: f64,
}

impl Default for FlatnessGains {
    fn default() -> Self {
        Self {
            position: 6.0,
            velocity: 4.0,
            integral: 0.05,
            attitude: 8.0,
            yaw: 2.0,
        }
    }
}

/// Differential-flatness tracking controller. Carries the position-error
/// integral, so one instance follows one trajectory.
#[derive(Clone, Debug)]
pub struct QuadrotorNominal {
    pub gains: FlatnessGains,
    integral: Vector3<f64>,
}

impl QuadrotorNominal {
    pub fn new(gains: FlatnessGains) -> Self {
        Self {
            gains,
            integral: Vector3::zeros(),
        }
    }

    pub fn reset(&mut self) {
        self.integral = Vector3::zeros();
    }

    /// Commanded `(f, omega_des)` at state `x` and step `k`; advances the integral.
    pub fn control(&mut self, env: &Quadrotor, x: &[f64], k: usize) -> Result<[f64; 4]> {
        if x.len() != QUADROTOR_STATE_DIM {
            return Err(Error::DimensionMismatch {
                expected: QUADROTOR_STATE_DIM,
                got: x.len(),
            });
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteState { step: k });
        }
        let g = &self.gains;
        let p = Vector3::new(x[0], x[1], x[2]);
        let v = Vector3::new(x[3], x[4], x[5]);
        let p_ref = Vector3::from_column_slice(env.reference.position(k));
        let v_ref = Vector3::from_column_slice(env.reference.velocity(k));
        let e_p = p - p_ref;
        let a_fb = -g.position * e_p - g.velocity * (v - v_ref) - g.integral * self.integral
            - Vector3::new(0.0, 0.0, env.params.gravity);
        self.integral += env.params.dt * e_p;

        let r = rotation(x);
        let z = r.column(2).into_owned();
        let thrust = a_fb.dot(&z);
        // Thrust is non-positive, so the body axis has to point against a_fb.
        let z_fb = a_fb.normalize();
        let yaw_rate = -g.yaw * wrap_angle(yaw_of(&r));
        let w_world = g.attitude * z_fb.cross(&z);
        let w_body = r.transpose() * w_world + Vector3::new(0.0, 0.0, yaw_rate);

        let mut u = [thrust, w_body.x, w_body.y, w_body.z];
        env.clamp_control(&mut u);
        Ok(u)
    }
}
