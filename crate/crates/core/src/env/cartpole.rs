use serde::{Deserialize, Serialize};
use std::sync::Arc;

use super::{Environment, Reference};
use crate::error::{Error, Result};

/// Feedback gain of the nominal cart-pole controller, on
/// `(cart pos, cart vel, angle, angular vel)` errors.
pub const CARTPOLE_NOMINAL_GAIN: [f64; 4] = [0.5, 0.5, 5.0, 5.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CartPoleParams {
    pub cart_mass: f64,
    pub pole_mass: f64,
    /// Distance from pivot to the pole's center of mass.
    pub half_length: f64,
    pub gravity: f64,
    pub dt: f64,
    pub force_limit: f64,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        Self {
            cart_mass: 1.0,
            pole_mass: 0.1,
            half_length: 0.5,
            gravity: 9.81,
            dt: 0.02,
            force_limit: 10.0,
        }
    }
}

/// Tracking cost. The angle term uses `2 (1 - cos(theta - angle_reference))`,
/// which equals the squared angle error to second order and stays smooth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CartPoleCost {
    pub position: f64,
    pub velocity: f64,
    pub angle: f64,
    pub angular_velocity: f64,
    pub control: f64,
    /// Angle the pole should hold: 0 upright, pi hanging.
    pub angle_reference: f64,
    /// Multiplier on the state terms at the end of the horizon.
    pub terminal: f64,
}

impl Default for CartPoleCost {
    fn default() -> Self {
        Self {
            position: 1.0,
            velocity: 0.0,
            angle: 1.0,
            angular_velocity: 0.0,
            control: 1e-3,
            angle_reference: 0.0,
            terminal: 1.0,
        }
    }
}

/// Time derivative of `(x, x_dot, theta, theta_dot)` under force `u`; theta is
/// measured from upright.
pub(crate) fn cartpole_derivative(p: &CartPoleParams, s: &[f64; 4], u: f64) -> [f64; 4] {
    let total = p.cart_mass + p.pole_mass;
    let pml = p.pole_mass * p.half_length;
    let (sin, cos) = s[2].sin_cos();
    let temp = (u + pml * s[3] * s[3] * sin) / total;
    let theta_acc =
        (p.gravity * sin - cos * temp) / (p.half_length * (4.0 / 3.0 - p.pole_mass * cos * cos / total));
    let x_acc = temp - pml * theta_acc * cos / total;
    [s[1], x_acc, s[3], theta_acc]
}

fn semi_implicit_euler(p: &CartPoleParams, x: &[f64], u: f64, dt: f64, next: &mut [f64]) {
    let s = [x[0], x[1], x[2], x[3]];
    let d = cartpole_derivative(p, &s, u);
    let v = s[1] + dt * d[1];
    let w = s[3] + dt * d[3];
    next[0] = s[0] + dt * v;
    next[1] = v;
    next[2] = s[2] + dt * w;
    next[3] = w;
}

/// One semi-implicit Euler step of the cart-pole.
pub fn cartpole_step(params: &CartPoleParams, x: &[f64], u: f64, dt: f64) -> Result<Vec<f64>> {
    if x.len() != 4 {
        return Err(Error::DimensionMismatch {
            expected: 4,
            got: x.len(),
        });
    }
    if !x.iter().all(|v| v.is_finite()) || !u.is_finite() {
        return Err(Error::NonFiniteState { step: 0 });
    }
    let mut next = vec![0.0; 4];
    semi_implicit_euler(params, x, u, dt, &mut next);
    if !next.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteState { step: 1 });
    }
    Ok(next)
}

/// Cart-pole tracking a cart-position reference.
#[derive(Clone, Debug)]
pub struct CartPole {
    pub params: CartPoleParams,
    pub cost: CartPoleCost,
    pub reference: Arc<Reference>,
}

impl CartPole {
    pub fn new(params: CartPoleParams, cost: CartPoleCost, reference: Arc<Reference>) -> Self {
        assert_eq!(reference.dim(), 1, "cart-pole reference is one-dimensional");
        Self {
            params,
            cost,
            reference,
        }
    }

    /// Rest state of the tracking task: cart at the origin, pole at its reference angle.
    pub fn initial_state(&self) -> Vec<f64> {
        vec![0.0, 0.0, self.cost.angle_reference, 0.0]
    }

    fn state_cost(&self, x: &[f64], k: usize) -> f64 {
        let c = &self.cost;
        let dp = x[0] - self.reference.position(k)[0];
        let dv = x[1] - self.reference.velocity(k)[0];
        let angle = 2.0 * (1.0 - (x[2] - c.angle_reference).cos());
        c.position * dp * dp + c.velocity * dv * dv + c.angle * angle + c.angular_velocity * x[3] * x[3]
    }

    /// `u = -K (x - x_ref)` with `K` = [`CARTPOLE_NOMINAL_GAIN`], clamped to the force limit.
    pub fn nominal_control(&self, x: &[f64], k: usize) -> Result<f64> {
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteState { step: k });
        }
        let angle_error = wrap_angle(x[2] - self.cost.angle_reference);
        let error = [
            x[0] - self.reference.position(k)[0],
            x[1] - self.reference.velocity(k)[0],
            angle_error,
            x[3],
        ];
        let u: f64 = -CARTPOLE_NOMINAL_GAIN
            .iter()
            .zip(error)
            .map(|(k, e)| k * e)
            .sum::<f64>();
        Ok(u.clamp(-self.params.force_limit, self.params.force_limit))
    }
}

pub(crate) fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut w = a % two_pi;
    if w > std::f64::consts::PI {
        w -= two_pi;
    } else if w < -std::f64::consts::PI {
        w += two_pi;
    }
    w
}

impl Environment for CartPole {
    fn state_dim(&self) -> usize {
        4
    }

    fn control_dim(&self) -> usize {
        1
    }

    fn step_into(&self, x: &[f64], u: &[f64], _k: usize, next: &mut [f64]) {
        semi_implicit_euler(&self.params, x, u[0], self.params.dt, next);
    }

    fn running_cost(&self, x: &[f64], u: &[f64], k: usize) -> f64 {
        self.state_cost(x, k) + self.cost.control * u[0] * u[0]
    }

    fn terminal_cost(&self, x: &[f64], k: usize) -> f64 {
        self.cost.terminal * self.state_cost(x, k)
    }

    fn control_bounds(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        Some((vec![-self.params.force_limit], vec![self.params.force_limit]))
    }

    fn tracking_error(&self, x: &[f64], k: usize) -> Option<f64> {
        Some((x[0] - self.reference.position(k)[0]).abs())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn rk4(p: &CartPoleParams, s: [f64; 4], u: f64, dt: f64) -> [f64; 4] {
        let add = |a: &[f64; 4], b: &[f64; 4], h: f64| -> [f64; 4] {
            [a[0] + h * b[0], a[1] + h * b[1], a[2] + h * b[2], a[3] + h * b[3]]
        };
        let k1 = cartpole_derivative(p, &s, u);
        let k2 = cartpole_derivative(p, &add(&s, &k1, dt / 2.0), u);
        let k3 = cartpole_derivative(p, &add(&s, &k2, dt / 2.0), u);
        let k4 = cartpole_derivative(p, &add(&s, &k3, dt), u);
        let mut out = s;
        for i in 0..4 {
            out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        out
    }

    #[test]
    fn upright_equilibrium_is_fixed() {
        let p = CartPoleParams::default();
        assert_eq!(cartpole_step(&p, &[0.0; 4], 0.0, p.dt).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn hanging_equilibrium_is_fixed() {
        let p = CartPoleParams::default();
        let next = cartpole_step(&p, &[0.0, 0.0, PI, 0.0], 0.0, p.dt).unwrap();
        assert!((next[2] - PI).abs() < 1e-15);
        assert!(next[3].abs() < 1e-15);
    }

    #[test]
    fn tilted_pole_falls_like_rk4() {
        let p = CartPoleParams::default();
        let s = [0.0, 0.0, 0.1, 0.0];
        let next = cartpole_step(&p, &s, 0.0, p.dt).unwrap();
        assert!(next[2] > 0.1 && next[3] > 0.0);
        let mut exact = s;
        for _ in 0..100 {
            exact = rk4(&p, exact, 0.0, p.dt / 100.0);
        }
        assert!(exact[2] > 0.1 && exact[3] > 0.0);
        assert!((next[3] - exact[3]).abs() < 0.02 * exact[3].abs());
    }

    #[test]
    fn step_halving_converges() {
        let p = CartPoleParams::default();
        let mut coarse = vec![0.0, 0.0, 0.2, 0.0];
        let mut fine = coarse.clone();
        for _ in 0..25 {
            coarse = cartpole_step(&p, &coarse, 1.0, p.dt).unwrap();
            fine = cartpole_step(&p, &fine, 1.0, p.dt / 2.0).unwrap();
            fine = cartpole_step(&p, &fine, 1.0, p.dt / 2.0).unwrap();
        }
        let mut exact = [0.0, 0.0, 0.2, 0.0];
        for _ in 0..25 * 200 {
            exact = rk4(&p, exact, 1.0, p.dt / 200.0);
        }
        let err_coarse = (coarse[2] - exact[2]).abs();
        let err_fine = (fine[2] - exact[2]).abs();
        assert!(err_fine < 0.6 * err_coarse, "{err_fine} vs {err_coarse}");
    }

    #[test]
    fn non_finite_state_is_rejected() {
        let p = CartPoleParams::default();
        assert!(matches!(
            cartpole_step(&p, &[f64::NAN, 0.0, 0.0, 0.0], 0.0, p.dt),
            Err(Error::NonFiniteState { .. })
        ));
    }

    #[test]
    fn nominal_control_cases() {
        let reference = Arc::new(Reference::stationary(vec![0.0], 0.02));
        let env = CartPole::new(CartPoleParams::default(), CartPoleCost::default(), reference);
        assert_eq!(env.nominal_control(&[0.0; 4], 0).unwrap(), 0.0);
        assert_eq!(env.nominal_control(&[1.0, 0.0, 0.0, 0.0], 0).unwrap(), -0.5);
        assert!(env.nominal_control(&[f64::INFINITY, 0.0, 0.0, 0.0], 0).is_err());
    }

    #[test]
    fn angle_cost_is_smooth_and_wrapped() {
        let reference = Arc::new(Reference::stationary(vec![0.0], 0.02));
        let env = CartPole::new(CartPoleParams::default(), CartPoleCost::default(), reference);
        let a = env.running_cost(&[0.0, 0.0, 0.01, 0.0], &[0.0], 0);
        assert!((a - 1e-4).abs() < 1e-8);
        let b = env.running_cost(&[0.0, 0.0, 0.01 + 2.0 * PI, 0.0], &[0.0], 0);
        assert!((a - b).abs() < 1e-12);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
    }
}
