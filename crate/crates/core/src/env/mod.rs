//! Dynamics models, task costs and reference trajectories.

mod cartpole;
mod ltv;
mod quadrotor;
mod reference;

pub use cartpole::{cartpole_step, CartPole, CartPoleCost, CartPoleParams, CARTPOLE_NOMINAL_GAIN};
pub use ltv::{ltv_step, LtvSystem};
pub use quadrotor::{
    quadrotor_step, yaw_of, FlatnessGains, Quadrotor, QuadrotorCost, QuadrotorNominal,
    QuadrotorParams, QUADROTOR_STATE_DIM,
};
pub use reference::{zigzag_reference, Reference, ReferenceKind, ZigzagConfig};

/// A discrete-time control problem: `x_{k+1} = f_k(x_k, u_k)` with running cost
/// `c_k(x_k, u_k)` and terminal cost `c_f`. `k` is the absolute time index, so
/// time-varying references and system matrices line up across receding-horizon
/// windows.
pub trait Environment: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;

    /// Writes `f_k(x, u)` into `next`. Non-finite results are propagated, not
    /// reported; callers check finiteness where it matters.
    fn step_into(&self, x: &[f64], u: &[f64], k: usize, next: &mut [f64]);

    fn running_cost(&self, x: &[f64], u: &[f64], k: usize) -> f64;

    fn terminal_cost(&self, x: &[f64], k: usize) -> f64;

    /// Per-component control limits `(lower, upper)`, if any.
    fn control_bounds(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        None
    }

    /// Control that holds the system at rest (hover thrust, zero force).
    fn equilibrium_control(&self) -> Vec<f64> {
        vec![0.0; self.control_dim()]
    }

    /// Distance to the reference at step `k`, in the task's reporting units.
    fn tracking_error(&self, _x: &[f64], _k: usize) -> Option<f64> {
        None
    }

    fn step(&self, x: &[f64], u: &[f64], k: usize) -> Vec<f64> {
        let mut next = vec![0.0; self.state_dim()];
        self.step_into(x, u, k, &mut next);
        next
    }

    fn clamp_control(&self, u: &mut [f64]) {
        if let Some((lo, hi)) = self.control_bounds() {
            for ((x, l), h) in u.iter_mut().zip(&lo).zip(&hi) {
                *x = x.clamp(*l, *h);
            }
        }
    }
}

impl<E: Environment + ?Sized> Environment for &E {
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }
    fn control_dim(&self) -> usize {
        (**self).control_dim()
    }
    fn step_into(&self, x: &[f64], u: &[f64], k: usize, next: &mut [f64]) {
        (**self).step_into(x, u, k, next)
    }
    fn running_cost(&self, x: &[f64], u: &[f64], k: usize) -> f64 {
        (**self).running_cost(x, u, k)
    }
    fn terminal_cost(&self, x: &[f64], k: usize) -> f64 {
        (**self).terminal_cost(x, k)
    }
    fn control_bounds(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        (**self).control_bounds()
    }
    fn equilibrium_control(&self) -> Vec<f64> {
        (**self).equilibrium_control()
    }
    fn tracking_error(&self, x: &[f64], k: usize) -> Option<f64> {
        (**self).tracking_error(x, k)
    }
}

/// Problem with no dynamics and zero cost; useful for boundary tests.
#[derive(Clone, Debug)]
pub struct ZeroCostEnv {
    pub state_dim: usize,
    pub control_dim: usize,
}

impl Environment for ZeroCostEnv {
    fn state_dim(&self) -> usize {
        self.state_dim
    }
    fn control_dim(&self) -> usize {
        self.control_dim
    }
    fn step_into(&self, x: &[f64], _u: &[f64], _k: usize, next: &mut [f64]) {
        next.copy_from_slice(x);
    }
    fn running_cost(&self, _x: &[f64], _u: &[f64], _k: usize) -> f64 {
        0.0
    }
    fn terminal_cost(&self, _x: &[f64], _k: usize) -> f64 {
        0.0
    }
}
