//! Total cost by rollout, quadratic costs of linear systems, and
//! finite-difference Hessians.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::env::{Environment, LtvSystem};
use crate::error::{Error, Result};
use crate::numerics::{symmetric_eigen, SpdMatrix};
use crate::sequence::ControlSequence;

/// `J(U) = U^T D U + d^T U + J0` with its minimizer.
#[derive(Clone, Debug)]
pub struct QuadraticCost {
    pub hessian: SpdMatrix,
    pub linear: DVector<f64>,
    pub offset: f64,
    pub minimizer: DVector<f64>,
    pub minimum: f64,
}

impl QuadraticCost {
    pub fn new(hessian: SpdMatrix, linear: DVector<f64>, offset: f64) -> Result<Self> {
        if linear.len() != hessian.dim() {
            return Err(Error::DimensionMismatch {
                expected: hessian.dim(),
                got: linear.len(),
            });
        }
        let inv = hessian.inverse();
        let minimizer = -0.5 * (&inv * &linear);
        let minimum = offset - 0.25 * linear.dot(&(&inv * &linear));
        Ok(Self {
            hessian,
            linear,
            offset,
            minimizer,
            minimum,
        })
    }

    /// `J(U) = (U - U*)^T D (U - U*) + J*`.
    pub fn centered(hessian: SpdMatrix, minimizer: DVector<f64>, minimum: f64) -> Result<Self> {
        let linear = -2.0 * (hessian.matrix() * &minimizer);
        let offset = minimum + minimizer.dot(&(hessian.matrix() * &minimizer));
        Ok(Self {
            hessian,
            linear,
            offset,
            minimizer,
            minimum,
        })
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn evaluate(&self, u: &[f64]) -> f64 {
        let d = self.hessian.matrix();
        let mut quad = 0.0;
        let mut lin = 0.0;
        for i in 0..u.len() {
            let mut row = 0.0;
            for j in 0..u.len() {
                row += d[(i, j)] * u[j];
            }
            quad += u[i] * row;
            lin += self.linear[i] * u[i];
        }
        quad + lin + self.offset
    }

    /// `J(U) - J*` evaluated as `(U - U*)^T D (U - U*)`, free of the
    /// cancellation in `evaluate(U) - minimum`.
    pub fn excess(&self, u: &[f64]) -> f64 {
        let e = DVector::from_column_slice(u) - &self.minimizer;
        e.dot(&(self.hessian.matrix() * &e))
    }

    pub fn gradient(&self, u: &[f64]) -> DVector<f64> {
        2.0 * (self.hessian.matrix() * DVector::from_column_slice(u)) + &self.linear
    }
}

/// Scratch buffers for allocation-free rollouts.
#[derive(Clone, Debug)]
pub struct RolloutBuffers {
    x: Vec<f64>,
    next: Vec<f64>,
}

impl RolloutBuffers {
    pub fn new(state_dim: usize) -> Self {
        Self {
            x: vec![0.0; state_dim],
            next: vec![0.0; state_dim],
        }
    }
}

/// Cost of `controls` (flattened, `m` per step) from `x0` starting at absolute
/// step `t0`: running costs over the horizon plus the terminal cost. Returns
/// `+inf` once the accumulated cost stops being finite.
pub fn rollout_cost<E: Environment + ?Sized>(
    env: &E,
    x0: &[f64],
    controls: &[f64],
    t0: usize,
    buf: &mut RolloutBuffers,
) -> f64 {
    let m = env.control_dim();
    buf.x.copy_from_slice(x0);
    rollout_tail(env, controls, m, t0, 0, 0.0, buf)
}

/// Continues a rollout whose state at horizon step `start` is already in
/// `buf.x` and whose cost so far is `acc`.
fn rollout_tail<E: Environment + ?Sized>(
    env: &E,
    controls: &[f64],
    m: usize,
    t0: usize,
    start: usize,
    mut acc: f64,
    buf: &mut RolloutBuffers,
) -> f64 {
    let horizon = controls.len() / m;
    for h in start..horizon {
        let u = &controls[h * m..(h + 1) * m];
        acc += env.running_cost(&buf.x, u, t0 + h);
        if !acc.is_finite() {
            return f64::INFINITY;
        }
        env.step_into(&buf.x, u, t0 + h, &mut buf.next);
        std::mem::swap(&mut buf.x, &mut buf.next);
    }
    acc += env.terminal_cost(&buf.x, t0 + horizon);
    if acc.is_finite() {
        acc
    } else {
        f64::INFINITY
    }
}

/// Total cost of `u` from state `x0` at absolute step `t0`.
pub fn total_cost<E: Environment + ?Sized>(env: &E, x0: &[f64], u: &ControlSequence, t0: usize) -> Result<f64> {
    if x0.len() != env.state_dim() {
        return Err(Error::DimensionMismatch {
            expected: env.state_dim(),
            got: x0.len(),
        });
    }
    if u.control_dim() != env.control_dim() {
        return Err(Error::DimensionMismatch {
            expected: env.control_dim(),
            got: u.control_dim(),
        });
    }
    let mut x = x0.to_vec();
    let mut next = vec![0.0; x.len()];
    let mut acc = 0.0;
    for h in 0..u.horizon() {
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteState { step: h });
        }
        acc += env.running_cost(&x, u.block(h), t0 + h);
        env.step_into(&x, u.block(h), t0 + h, &mut next);
        std::mem::swap(&mut x, &mut next);
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteState { step: u.horizon() });
    }
    acc += env.terminal_cost(&x, t0 + u.horizon());
    if !acc.is_finite() {
        return Err(Error::NonFiniteCost);
    }
    Ok(acc)
}

/// Quadratic total cost of an LTV system over its full length. The first
/// state is `x0` and is not affected by any control; the last control affects
/// no state inside the horizon and is only penalized through `R`.
pub fn assemble_ltv_cost(sys: &LtvSystem, x0: &[f64]) -> Result<QuadraticCost> {
    let n = sys.state_dim();
    let m = sys.control_dim();
    let horizon = sys.len();
    if x0.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: x0.len(),
        });
    }
    // Stacked states x = M U + c over h = 0..H-1.
    let mut map = DMatrix::zeros(n * horizon, m * horizon);
    let mut free = DVector::zeros(n * horizon);
    free.rows_mut(0, n).copy_from(&DVector::from_column_slice(x0));
    for h in 1..horizon {
        let a = sys.a(h - 1);
        let prev_free = free.rows(n * (h - 1), n).into_owned();
        let next_free = a * prev_free + sys.w(h - 1);
        free.rows_mut(n * h, n).copy_from(&next_free);
        let prev_map = map.rows(n * (h - 1), n).into_owned();
        let mut next_map = a * prev_map;
        next_map
            .view_mut((0, m * (h - 1)), (n, m))
            .copy_from(sys.b(h - 1));
        map.rows_mut(n * h, n).copy_from(&next_map);
    }
    let mut q = DMatrix::zeros(n * horizon, n * horizon);
    let mut r = DMatrix::zeros(m * horizon, m * horizon);
    for h in 0..horizon {
        q.view_mut((n * h, n * h), (n, n)).copy_from(sys.q(h));
        r.view_mut((m * h, m * h), (m, m)).copy_from(sys.r(h));
    }
    let qm = &q * &map;
    let hessian = map.transpose() * &qm + r;
    let linear = 2.0 * (qm.transpose() * &free);
    let offset = free.dot(&(&q * &free));
    QuadraticCost::new(SpdMatrix::new(hessian)?, linear, offset)
}

/// Finite-difference curvature at an expansion point.
#[derive(Clone, Debug)]
pub struct HessianEstimate {
    /// Symmetrized second differences, an estimate of the full Hessian of `J`.
    pub raw: DMatrix<f64>,
    pub regularized: SpdMatrix,
    pub epsilon: f64,
    pub gradient: DVector<f64>,
}

/// Relative size of the regularization floor.
pub const HESSIAN_FLOOR: f64 = 1e-3;

/// Regularization floor `HESSIAN_FLOOR * max(1, trace / dim)`. After the
/// shift the most negative direction sits at this floor, and the covariance
/// gives it variance proportional to `floor^(-1/2)`.
pub fn hessian_epsilon(raw: &DMatrix<f64>) -> f64 {
    let dim = raw.nrows().max(1) as f64;
    HESSIAN_FLOOR * (raw.trace() / dim).max(1.0)
}

/// Shifts `raw` by a nonnegative multiple of the identity so its smallest
/// eigenvalue is at least `eps`. The shift overshoots by a few ulps of the
/// spectral radius so a second application is a no-op.
pub fn regularize_hessian(raw: &DMatrix<f64>, eps: f64) -> Result<SpdMatrix> {
    let mut sym = (raw + raw.transpose()) * 0.5;
    let (values, _) = symmetric_eigen(&sym)?;
    let lo = values[0];
    let hi = values[values.len() - 1];
    let slack = 64.0 * f64::EPSILON * lo.abs().max(hi.abs()).max(eps);
    if lo < eps {
        let shift = eps - lo + slack;
        for i in 0..sym.nrows() {
            sym[(i, i)] += shift;
        }
    }
    SpdMatrix::new(sym)
}

fn hessian_step(x: f64) -> f64 {
    let h = f64::EPSILON.powf(0.25) * (1.0 + x.abs());
    (x + h) - x
}

fn gradient_step(x: f64) -> f64 {
    let h = f64::EPSILON.cbrt() * (1.0 + x.abs());
    (x + h) - x
}

/// Four-point second differences for every upper-triangle entry plus central
/// first differences. `eval` receives at most two `(index, offset)`
/// perturbations of the expansion point. Entries are computed independently,
/// so the result does not depend on scheduling.
fn stencil<F>(u0: &[f64], eval: F) -> Result<(DMatrix<f64>, DVector<f64>)>
where
    F: Fn(&[(usize, f64)]) -> f64 + Sync,
{
    let n = u0.len();
    let steps: Vec<f64> = u0.iter().map(|&x| hessian_step(x)).collect();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let hi = steps[i];
            (i..n)
                .map(|j| {
                    let hj = steps[j];
                    let pp = eval(&[(i, hi), (j, hj)]);
                    let pm = eval(&[(i, hi), (j, -hj)]);
                    let mp = eval(&[(i, -hi), (j, hj)]);
                    let mm = eval(&[(i, -hi), (j, -hj)]);
                    ((pp - pm) - (mp - mm)) / (4.0 * hi * hj)
                })
                .collect()
        })
        .collect();
    let gradient: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let h = gradient_step(u0[i]);
            (eval(&[(i, h)]) - eval(&[(i, -h)])) / (2.0 * h)
        })
        .collect();
    let mut raw = DMatrix::zeros(n, n);
    for (i, row) in rows.iter().enumerate() {
        for (k, v) in row.iter().enumerate() {
            raw[(i, i + k)] = *v;
            raw[(i + k, i)] = *v;
        }
    }
    if raw.iter().chain(&gradient).any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteCost);
    }
    Ok((raw, DVector::from_vec(gradient)))
}

fn finish(raw: DMatrix<f64>, gradient: DVector<f64>) -> Result<HessianEstimate> {
    let epsilon = hessian_epsilon(&raw);
    let regularized = regularize_hessian(&raw, epsilon)?;
    Ok(HessianEstimate {
        raw,
        regularized,
        epsilon,
        gradient,
    })
}

/// Finite-difference Hessian and gradient of an arbitrary cost at `u0`.
pub fn numerical_hessian<F>(cost: F, u0: &[f64]) -> Result<HessianEstimate>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let (raw, gradient) = stencil(u0, |perturb| {
        let mut u = u0.to_vec();
        for &(k, h) in perturb {
            u[k] += h;
        }
        cost(&u)
    })?;
    finish(raw, gradient)
}

/// Finite-difference Hessian of the rollout cost `u -> J_t(u)`. Perturbed
/// rollouts restart from the cached nominal state at the first perturbed
/// step, which skips the unchanged prefix.
pub fn rollout_hessian<E: Environment + ?Sized>(
    env: &E,
    x0: &[f64],
    t0: usize,
    u0: &ControlSequence,
) -> Result<HessianEstimate> {
    let m = env.control_dim();
    let horizon = u0.horizon();
    let controls = u0.as_slice();
    // states[h] is the nominal state entering step h; prefix[h] its cost so far.
    let mut states = Vec::with_capacity(horizon + 1);
    let mut prefix = Vec::with_capacity(horizon + 1);
    let mut buf = RolloutBuffers::new(env.state_dim());
    buf.x.copy_from_slice(x0);
    let mut acc = 0.0;
    for h in 0..horizon {
        states.push(buf.x.clone());
        prefix.push(acc);
        let u = &controls[h * m..(h + 1) * m];
        acc += env.running_cost(&buf.x, u, t0 + h);
        env.step_into(&buf.x, u, t0 + h, &mut buf.next);
        std::mem::swap(&mut buf.x, &mut buf.next);
    }
    if !acc.is_finite() {
        return Err(Error::NonFiniteCost);
    }
    let (raw, gradient) = stencil(controls, |perturb| {
        let start = perturb.iter().map(|(k, _)| k / m).min().unwrap_or(0);
        let mut u = controls.to_vec();
        for &(k, h) in perturb {
            u[k] += h;
        }
        let mut buf = RolloutBuffers::new(env.state_dim());
        buf.x.copy_from_slice(&states[start]);
        rollout_tail(env, &u, m, t0, start, prefix[start], &mut buf)
    })?;
    finish(raw, gradient)
}
