//! Sampling covariances under a determinant budget, and the contraction rates
//! they induce on quadratic costs.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numerics::{symmetric_eigen, SpdMatrix};

const EXACT_MAX_ITERATIONS: usize = 500;
const EXACT_STATIONARITY: f64 = 1e-10;
/// Gap components whose curvature-weighted square falls below this fraction
/// of the largest one are treated as exactly zero.
const INACTIVE_RELATIVE: f64 = 1e-24;
/// `(2/lambda) o_i Lambda_i` below which a coordinate no longer contracts.
const ABANDONED_COORDINATE: f64 = 1e-12;

/// A covariance sharing its eigenbasis with the cost Hessian.
#[derive(Clone, Debug)]
pub struct CovoSolution {
    pub sigma: SpdMatrix,
    /// Eigenvectors of the Hessian, as columns.
    pub basis: DMatrix<f64>,
    /// Covariance eigenvalue paired with each column of `basis`.
    pub eigenvalues: DVector<f64>,
    /// `|log det Sigma - log alpha|`.
    pub constraint_residual: f64,
    /// Relative spread of the stationarity ratios over active coordinates;
    /// set by the exact solver only.
    pub kkt_residual: Option<f64>,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveAlpha { alpha })
    }
}

fn assemble(log_values: &[f64], basis: DMatrix<f64>, alpha: f64, kkt: Option<f64>) -> Result<CovoSolution> {
    let eigenvalues = DVector::from_iterator(log_values.len(), log_values.iter().map(|y| y.exp()));
    let log_det: f64 = log_values.iter().sum();
    let sigma = SpdMatrix::from_eigen(eigenvalues.clone(), basis.clone())?;
    Ok(CovoSolution {
        sigma,
        basis,
        eigenvalues,
        constraint_residual: (log_det - alpha.ln()).abs(),
        kkt_residual: kkt,
    })
}

/// `log Lambda_i` of the closed form `s D^{-1/2}`, with `s` fixing `det = alpha`.
fn closed_form_logs(hessian_eigenvalues: &DVector<f64>, alpha: f64) -> Vec<f64> {
    let n = hessian_eigenvalues.len() as f64;
    let logs: Vec<f64> = hessian_eigenvalues.iter().map(|o| o.ln()).collect();
    let log_scale = (alpha.ln() + 0.5 * logs.iter().sum::<f64>()) / n;
    logs.iter().map(|l| log_scale - 0.5 * l).collect()
}

/// `Sigma = s D^{-1/2}` with `s = (alpha sqrt(det D))^{1/dim}`, all in log space.
pub fn covo_closed_form(hessian: &SpdMatrix, alpha: f64) -> Result<CovoSolution> {
    check_alpha(alpha)?;
    let logs = closed_form_logs(hessian.eigenvalues(), alpha);
    assemble(&logs, hessian.eigenvectors().clone(), alpha, None)
}

/// `alpha^{1/dim} I`.
pub fn isotropic(dim: usize, alpha: f64) -> Result<SpdMatrix> {
    check_alpha(alpha)?;
    SpdMatrix::scaled_identity(dim, (alpha.ln() / dim as f64).exp())
}

/// Rescales `sigma` so its determinant is `alpha`.
pub fn normalize_determinant(sigma: &SpdMatrix, alpha: f64) -> Result<SpdMatrix> {
    check_alpha(alpha)?;
    let c = ((alpha.ln() - sigma.log_det_eigen()) / sigma.dim() as f64).exp();
    if c == 1.0 {
        return Ok(sigma.clone());
    }
    Ok(sigma.scaled(c))
}

/// Large-sample limit of one MPPI update on `J(U) = (U - U*)^T D (U - U*) + J*`:
/// `U* + (2/lambda Sigma D + I)^{-1} (U_in - U*)`.
pub fn fixed_point(
    hessian: &SpdMatrix,
    sigma: &SpdMatrix,
    lambda: f64,
    u_in: &DVector<f64>,
    u_star: &DVector<f64>,
) -> DVector<f64> {
    let n = hessian.dim();
    let m = sigma.matrix() * hessian.matrix() * (2.0 / lambda) + DMatrix::identity(n, n);
    let gap = u_in - u_star;
    let step = m.lu().solve(&gap).expect("I + PD*PD product is invertible");
    u_star + step
}

/// `J(fixed point) - J*`.
pub fn fixed_point_excess(
    hessian: &SpdMatrix,
    sigma: &SpdMatrix,
    lambda: f64,
    u_in: &DVector<f64>,
    u_star: &DVector<f64>,
) -> f64 {
    let e = fixed_point(hessian, sigma, lambda, u_in, u_star) - u_star;
    e.dot(&(hessian.matrix() * &e))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContractionBound {
    /// `||(2/lambda Sigma D + I)^{-1}||_2`.
    pub u_rate: f64,
    /// `||(I + 2/lambda D^{1/2} Sigma D^{1/2})^{-2}||_2`.
    pub j_rate: f64,
}

pub fn contraction_bound(hessian: &SpdMatrix, sigma: &SpdMatrix, lambda: f64) -> Result<ContractionBound> {
    let n = hessian.dim();
    let b = 2.0 / lambda;
    let m = sigma.matrix() * hessian.matrix() * b + DMatrix::identity(n, n);
    let smallest = m
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let root = hessian.sqrt();
    let inner = &root * sigma.matrix() * &root;
    let (mu, _) = symmetric_eigen(&((&inner + inner.transpose()) * 0.5))?;
    let j = 1.0 / (1.0 + b * mu[0].max(0.0));
    Ok(ContractionBound {
        u_rate: 1.0 / smallest,
        j_rate: j * j,
    })
}

/// `sum_i A_i / (c_i exp(y_i) + 1)^2` over active coordinates, where `A_i` is
/// the curvature-weighted squared gap and `c_i = (2/lambda) o_i`.
fn exact_objective(weights: &[f64], rates: &[f64], y: &[f64]) -> f64 {
    weights
        .iter()
        .zip(rates)
        .zip(y)
        .map(|((a, c), y)| a / (c * y.exp() + 1.0).powi(2))
        .sum()
}

/// Relative spread of `o_i^2 a_i Lambda_i / (1 + (2/lambda) o_i Lambda_i)^3`.
fn stationarity_spread(weights: &[f64], rates: &[f64], y: &[f64]) -> f64 {
    let ratios: Vec<f64> = weights
        .iter()
        .zip(rates)
        .zip(y)
        .map(|((a, c), y)| {
            let t = c * y.exp();
            a * t / (1.0 + t).powi(3)
        })
        .collect();
    if ratios.len() < 2 {
        return 0.0;
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    ratios.iter().map(|r| (r - mean).abs()).fold(0.0, f64::max) / mean.abs()
}

/// Minimizes the one-step excess cost over covariances sharing the Hessian's
/// eigenbasis with `det Sigma = alpha`, by constrained Newton descent on the
/// log-eigenvalues started at the closed form. Coordinates with no gap
/// component do not enter the objective; they keep their closed-form values
/// and the active coordinates share the remaining budget, so the result is
/// never worse than the closed form. When the temperature is large relative
/// to the curvature the infimum can sit on the boundary (one eigenvalue
/// driven to zero); that case reports [`Error::SolverDivergence`].
pub fn covo_exact(
    hessian: &SpdMatrix,
    u_in: &DVector<f64>,
    u_star: &DVector<f64>,
    lambda: f64,
    alpha: f64,
) -> Result<CovoSolution> {
    check_alpha(alpha)?;
    let basis = hessian.eigenvectors().clone();
    let o = hessian.eigenvalues();
    let gap = basis.transpose() * (u_in - u_star);
    let b = 2.0 / lambda;
    let mut y = closed_form_logs(o, alpha);

    let full_weights: Vec<f64> = (0..o.len()).map(|i| gap[i] * gap[i] * o[i]).collect();
    let top = full_weights.iter().copied().fold(0.0, f64::max);
    if top == 0.0 {
        return assemble(&y, basis, alpha, Some(0.0));
    }
    let active: Vec<usize> = (0..o.len())
        .filter(|&i| full_weights[i] > INACTIVE_RELATIVE * top)
        .collect();
    let weights: Vec<f64> = active.iter().map(|&i| full_weights[i]).collect();
    let rates: Vec<f64> = active.iter().map(|&i| b * o[i]).collect();
    let mut z: Vec<f64> = active.iter().map(|&i| y[i]).collect();

    let mut converged = z.len() < 2;
    let mut iterations = 0;
    while !converged {
        if iterations == EXACT_MAX_ITERATIONS {
            return Err(Error::SolverDivergence { iterations });
        }
        iterations += 1;
        let mut grad = Vec::with_capacity(z.len());
        let mut curv = Vec::with_capacity(z.len());
        for ((a, c), zi) in weights.iter().zip(&rates).zip(&z) {
            let t = c * zi.exp();
            if t < ABANDONED_COORDINATE {
                // The infimum lies on the boundary: one direction is given up
                // and the rest absorb unbounded volume. No stationary point.
                return Err(Error::SolverDivergence { iterations });
            }
            grad.push(-2.0 * a * t / (t + 1.0).powi(3));
            curv.push(-2.0 * a * t * (1.0 - 2.0 * t) / (t + 1.0).powi(4));
        }
        let scale = grad.iter().map(|g| g.abs()).fold(0.0, f64::max);
        if stationarity_spread(&weights, &rates, &z) <= EXACT_STATIONARITY || scale == 0.0 {
            converged = true;
            continue;
        }
        // Nonconvex coordinates get their curvature magnitude, floored so the
        // step stays a descent direction for the projected problem.
        let floor = 1e-12 * curv.iter().map(|h| h.abs()).fold(0.0, f64::max);
        let h: Vec<f64> = curv.iter().map(|h| h.abs().max(floor).max(f64::MIN_POSITIVE)).collect();
        let inv_sum: f64 = h.iter().map(|h| 1.0 / h).sum();
        let nu = -grad.iter().zip(&h).map(|(g, h)| g / h).sum::<f64>() / inv_sum;
        let dir: Vec<f64> = grad.iter().zip(&h).map(|(g, h)| -(g + nu) / h).collect();
        let slope: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        if slope >= 0.0 {
            converged = true;
            continue;
        }
        let f0 = exact_objective(&weights, &rates, &z);
        let mut step = 1.0;
        let max_move = dir.iter().map(|d| d.abs()).fold(0.0, f64::max);
        if max_move > 2.0 {
            step = 2.0 / max_move;
        }
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = z.iter().zip(&dir).map(|(z, d)| z + step * d).collect();
            if exact_objective(&weights, &rates, &trial) <= f0 + 1e-4 * step * slope {
                z = trial;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No representable decrease left along the Newton direction.
            converged = true;
        }
    }
    // Restore the active budget exactly; the updates are sum-preserving up to rounding.
    let target: f64 = active.iter().map(|&i| y[i]).sum();
    let drift = (z.iter().sum::<f64>() - target) / z.len() as f64;
    for (k, &i) in active.iter().enumerate() {
        y[i] = z[k] - drift;
    }
    let kkt = stationarity_spread(&weights, &rates, &z);
    assemble(&y, basis, alpha, Some(kkt))
}

/// One-step excess cost `sum_i a_i o_i / ((2/lambda) o_i Lambda_i + 1)^2` of a
/// covariance with eigenvalues `Lambda` in the Hessian's eigenbasis.
pub fn eigen_objective(
    hessian: &SpdMatrix,
    u_in: &DVector<f64>,
    u_star: &DVector<f64>,
    lambda: f64,
    covariance_eigenvalues: &[f64],
) -> f64 {
    let gap = hessian.eigenvectors().transpose() * (u_in - u_star);
    let b = 2.0 / lambda;
    hessian
        .eigenvalues()
        .iter()
        .zip(gap.iter())
        .zip(covariance_eigenvalues)
        .map(|((o, g), l)| g * g * o / (b * o * l + 1.0).powi(2))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RandomStream;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_spd(dim: usize, seed: u64, cond: f64) -> SpdMatrix {
        let mut rng = RandomStream::new(seed).rng(0);
        let a = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
        let q = a.qr().q();
        let values = DVector::from_fn(dim, |i, _| cond.powf(i as f64 / (dim.max(2) - 1) as f64));
        SpdMatrix::new(&q * DMatrix::from_diagonal(&values) * q.transpose()).unwrap()
    }

    fn det_rel_error(sigma: &SpdMatrix, alpha: f64) -> f64 {
        (sigma.log_det() - alpha.ln()).exp_m1().abs()
    }

    #[test]
    fn identity_hessian_unit_budget() {
        let sol = covo_closed_form(&SpdMatrix::scaled_identity(3, 1.0).unwrap(), 1.0).unwrap();
        assert!((sol.sigma.matrix() - DMatrix::identity(3, 3)).amax() < 1e-14);
    }

    #[test]
    fn diag_four_one() {
        let sol = covo_closed_form(&SpdMatrix::diagonal(&[4.0, 1.0]).unwrap(), 1.0).unwrap();
        let s = sol.sigma.matrix();
        assert!((s[(0, 0)] - 0.5f64.sqrt()).abs() < 1e-12);
        assert!((s[(1, 1)] - 2f64.sqrt()).abs() < 1e-12);
        assert!(s[(0, 1)].abs() < 1e-14);
        assert!(det_rel_error(&sol.sigma, 1.0) < 1e-12);
    }

    #[test]
    fn scaling_the_hessian_leaves_sigma_unchanged() {
        let d = random_spd(6, 3, 50.0);
        let a = covo_closed_form(&d, 0.3).unwrap();
        let b = covo_closed_form(&d.scaled(17.0), 0.3).unwrap();
        assert!((a.sigma.matrix() - b.sigma.matrix()).amax() < 1e-10 * a.sigma.matrix().amax());
    }

    #[test]
    fn closed_form_survives_tiny_budget_at_dim_128() {
        let alpha = 0.5f64.powi(32);
        for seed in 0..3 {
            let d = random_spd(128, seed, 1e4);
            let sol = covo_closed_form(&d, alpha).unwrap();
            assert!(sol.constraint_residual < 1e-8);
            assert!(det_rel_error(&sol.sigma, alpha) < 1e-8);
            let (s, dm) = (sol.sigma.matrix(), d.matrix());
            let comm = (s * dm - dm * s).norm();
            assert!(comm <= 1e-8 * sol.sigma.spectral_norm() * d.spectral_norm());
        }
    }

    #[test]
    fn rejects_nonpositive_alpha() {
        let d = SpdMatrix::scaled_identity(2, 1.0).unwrap();
        assert_eq!(covo_closed_form(&d, 0.0).unwrap_err(), Error::NonPositiveAlpha { alpha: 0.0 });
    }

    #[test]
    fn normalize_cases() {
        let id = SpdMatrix::scaled_identity(2, 1.0).unwrap();
        let out = normalize_determinant(&id, 4.0).unwrap();
        assert!((out.matrix() - DMatrix::identity(2, 2) * 2.0).amax() < 1e-14);
        let d = random_spd(5, 1, 10.0);
        let same = normalize_determinant(&d, d.log_det_eigen().exp()).unwrap();
        assert!((same.matrix() - d.matrix()).amax() < 1e-12);
        let scaled = normalize_determinant(&d, 0.01).unwrap();
        assert!(det_rel_error(&scaled, 0.01) < 1e-8);
        assert_eq!(scaled.eigenvectors(), d.eigenvectors());
    }

    #[test]
    fn contraction_rates_by_hand() {
        let id = SpdMatrix::scaled_identity(3, 1.0).unwrap();
        let r = contraction_bound(&id, &id, 2.0).unwrap();
        assert!((r.u_rate - 0.5).abs() < 1e-14);
        assert!((r.j_rate - 0.25).abs() < 1e-14);
        let d = SpdMatrix::diagonal(&[0.5, 2.0, 8.0]).unwrap();
        let sigma = SpdMatrix::scaled_identity(3, 0.3).unwrap();
        let lambda = 0.1;
        let r = contraction_bound(&d, &sigma, lambda).unwrap();
        let expect = [0.5, 2.0, 8.0]
            .iter()
            .map(|o| 1.0 / (1.0 + 2.0 * 0.3 * o / lambda))
            .fold(0.0, f64::max);
        assert!((r.u_rate - expect).abs() < 1e-12);
        let loose = contraction_bound(&d, &sigma, 1e12).unwrap();
        assert!(loose.u_rate > 1.0 - 1e-9 && loose.j_rate > 1.0 - 1e-9);
    }

    #[test]
    fn closed_form_beats_isotropic_rate_on_ill_conditioned() {
        let d = SpdMatrix::diagonal(&[100.0, 1.0]).unwrap();
        let covo = covo_closed_form(&d, 1.0).unwrap();
        let iso = isotropic(2, 1.0).unwrap();
        let rc = contraction_bound(&d, &covo.sigma, 0.01).unwrap();
        let ri = contraction_bound(&d, &iso, 0.01).unwrap();
        assert!(rc.j_rate < ri.j_rate);
    }

    #[test]
    fn exact_symmetric_problem_is_isotropic() {
        let d = SpdMatrix::scaled_identity(4, 3.0).unwrap();
        let u_in = DVector::from_vec(vec![1.0, -1.0, 1.0, -1.0]);
        let sol = covo_exact(&d, &u_in, &DVector::zeros(4), 0.01, 0.2).unwrap();
        let want = 0.2f64.powf(0.25);
        for v in sol.eigenvalues.iter() {
            assert!((v - want).abs() < 1e-10 * want);
        }
    }

    #[test]
    fn exact_at_optimum_returns_closed_form() {
        let d = random_spd(3, 2, 5.0);
        let u = DVector::from_vec(vec![0.1, 0.2, 0.3]);
        let sol = covo_exact(&d, &u, &u, 0.01, 1.0).unwrap();
        let cf = covo_closed_form(&d, 1.0).unwrap();
        assert!((sol.sigma.matrix() - cf.sigma.matrix()).amax() < 1e-14);
    }

    #[test]
    fn exact_two_dim_matches_grid() {
        let d = SpdMatrix::diagonal(&[1.0, 4.0]).unwrap();
        let gap = d.eigenvectors().clone() * DVector::from_vec(vec![1.0, 1.0]);
        let zero = DVector::zeros(2);
        let sol = covo_exact(&d, &gap, &zero, 0.01, 1.0).unwrap();
        let f = |l1: f64| eigen_objective(&d, &gap, &zero, 0.01, &[l1, 1.0 / l1]);
        let best = (0..=4000)
            .map(|k| f((-10.0 + 20.0 * k as f64 / 4000.0).exp()))
            .fold(f64::INFINITY, f64::min);
        let got = eigen_objective(&d, &gap, &zero, 0.01, sol.eigenvalues.as_slice());
        assert!(got <= best * (1.0 + 1e-6));
        assert!(sol.kkt_residual.unwrap() <= 1e-5);
    }

    #[test]
    fn degenerate_gap_keeps_budget_and_dominance() {
        let d = SpdMatrix::diagonal(&[1.0, 9.0, 3.0]).unwrap();
        let gap = d.eigenvectors().clone() * DVector::from_vec(vec![0.0, 1.0, 2.0]);
        let zero = DVector::zeros(3);
        let sol = covo_exact(&d, &gap, &zero, 0.05, 0.5).unwrap();
        assert!(sol.constraint_residual < 1e-8);
        let cf = covo_closed_form(&d, 0.5).unwrap();
        let fe = eigen_objective(&d, &gap, &zero, 0.05, sol.eigenvalues.as_slice());
        let fc = eigen_objective(&d, &gap, &zero, 0.05, cf.eigenvalues.as_slice());
        assert!(fe <= fc);
    }

    #[test]
    fn exact_reports_boundary_infimum() {
        let d = SpdMatrix::diagonal(&[1.0, 1000.0]).unwrap();
        let gap = d.eigenvectors().clone() * DVector::from_vec(vec![0.1, 1.0]);
        let r = covo_exact(&d, &gap, &DVector::zeros(2), 50.0, 0.1);
        assert!(matches!(r, Err(Error::SolverDivergence { .. })));
    }

    #[test]
    fn fixed_point_scalar() {
        let id = SpdMatrix::scaled_identity(2, 1.0).unwrap();
        let u_in = DVector::from_vec(vec![2.0, -4.0]);
        let fp = fixed_point(&id, &id, 2.0, &u_in, &DVector::zeros(2));
        assert!((fp - DVector::from_vec(vec![1.0, -2.0])).amax() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn closed_form_det_and_commutation(dim in 2usize..24, seed in 0u64..1000, log_cond in 0.0f64..4.0) {
            let d = random_spd(dim, seed, 10f64.powf(log_cond));
            let alpha = 0.5f64.powi(32);
            let sol = covo_closed_form(&d, alpha).unwrap();
            prop_assert!(det_rel_error(&sol.sigma, alpha) < 1e-8);
            let (s, dm) = (sol.sigma.matrix(), d.matrix());
            prop_assert!((s * dm - dm * s).norm() <= 1e-8 * sol.sigma.spectral_norm() * d.spectral_norm());
        }

        #[test]
        fn rates_are_contractions(dim in 1usize..8, seed in 0u64..1000, lambda in 1e-3f64..10.0) {
            let d = random_spd(dim, seed, 100.0);
            let sigma = random_spd(dim, seed + 1, 10.0);
            let r = contraction_bound(&d, &sigma, lambda).unwrap();
            prop_assert!(r.u_rate > 0.0 && r.u_rate < 1.0);
            prop_assert!(r.j_rate > 0.0 && r.j_rate < 1.0);
            let tighter = contraction_bound(&d, &sigma, lambda / 2.0).unwrap();
            prop_assert!(tighter.j_rate <= r.j_rate);
        }

        #[test]
        fn exact_never_worse_than_closed_form(dim in 2usize..8, seed in 0u64..1000, lambda in 1e-3f64..0.02) {
            let d = random_spd(dim, seed, 1e3);
            let mut rng = RandomStream::new(seed).domain(5).rng(0);
            let u_in = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
            let zero = DVector::zeros(dim);
            let alpha = 0.1;
            let ex = covo_exact(&d, &u_in, &zero, lambda, alpha).unwrap();
            let cf = covo_closed_form(&d, alpha).unwrap();
            let fe = eigen_objective(&d, &u_in, &zero, lambda, ex.eigenvalues.as_slice());
            let fc = eigen_objective(&d, &u_in, &zero, lambda, cf.eigenvalues.as_slice());
            prop_assert!(fe <= fc * (1.0 + 1e-12));
            prop_assert!(ex.constraint_residual < 1e-8);
            prop_assert!(ex.kkt_residual.unwrap() <= 1e-5);
            let dense = fixed_point_excess(&d, &ex.sigma, lambda, &u_in, &zero);
            prop_assert!((dense - fe).abs() <= 1e-8 * fe.max(1e-300) + 1e-14);
        }
    }
}
