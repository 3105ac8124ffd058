//! Monte-Carlo checks of single-step MPPI behavior on quadratic and strongly
//! convex costs.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cost::QuadraticCost;
use crate::covariance::{contraction_bound, covo_closed_form, fixed_point, fixed_point_excess, isotropic};
use crate::error::{Error, Result};
use crate::mppi::mppi_update;
use crate::numerics::{RandomStream, SpdMatrix};
use crate::sequence::ControlSequence;

/// A quadratic cost with a starting mean, temperature and determinant budget
/// chosen so the one-step update is neither trivial nor weight-degenerate.
#[derive(Clone, Debug)]
pub struct QuadraticInstance {
    pub cost: QuadraticCost,
    pub u_in: DVector<f64>,
    pub lambda: f64,
    pub alpha: f64,
}

impl QuadraticInstance {
    pub fn dim(&self) -> usize {
        self.cost.dim()
    }

    pub fn covo_sigma(&self) -> Result<SpdMatrix> {
        Ok(covo_closed_form(&self.cost.hessian, self.alpha)?.sigma)
    }

    pub fn isotropic_sigma(&self) -> Result<SpdMatrix> {
        isotropic(self.dim(), self.alpha)
    }
}

fn random_rotation(dim: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
    a.qr().q()
}

/// Random Hessian with eigenvalues log-uniform on `[1, cond]`, including both
/// ends, in a random basis.
pub fn random_hessian(dim: usize, cond: f64, seed: u64) -> Result<SpdMatrix> {
    let mut rng = RandomStream::new(seed).domain(0x4e55).rng(0);
    let q = random_rotation(dim, &mut rng);
    let values = DVector::from_fn(dim, |i, _| {
        let s = match i {
            0 => 0.0,
            _ if i + 1 == dim => 1.0,
            _ => rng.random_range(0.0..1.0),
        };
        cond.powf(s)
    });
    SpdMatrix::new(&q * DMatrix::from_diagonal(&values) * q.transpose())
}

/// Quadratic instance with condition number `cond`. The budget makes the
/// isotropic covariance reach `(2/lambda) sigma o_max = 2`, and the gap is
/// scaled so the log-weights under that covariance have unit variance.
pub fn random_instance(dim: usize, cond: f64, lambda: f64, seed: u64) -> Result<QuadraticInstance> {
    let hessian = random_hessian(dim, cond, seed)?;
    let mut rng = RandomStream::new(seed).domain(0x1a57).rng(0);
    let o_max = hessian.eigenvalues()[dim - 1];
    let sigma = lambda / o_max;
    let alpha = (dim as f64 * sigma.ln()).exp();
    let u_star = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
    let direction = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
    let d = hessian.matrix();
    let spread = 4.0 * sigma * direction.dot(&(d * d * &direction)) / (lambda * lambda);
    let u_in = &u_star + direction / spread.sqrt();
    Ok(QuadraticInstance {
        cost: QuadraticCost::centered(hessian, u_star, 0.0)?,
        u_in,
        lambda,
        alpha,
    })
}

#[derive(Clone, Debug)]
pub struct ContractionExperiment {
    pub cost: QuadraticCost,
    pub sigma: SpdMatrix,
    pub lambda: f64,
    pub u_in: DVector<f64>,
    /// Strictly increasing sample counts.
    pub n_grid: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
}

/// Trial statistics at one sample count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionRow {
    pub samples: usize,
    pub trials: usize,
    /// Mean and standard error of `||U_out - U*||`.
    pub distance_mean: f64,
    pub distance_se: f64,
    /// Mean and standard error of `||U_out - U*|| / ||U_in - U*||`; absent when `U_in = U*`.
    pub ratio_mean: Option<f64>,
    pub ratio_se: Option<f64>,
    pub u_rate: f64,
    /// `||mean U_out - fixed point||`.
    pub fixed_point_distance: f64,
    /// Largest per-coordinate `|mean - fixed point| / standard error`.
    pub fixed_point_z: f64,
    pub excess_mean: f64,
    pub excess_se: f64,
    /// `(J(U_in) - J*) * j_rate`.
    pub excess_bound: f64,
    pub j_rate: f64,
    pub mean_ess: f64,
}

impl ContractionRow {
    /// Control contraction within `k` standard errors of the rate.
    pub fn ratio_within(&self, k: f64) -> bool {
        match (self.ratio_mean, self.ratio_se) {
            (Some(m), Some(se)) => m <= self.u_rate + k * se,
            _ => true,
        }
    }

    pub fn excess_within(&self, k: f64) -> bool {
        self.excess_mean <= self.excess_bound + k * self.excess_se
    }
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::INFINITY);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// One MPPI update on the quadratic cost from `u_in`.
pub fn quadratic_update(
    cost: &QuadraticCost,
    sigma: &SpdMatrix,
    lambda: f64,
    u_in: &DVector<f64>,
    samples: usize,
    rng: &RandomStream,
) -> Result<(DVector<f64>, f64)> {
    let seq = ControlSequence::new(u_in.as_slice().to_vec(), u_in.len(), 1)?;
    let r = mppi_update(&seq, sigma, samples, lambda, rng, None, false, || (), |_, u| cost.excess(u))?;
    Ok((r.u_out.to_dvector(), r.effective_sample_size))
}

pub fn run_contraction_experiment(exp: &ContractionExperiment) -> Result<Vec<ContractionRow>> {
    if exp.n_grid.windows(2).any(|w| w[0] >= w[1]) || exp.n_grid.is_empty() {
        return Err(Error::InvalidConfig("sample grid must be strictly increasing".into()));
    }
    if exp.trials < 2 {
        return Err(Error::InvalidConfig("need at least two trials".into()));
    }
    let cost = &exp.cost;
    let u_star = &cost.minimizer;
    let gap = (&exp.u_in - u_star).norm();
    let rates = contraction_bound(&cost.hessian, &exp.sigma, exp.lambda)?;
    let fp = fixed_point(&cost.hessian, &exp.sigma, exp.lambda, &exp.u_in, u_star);
    let excess_in = cost.excess(exp.u_in.as_slice());
    let dim = cost.dim();
    let base = RandomStream::new(exp.seed);
    let mut rows = Vec::with_capacity(exp.n_grid.len());
    for (g, &n) in exp.n_grid.iter().enumerate() {
        let mut outs = Vec::with_capacity(exp.trials);
        let mut ess = 0.0;
        for trial in 0..exp.trials {
            let rng = base.domain(g as u64).at_step(trial as u64);
            let (u, e) = quadratic_update(cost, &exp.sigma, exp.lambda, &exp.u_in, n, &rng)?;
            outs.push(u);
            ess += e;
        }
        let distances: Vec<f64> = outs.iter().map(|u| (u - u_star).norm()).collect();
        let excesses: Vec<f64> = outs.iter().map(|u| cost.excess(u.as_slice())).collect();
        let (distance_mean, distance_se) = mean_se(&distances);
        let (ratio_mean, ratio_se) = if gap > 0.0 {
            let ratios: Vec<f64> = distances.iter().map(|d| d / gap).collect();
            let (m, s) = mean_se(&ratios);
            (Some(m), Some(s))
        } else {
            (None, None)
        };
        let mut mean = DVector::zeros(dim);
        let mut z = 0.0f64;
        for k in 0..dim {
            let xs: Vec<f64> = outs.iter().map(|u| u[k]).collect();
            let (m, se) = mean_se(&xs);
            mean[k] = m;
            let dev = (m - fp[k]).abs();
            z = z.max(if se > 0.0 { dev / se } else if dev == 0.0 { 0.0 } else { f64::INFINITY });
        }
        let (excess_mean, excess_se) = mean_se(&excesses);
        rows.push(ContractionRow {
            samples: n,
            trials: exp.trials,
            distance_mean,
            distance_se,
            ratio_mean,
            ratio_se,
            u_rate: rates.u_rate,
            fixed_point_distance: (&mean - &fp).norm(),
            fixed_point_z: z,
            excess_mean,
            excess_se,
            excess_bound: excess_in * rates.j_rate,
            j_rate: rates.j_rate,
            mean_ess: ess / exp.trials as f64,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DominanceReport {
    pub dim: usize,
    pub gaps: usize,
    /// Mean over gaps of the large-sample excess, covariance-optimal over isotropic.
    pub closed_form_ratio: f64,
    /// The same ratio from Monte-Carlo updates, when requested.
    pub monte_carlo_ratio: Option<f64>,
    pub monte_carlo_ratio_se: Option<f64>,
    pub covo_j_rate: f64,
    pub isotropic_j_rate: f64,
}

/// Compares one-step excess cost under the closed-form covariance and the
/// isotropic one at equal determinant, with gaps drawn from `N(0, I)`.
pub fn run_covariance_dominance(
    hessian: &SpdMatrix,
    alpha: f64,
    lambda: f64,
    gaps: usize,
    mc_samples: usize,
    seed: u64,
) -> Result<DominanceReport> {
    let dim = hessian.dim();
    let covo = covo_closed_form(hessian, alpha)?.sigma;
    let iso = isotropic(dim, alpha)?;
    let zero = DVector::zeros(dim);
    let cost = QuadraticCost::centered(hessian.clone(), zero.clone(), 0.0)?;
    let base = RandomStream::new(seed);
    let mut covo_total = 0.0;
    let mut iso_total = 0.0;
    let mut mc_ratios = Vec::new();
    for g in 0..gaps {
        let mut z = vec![0.0; dim];
        base.domain(0x9a9).standard_normals(g as u64, &mut z);
        let u_in = DVector::from_vec(z);
        covo_total += fixed_point_excess(hessian, &covo, lambda, &u_in, &zero);
        iso_total += fixed_point_excess(hessian, &iso, lambda, &u_in, &zero);
        if mc_samples > 0 {
            let rng = base.at_step(g as u64);
            let (uc, _) = quadratic_update(&cost, &covo, lambda, &u_in, mc_samples, &rng)?;
            let (ui, _) = quadratic_update(&cost, &iso, lambda, &u_in, mc_samples, &rng)?;
            let (ec, ei) = (cost.excess(uc.as_slice()), cost.excess(ui.as_slice()));
            if ei > 0.0 {
                mc_ratios.push(ec / ei);
            }
        }
    }
    let (mc, mc_se) = if mc_ratios.len() >= 2 {
        let (m, s) = mean_se(&mc_ratios);
        (Some(m), Some(s))
    } else {
        (None, None)
    };
    Ok(DominanceReport {
        dim,
        gaps,
        closed_form_ratio: if iso_total > 0.0 { covo_total / iso_total } else { 1.0 },
        monte_carlo_ratio: mc,
        monte_carlo_ratio_se: mc_se,
        covo_j_rate: contraction_bound(hessian, &covo, lambda)?.j_rate,
        isotropic_j_rate: contraction_bound(hessian, &iso, lambda)?.j_rate,
    })
}

/// `J(U) = e^T D e + c sum_i log cosh(e_i)` with `e = U - U*`. The
/// perturbation is convex, so `J` is strongly convex with modulus `2 o_min`
/// and gradient Lipschitz constant `2 o_max + c`.
#[derive(Clone, Debug)]
pub struct StronglyConvexToy {
    pub hessian: SpdMatrix,
    pub perturbation: f64,
    pub u_star: DVector<f64>,
    pub sigma: SpdMatrix,
    pub u_in: DVector<f64>,
}

fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

impl StronglyConvexToy {
    pub fn cost(&self, u: &[f64]) -> f64 {
        let e = DVector::from_column_slice(u) - &self.u_star;
        e.dot(&(self.hessian.matrix() * &e)) + self.perturbation * e.iter().map(|x| log_cosh(*x)).sum::<f64>()
    }

    pub fn gradient(&self, u: &[f64]) -> DVector<f64> {
        let e = DVector::from_column_slice(u) - &self.u_star;
        2.0 * (self.hessian.matrix() * &e) + e.map(|x| self.perturbation * x.tanh())
    }

    pub fn beta(&self) -> f64 {
        2.0 * self.hessian.eigenvalues()[0]
    }

    pub fn lipschitz(&self) -> f64 {
        2.0 * self.hessian.eigenvalues()[self.hessian.dim() - 1] + self.perturbation
    }

    /// Checks `J(v) >= J(u) + grad J(u)^T (v - u) + beta/2 |v - u|^2` on random
    /// pairs within `radius` of the minimizer.
    pub fn strong_convexity_holds(&self, pairs: usize, radius: f64, seed: u64) -> bool {
        let mut rng = RandomStream::new(seed).domain(0x5c).rng(0);
        let dim = self.u_star.len();
        let beta = self.beta();
        (0..pairs).all(|_| {
            let u = &self.u_star + DVector::from_fn(dim, |_, _| rng.random_range(-radius..radius));
            let v = &self.u_star + DVector::from_fn(dim, |_, _| rng.random_range(-radius..radius));
            let d = &v - &u;
            let lower = self.cost(u.as_slice()) + self.gradient(u.as_slice()).dot(&d) + 0.5 * beta * d.norm_squared();
            self.cost(v.as_slice()) >= lower - 1e-12 * (1.0 + lower.abs())
        })
    }

    /// `(lambda/beta) * 2 ||Sigma^{-1}|| / (1 + lambda/(beta ||Sigma||)) * ||U_in - U*||`.
    pub fn contraction_term(&self, lambda: f64) -> f64 {
        let beta = self.beta();
        let values = self.sigma.eigenvalues();
        let inv_norm = 1.0 / values[0];
        let norm = values[values.len() - 1];
        (lambda / beta) * 2.0 * inv_norm / (1.0 + lambda / (beta * norm)) * (&self.u_in - &self.u_star).norm()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrongConvexRow {
    pub lambda: f64,
    /// Distance from the trial-mean output to the minimizer.
    pub distance_mean: f64,
    pub distance_se: f64,
    pub contraction_term: f64,
    /// `sqrt(lambda) / beta`, the scale of the error term.
    pub error_scale: f64,
    pub bound: f64,
    pub within_bound: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrongConvexReport {
    /// Error-term constant fitted on the largest temperature. This makes the
    /// check one of shape, not of the constant.
    pub c_err: f64,
    pub rows: Vec<StrongConvexRow>,
    /// Distance strictly decreases as the temperature decreases.
    pub decreasing: bool,
}

/// Distance from the trial-mean output to `target`, with a delta-method
/// standard error. Averaging over trials first removes the finite-sample
/// scatter of single updates, which would otherwise dominate at small
/// temperatures.
fn limit_distance(outputs: &[DVector<f64>], target: &DVector<f64>) -> (f64, f64) {
    let n = outputs.len() as f64;
    let mean = outputs.iter().fold(DVector::zeros(target.len()), |acc, u| acc + u) / n;
    let gap = &mean - target;
    let distance = gap.norm();
    let se2: Vec<f64> = (0..target.len())
        .map(|i| outputs.iter().map(|u| (u[i] - mean[i]).powi(2)).sum::<f64>() / ((n - 1.0) * n))
        .collect();
    let se = if distance > 0.0 {
        (0..target.len()).map(|i| (gap[i] / distance).powi(2) * se2[i]).sum::<f64>().sqrt()
    } else {
        se2.iter().sum::<f64>().sqrt()
    };
    (distance, se)
}

/// Large-sample update of the toy at each temperature. `c_err` is fitted on
/// the largest temperature; each row then checks
/// `mean - 3 se <= contraction + c_err sqrt(lambda)/beta`.
pub fn check_strongly_convex_bound(
    toy: &StronglyConvexToy,
    lambdas: &[f64],
    samples: usize,
    trials: usize,
    seed: u64,
) -> Result<StrongConvexReport> {
    if lambdas.is_empty() || trials < 2 {
        return Err(Error::InvalidConfig("need temperatures and at least two trials".into()));
    }
    let mut sorted = lambdas.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let beta = toy.beta();
    let seq = ControlSequence::new(toy.u_in.as_slice().to_vec(), toy.u_in.len(), 1)?;
    let base = RandomStream::new(seed);
    let mut stats = Vec::with_capacity(sorted.len());
    for (li, &lambda) in sorted.iter().enumerate() {
        let mut outputs = Vec::with_capacity(trials);
        for trial in 0..trials {
            let rng = base.domain(li as u64).at_step(trial as u64);
            let r = mppi_update(&seq, &toy.sigma, samples, lambda, &rng, None, false, || (), |_, u| toy.cost(u))?;
            outputs.push(r.u_out.to_dvector());
        }
        stats.push(limit_distance(&outputs, &toy.u_star));
    }
    let fit_scale = sorted[0].sqrt() / beta;
    let c_err = ((stats[0].0 - toy.contraction_term(sorted[0])) / fit_scale).max(0.0);
    let rows: Vec<StrongConvexRow> = sorted
        .iter()
        .zip(&stats)
        .map(|(&lambda, &(mean, se))| {
            let error_scale = lambda.sqrt() / beta;
            let contraction = toy.contraction_term(lambda);
            let bound = contraction + c_err * error_scale;
            StrongConvexRow {
                lambda,
                distance_mean: mean,
                distance_se: se,
                contraction_term: contraction,
                error_scale,
                bound,
                within_bound: mean - 3.0 * se <= bound,
            }
        })
        .collect();
    let decreasing = rows.windows(2).all(|w| w[1].distance_mean < w[0].distance_mean);
    Ok(StrongConvexReport { c_err, rows, decreasing })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instance_is_well_posed() {
        let inst = random_instance(6, 1e3, 0.01, 4).unwrap();
        let iso = inst.isotropic_sigma().unwrap();
        let rates = contraction_bound(&inst.cost.hessian, &iso, inst.lambda).unwrap();
        assert!(rates.u_rate < 1.0 && rates.u_rate > 0.5);
        assert!((iso.log_det() - inst.alpha.ln()).abs() < 1e-10);
        let e = inst.cost.hessian.eigenvalues();
        assert!((e[5] / e[0] - 1e3).abs() < 1e-6 * 1e3);
    }

    #[test]
    fn scalar_fixed_point_halves_the_gap() {
        let cost = QuadraticCost::centered(SpdMatrix::scaled_identity(1, 1.0).unwrap(), DVector::zeros(1), 0.0).unwrap();
        let exp = ContractionExperiment {
            cost,
            sigma: SpdMatrix::scaled_identity(1, 1.0).unwrap(),
            lambda: 2.0,
            u_in: DVector::from_vec(vec![1.0]),
            n_grid: vec![100_000],
            trials: 10,
            seed: 1,
        };
        let row = &run_contraction_experiment(&exp).unwrap()[0];
        assert!((row.u_rate - 0.5).abs() < 1e-12);
        assert!(row.fixed_point_z <= 4.0, "z = {}", row.fixed_point_z);
    }

    #[test]
    fn optimum_is_a_fixed_point() {
        let inst = random_instance(3, 10.0, 0.01, 2).unwrap();
        let exp = ContractionExperiment {
            u_in: inst.cost.minimizer.clone(),
            sigma: inst.isotropic_sigma().unwrap(),
            lambda: inst.lambda,
            cost: inst.cost,
            n_grid: vec![10_000],
            trials: 10,
            seed: 3,
        };
        let row = &run_contraction_experiment(&exp).unwrap()[0];
        assert!(row.ratio_mean.is_none());
        assert!(row.fixed_point_z <= 4.0);
    }

    #[test]
    fn rejects_unsorted_grid() {
        let inst = random_instance(2, 10.0, 0.01, 2).unwrap();
        let exp = ContractionExperiment {
            u_in: inst.u_in.clone(),
            sigma: inst.isotropic_sigma().unwrap(),
            lambda: inst.lambda,
            cost: inst.cost,
            n_grid: vec![100, 100],
            trials: 3,
            seed: 0,
        };
        assert!(run_contraction_experiment(&exp).is_err());
    }

    #[test]
    fn isotropic_hessian_has_unit_ratio() {
        let r = run_covariance_dominance(&SpdMatrix::scaled_identity(4, 2.0).unwrap(), 0.01, 0.01, 10, 0, 0).unwrap();
        assert!((r.closed_form_ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ill_conditioned_hessian_prefers_closed_form() {
        let d = SpdMatrix::diagonal(&[100.0, 1.0]).unwrap();
        let r = run_covariance_dominance(&d, 1.0, 0.01, 50, 0, 0).unwrap();
        assert!(r.covo_j_rate < r.isotropic_j_rate);
        assert!(r.closed_form_ratio < 1.0);
    }

    #[test]
    fn toy_is_strongly_convex_and_log_cosh_is_accurate() {
        let toy = StronglyConvexToy {
            hessian: SpdMatrix::diagonal(&[1.0, 3.0]).unwrap(),
            perturbation: 0.1,
            u_star: DVector::from_vec(vec![0.2, -0.1]),
            sigma: SpdMatrix::scaled_identity(2, 1.0).unwrap(),
            u_in: DVector::from_vec(vec![1.0, 1.0]),
        };
        assert!(toy.strong_convexity_holds(2000, 5.0, 1));
        assert!((log_cosh(0.3) - 0.3f64.cosh().ln()).abs() < 1e-15);
        assert!((log_cosh(800.0) - (800.0 - std::f64::consts::LN_2)).abs() < 1e-12);
        assert_eq!(toy.beta(), 2.0);
    }
}
