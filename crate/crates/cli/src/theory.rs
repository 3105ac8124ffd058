use std::path::Path;

use covo_core::numerics::SpdMatrix;
use covo_core::theory::{
    check_strongly_convex_bound, random_hessian, random_instance, run_contraction_experiment, run_covariance_dominance,
    ContractionExperiment, StrongConvexReport, StronglyConvexToy,
};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::run::{create_dir, write_csv, write_file};
use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceChoice {
    Covo,
    Isotropic,
}

/// Random quadratic suite. Instance `i` has dimension `dims[i % dims.len()]`
/// and condition number `10^(max_log10_cond * i / (instances - 1))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContractionConfig {
    pub instances: usize,
    pub dims: Vec<usize>,
    pub max_log10_cond: f64,
    pub lambda: f64,
    pub covariances: Vec<CovarianceChoice>,
    pub samples: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    /// Start every update at the minimizer.
    pub at_optimum: bool,
}

impl Default for ContractionConfig {
    fn default() -> Self {
        Self {
            instances: 20,
            dims: vec![2, 4, 8, 16],
            max_log10_cond: 4.0,
            lambda: 0.01,
            covariances: vec![CovarianceChoice::Covo, CovarianceChoice::Isotropic],
            samples: vec![1_000, 10_000, 100_000],
            trials: 50,
            seed: 0,
            at_optimum: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DominanceConfig {
    pub dims: Vec<usize>,
    pub log10_conds: Vec<f64>,
    /// Use `D = I` regardless of the condition list.
    pub identity: bool,
    pub alpha: f64,
    pub lambda: f64,
    pub gaps: usize,
    /// Monte-Carlo samples per update; 0 skips the Monte-Carlo column.
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for DominanceConfig {
    fn default() -> Self {
        Self {
            dims: vec![2, 8, 32],
            log10_conds: vec![0.0, 2.0, 4.0],
            identity: false,
            alpha: 1.0,
            lambda: 0.01,
            gaps: 200,
            mc_samples: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrongConvexConfig {
    /// Diagonal of the quadratic part.
    pub curvature: Vec<f64>,
    pub perturbation: f64,
    pub minimizer: Vec<f64>,
    pub start: Vec<f64>,
    /// Isotropic sampling variance.
    pub sigma: f64,
    pub lambdas: Vec<f64>,
    pub samples: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for StrongConvexConfig {
    fn default() -> Self {
        Self {
            curvature: vec![1.0, 3.0],
            perturbation: 0.1,
            minimizer: vec![0.2, -0.1],
            start: vec![1.2, 0.9],
            sigma: 1.0,
            lambdas: vec![0.1, 0.01, 0.001],
            samples: 200_000,
            trials: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryConfig {
    pub output: Option<std::path::PathBuf>,
    pub contraction: ContractionConfig,
    pub dominance: DominanceConfig,
    pub strongconvex: StrongConvexConfig,
}

impl TheoryConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(e.to_string()))
    }
}

/// One (instance, covariance, sample count) cell of the suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionCsvRow {
    pub instance: usize,
    pub dim: usize,
    pub condition: f64,
    pub covariance: CovarianceChoice,
    pub samples: usize,
    pub trials: usize,
    pub u_rate: f64,
    pub ratio_mean: Option<f64>,
    pub ratio_se: Option<f64>,
    /// `u_rate >= ratio_mean - 3 se`.
    pub ratio_ok: bool,
    pub distance_mean: f64,
    pub fixed_point_distance: f64,
    /// `fixed_point_distance / ||U_in - U*||`.
    pub fixed_point_relative: f64,
    pub fixed_point_z: f64,
    pub fixed_point_ok: bool,
    pub excess_mean: f64,
    pub excess_se: f64,
    pub excess_bound: f64,
    pub excess_ok: bool,
    pub mean_ess: f64,
}

pub fn run_contraction_suite(cfg: &ContractionConfig) -> Result<Vec<ContractionCsvRow>, CliError> {
    if cfg.instances == 0 || cfg.dims.is_empty() || cfg.covariances.is_empty() {
        return Err(CliError::Config("contraction suite needs instances, dims and covariances".into()));
    }
    let runtime = |e: covo_core::Error| CliError::Runtime(e.to_string());
    let cells: Vec<(usize, CovarianceChoice)> = (0..cfg.instances)
        .flat_map(|i| cfg.covariances.iter().map(move |&c| (i, c)))
        .collect();
    let rows: Vec<Result<Vec<ContractionCsvRow>, CliError>> = cells
        .par_iter()
        .map(|&(i, choice)| {
            let dim = cfg.dims[i % cfg.dims.len()];
            let frac = if cfg.instances > 1 { i as f64 / (cfg.instances - 1) as f64 } else { 0.0 };
            let cond = 10f64.powf(cfg.max_log10_cond * frac);
            let inst = random_instance(dim, cond, cfg.lambda, cfg.seed.wrapping_add(i as u64)).map_err(runtime)?;
            let sigma = match choice {
                CovarianceChoice::Covo => inst.covo_sigma(),
                CovarianceChoice::Isotropic => inst.isotropic_sigma(),
            }
            .map_err(runtime)?;
            let u_in = if cfg.at_optimum { inst.cost.minimizer.clone() } else { inst.u_in.clone() };
            let gap = (&u_in - &inst.cost.minimizer).norm();
            let exp = ContractionExperiment {
                cost: inst.cost.clone(),
                sigma,
                lambda: cfg.lambda,
                u_in,
                n_grid: cfg.samples.clone(),
                trials: cfg.trials,
                seed: cfg.seed.wrapping_add(1000 * i as u64 + choice as u64),
            };
            let report = run_contraction_experiment(&exp).map_err(runtime)?;
            Ok(report
                .into_iter()
                .map(|r| ContractionCsvRow {
                    instance: i,
                    dim,
                    condition: cond,
                    covariance: choice,
                    samples: r.samples,
                    trials: r.trials,
                    u_rate: r.u_rate,
                    ratio_mean: r.ratio_mean,
                    ratio_se: r.ratio_se,
                    ratio_ok: r.ratio_within(3.0),
                    distance_mean: r.distance_mean,
                    fixed_point_distance: r.fixed_point_distance,
                    fixed_point_relative: if gap > 0.0 { r.fixed_point_distance / gap } else { r.fixed_point_distance },
                    fixed_point_z: r.fixed_point_z,
                    fixed_point_ok: r.fixed_point_z <= 4.0,
                    excess_mean: r.excess_mean,
                    excess_se: r.excess_se,
                    excess_bound: r.excess_bound,
                    excess_ok: r.excess_within(3.0),
                    mean_ess: r.mean_ess,
                })
                .collect())
        })
        .collect();
    Ok(rows.into_iter().collect::<Result<Vec<_>, _>>()?.into_iter().flatten().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DominanceCsvRow {
    pub dim: usize,
    pub condition: f64,
    pub closed_form_ratio: f64,
    pub monte_carlo_ratio: Option<f64>,
    pub monte_carlo_ratio_se: Option<f64>,
    pub covo_j_rate: f64,
    pub isotropic_j_rate: f64,
}

pub fn run_dominance_suite(cfg: &DominanceConfig) -> Result<Vec<DominanceCsvRow>, CliError> {
    let runtime = |e: covo_core::Error| CliError::Runtime(e.to_string());
    let conds = if cfg.identity { vec![0.0] } else { cfg.log10_conds.clone() };
    let mut rows = Vec::new();
    for (di, &dim) in cfg.dims.iter().enumerate() {
        for (ci, &lc) in conds.iter().enumerate() {
            let seed = cfg.seed.wrapping_add((100 * di + ci) as u64);
            let hessian = if cfg.identity {
                SpdMatrix::scaled_identity(dim, 1.0)
            } else {
                random_hessian(dim, 10f64.powf(lc), seed)
            }
            .map_err(runtime)?;
            let r = run_covariance_dominance(&hessian, cfg.alpha, cfg.lambda, cfg.gaps, cfg.mc_samples, seed)
                .map_err(runtime)?;
            rows.push(DominanceCsvRow {
                dim,
                condition: 10f64.powf(lc),
                closed_form_ratio: r.closed_form_ratio,
                monte_carlo_ratio: r.monte_carlo_ratio,
                monte_carlo_ratio_se: r.monte_carlo_ratio_se,
                covo_j_rate: r.covo_j_rate,
                isotropic_j_rate: r.isotropic_j_rate,
            });
        }
    }
    Ok(rows)
}

pub fn strong_convex_toy(cfg: &StrongConvexConfig) -> Result<StronglyConvexToy, CliError> {
    let n = cfg.curvature.len();
    if n == 0 || cfg.minimizer.len() != n || cfg.start.len() != n {
        return Err(CliError::Config("curvature, minimizer and start must share a nonzero length".into()));
    }
    let runtime = |e: covo_core::Error| CliError::Config(e.to_string());
    Ok(StronglyConvexToy {
        hessian: SpdMatrix::diagonal(&cfg.curvature).map_err(runtime)?,
        perturbation: cfg.perturbation,
        u_star: DVector::from_vec(cfg.minimizer.clone()),
        sigma: SpdMatrix::scaled_identity(n, cfg.sigma).map_err(runtime)?,
        u_in: DVector::from_vec(cfg.start.clone()),
    })
}

pub fn run_strong_convex(cfg: &StrongConvexConfig) -> Result<StrongConvexReport, CliError> {
    let toy = strong_convex_toy(cfg)?;
    check_strongly_convex_bound(&toy, &cfg.lambdas, cfg.samples, cfg.trials, cfg.seed)
        .map_err(|e| CliError::Runtime(e.to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TheoryKind {
    Contraction,
    Dominance,
    StrongConvex,
}

/// Runs one experiment and writes its CSV (`contraction.csv`,
/// `dominance.csv` or `strongconvex.csv`) under `dir`. Returns whether every
/// row passed its check.
pub fn run_theory(kind: TheoryKind, cfg: &TheoryConfig, dir: &Path) -> Result<bool, CliError> {
    create_dir(dir)?;
    let config_text = toml::to_string(cfg).expect("theory config serializes");
    write_file(&dir.join("theory.toml"), config_text.as_bytes())?;
    match kind {
        TheoryKind::Contraction => {
            let rows = run_contraction_suite(&cfg.contraction)?;
            write_csv(&dir.join("contraction.csv"), &rows)?;
            Ok(rows.iter().all(|r| r.ratio_ok && r.excess_ok))
        }
        TheoryKind::Dominance => {
            let rows = run_dominance_suite(&cfg.dominance)?;
            write_csv(&dir.join("dominance.csv"), &rows)?;
            Ok(rows.iter().all(|r| r.closed_form_ratio <= 1.0 + 1e-9))
        }
        TheoryKind::StrongConvex => {
            let report = run_strong_convex(&cfg.strongconvex)?;
            #[derive(Serialize)]
            struct Row {
                lambda: f64,
                distance_mean: f64,
                distance_se: f64,
                contraction_term: f64,
                error_scale: f64,
                c_err: f64,
                bound: f64,
                within_bound: bool,
            }
            let rows: Vec<Row> = report
                .rows
                .iter()
                .map(|r| Row {
                    lambda: r.lambda,
                    distance_mean: r.distance_mean,
                    distance_se: r.distance_se,
                    contraction_term: r.contraction_term,
                    error_scale: r.error_scale,
                    c_err: report.c_err,
                    bound: r.bound,
                    within_bound: r.within_bound,
                })
                .collect();
            write_csv(&dir.join("strongconvex.csv"), &rows)?;
            Ok(report.decreasing && report.rows.iter().all(|r| r.within_bound))
        }
    }
}
