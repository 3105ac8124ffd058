use std::fmt::Write as _;
use std::path::Path;

use covo_core::controller::PolicyKind;
use covo_core::covariance::isotropic;
use nalgebra::DMatrix;

use crate::config::RunConfig;
use crate::run::{write_file, write_run_header};
use crate::tasks::{make_controller, TaskEnv};
use crate::CliError;

pub fn matrix_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:e}", m[(i, j)])).collect();
        writeln!(out, "{}", row.join(",")).unwrap();
    }
    out
}

/// Covariances at the requested steps of an online episode on the first seed.
pub struct CovarianceDump {
    pub t: usize,
    pub covo: DMatrix<f64>,
    pub isotropic: DMatrix<f64>,
}

/// Runs the online policy and, at each step in `steps`, writes
/// `sigma_covo_t<t>.csv`, `sigma_iso_t<t>.csv` and `sigma_diff_t<t>.csv`
/// (covo minus isotropic) under `dir`.
pub fn dump_covariance(cfg: &RunConfig, steps: &[usize], dir: &Path) -> Result<Vec<CovarianceDump>, CliError> {
    if steps.is_empty() {
        return Err(CliError::Config("step list must not be empty".into()));
    }
    let last = *steps.iter().max().unwrap();
    if last >= cfg.steps {
        return Err(CliError::Config(format!("step {last} is beyond the episode length {}", cfg.steps)));
    }
    write_run_header(dir, cfg, "dump-covariance")?;
    let runtime = |e: covo_core::Error| CliError::Runtime(e.to_string());
    let task = TaskEnv::build(cfg, cfg.seed)?;
    let mut controller = make_controller(&task, cfg, PolicyKind::Covo, cfg.seed).map_err(runtime)?;
    let dim = task.planner().control_dim() * cfg.horizon;
    let iso = isotropic(dim, cfg.det_budget()).map_err(runtime)?.matrix().clone();
    let mut x = task.initial_state(cfg);
    let mut out = Vec::new();
    for t in 0..=last {
        if steps.contains(&t) {
            let (sigma, _) = controller.covariance(task.planner(), &x).map_err(runtime)?;
            let covo = sigma.matrix().clone();
            write_file(&dir.join(format!("sigma_covo_t{t}.csv")), matrix_csv(&covo).as_bytes())?;
            write_file(&dir.join(format!("sigma_iso_t{t}.csv")), matrix_csv(&iso).as_bytes())?;
            write_file(&dir.join(format!("sigma_diff_t{t}.csv")), matrix_csv(&(&covo - &iso)).as_bytes())?;
            out.push(CovarianceDump {
                t,
                covo,
                isotropic: iso.clone(),
            });
        }
        if t == last {
            break;
        }
        let step = controller.control_step(task.planner(), &x).map_err(runtime)?;
        x = task.plant().step(&x, &step.u, t);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(CliError::Runtime(format!("state diverged at step {t}")));
        }
    }
    Ok(out)
}
