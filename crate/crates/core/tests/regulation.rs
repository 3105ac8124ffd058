use covo_core::controller::{run_episode, Controller, ControllerConfig, CovariancePolicy, Episode, Padding};
use covo_core::env::{Environment, LtvSystem};
use nalgebra::{DMatrix, DVector};

const X0: [f64; 2] = [1.0, 0.0];
const STEPS: usize = 40;

fn double_integrator() -> LtvSystem {
    LtvSystem::time_invariant(
        DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]),
        DMatrix::from_row_slice(2, 1, &[0.0, 0.1]),
        DVector::zeros(2),
        DMatrix::identity(2, 2),
        DMatrix::identity(1, 1) * 0.01,
        STEPS + 10,
    )
    .unwrap()
}

fn config() -> ControllerConfig {
    ControllerConfig {
        horizon: 10,
        samples: 512,
        lambda: 0.01,
        alpha: 0.5f64.powi(10),
        padding: Padding::Equilibrium,
        log_samples: false,
    }
}

fn episode(policy: CovariancePolicy, seed: u64) -> Episode {
    let env = double_integrator();
    let ctrl = Controller::new(&env, config(), policy, seed).unwrap();
    run_episode(&env, &env, &X0, ctrl, STEPS)
}

fn passive_cost(env: &LtvSystem) -> f64 {
    let mut x = X0.to_vec();
    let mut total = 0.0;
    for t in 0..STEPS {
        total += env.running_cost(&x, &[0.0], t);
        x = env.step(&x, &[0.0], t);
    }
    total
}

#[test]
fn both_policies_regulate_the_double_integrator() {
    let env = double_integrator();
    let passive = passive_cost(&env);
    for policy in [CovariancePolicy::Isotropic, CovariancePolicy::Online] {
        let ep = episode(policy.clone(), 1);
        assert!(ep.failure.is_none(), "{policy:?}: {:?}", ep.failure);
        assert_eq!(ep.records.len(), STEPS);
        assert!(ep.total_cost < 0.5 * passive, "{policy:?}: {} vs {passive}", ep.total_cost);
        let last = &ep.records.last().unwrap().x;
        assert!(last[0].abs() < 0.2, "{policy:?} ends at {last:?}");
    }
}

#[test]
fn every_covariance_has_the_budgeted_determinant() {
    let ln_alpha = config().alpha.ln();
    let ep = episode(CovariancePolicy::Online, 2);
    for r in &ep.records {
        assert!((r.log_det_sigma - ln_alpha).abs() < 1e-8, "step {}", r.t);
        let (u_rate, j_rate) = (r.u_rate.unwrap(), r.j_rate.unwrap());
        assert!(u_rate > 0.0 && u_rate < 1.0 && j_rate > 0.0 && j_rate < 1.0);
    }
}

#[test]
fn episodes_depend_only_on_the_seed() {
    let a = episode(CovariancePolicy::Online, 5);
    let b = episode(CovariancePolicy::Online, 5);
    let c = episode(CovariancePolicy::Online, 6);
    assert_eq!(a.records, b.records);
    assert_ne!(a.records, c.records);
}
