use std::sync::Arc;

use covo_core::controller::{
    build_offline_cache, run_episode, CartPoleFeedback, Controller, ControllerConfig, CovariancePolicy, Episode,
    HoldEquilibrium, NominalController, PolicyKind,
};
use covo_core::env::{
    zigzag_reference, CartPole, Environment, LtvSystem, Quadrotor, QuadrotorNominal, ReferenceKind, ZigzagConfig,
};
use covo_core::numerics::SpdMatrix;
use nalgebra::{DMatrix, DVector};

use crate::config::{RunConfig, TaskKind};
use crate::CliError;

/// A task instance for one seed. The quadrotor plans on a disturbance-free
/// copy of the plant.
pub enum TaskEnv {
    CartPole(CartPole),
    Quadrotor { plant: Quadrotor, planner: Quadrotor },
    Ltv(LtvSystem),
}

fn reference_layout(cfg: &RunConfig, kind: ReferenceKind) -> ZigzagConfig {
    cfg.reference.clone().unwrap_or_else(|| ZigzagConfig::default_for(kind))
}

impl TaskEnv {
    pub fn build(cfg: &RunConfig, seed: u64) -> Result<Self, CliError> {
        let duration_steps = cfg.steps as f64;
        Ok(match cfg.task {
            TaskKind::Cartpole => {
                let mut params = cfg.cartpole.params.clone();
                if let Some(dt) = cfg.dt {
                    params.dt = dt;
                }
                let layout = reference_layout(cfg, ReferenceKind::Cartpole);
                let reference = zigzag_reference(ReferenceKind::Cartpole, &layout, duration_steps * params.dt, params.dt, seed);
                TaskEnv::CartPole(CartPole::new(params, cfg.cartpole.cost.clone(), Arc::new(reference)))
            }
            TaskKind::Quadrotor => {
                let mut params = cfg.quadrotor.params.clone();
                if let Some(dt) = cfg.dt {
                    params.dt = dt;
                }
                params.disturbance_seed = seed;
                let layout = reference_layout(cfg, ReferenceKind::Quadrotor);
                let reference = zigzag_reference(ReferenceKind::Quadrotor, &layout, duration_steps * params.dt, params.dt, seed);
                let plant = Quadrotor::new(params, cfg.quadrotor.cost.clone(), Arc::new(reference));
                let planner = plant.without_disturbance();
                TaskEnv::Quadrotor { plant, planner }
            }
            TaskKind::Ltv => {
                let l = &cfg.ltv;
                let dt = cfg.dt.unwrap_or(l.dt);
                let sys = LtvSystem::time_invariant(
                    DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]),
                    DMatrix::from_row_slice(2, 1, &[0.5 * dt * dt, dt]),
                    DVector::zeros(2),
                    DMatrix::from_diagonal(&DVector::from_vec(vec![l.position_weight, l.velocity_weight])),
                    DMatrix::from_element(1, 1, l.control_weight),
                    cfg.steps + cfg.horizon,
                )
                .map_err(|e| CliError::Config(e.to_string()))?;
                TaskEnv::Ltv(sys)
            }
        })
    }

    pub fn initial_state(&self, cfg: &RunConfig) -> Vec<f64> {
        match self {
            TaskEnv::CartPole(env) => env.initial_state(),
            TaskEnv::Quadrotor { .. } => Quadrotor::initial_state(),
            TaskEnv::Ltv(_) => cfg.ltv.initial_state.to_vec(),
        }
    }

    pub fn planner(&self) -> &dyn Environment {
        match self {
            TaskEnv::CartPole(env) => env,
            TaskEnv::Quadrotor { planner, .. } => planner,
            TaskEnv::Ltv(env) => env,
        }
    }

    pub fn plant(&self) -> &dyn Environment {
        match self {
            TaskEnv::CartPole(env) => env,
            TaskEnv::Quadrotor { plant, .. } => plant,
            TaskEnv::Ltv(env) => env,
        }
    }

    /// Covariances along the task's nominal controller, for the offline policy.
    pub fn offline_cache(&self, cfg: &RunConfig, x0: &[f64]) -> covo_core::Result<Vec<SpdMatrix>> {
        fn cache<E: Environment, C: NominalController<E>>(
            env: &E,
            nominal: &C,
            x0: &[f64],
            cfg: &RunConfig,
        ) -> covo_core::Result<Vec<SpdMatrix>> {
            build_offline_cache(env, nominal, x0, cfg.steps, cfg.horizon, cfg.det_budget())
        }
        match self {
            TaskEnv::CartPole(env) => cache(env, &CartPoleFeedback, x0, cfg),
            TaskEnv::Quadrotor { planner, .. } => {
                cache(planner, &QuadrotorNominal::new(cfg.quadrotor.gains.clone()), x0, cfg)
            }
            TaskEnv::Ltv(env) => cache(env, &HoldEquilibrium, x0, cfg),
        }
    }
}

pub fn controller_config(cfg: &RunConfig) -> ControllerConfig {
    ControllerConfig {
        horizon: cfg.horizon,
        samples: cfg.samples,
        lambda: cfg.lambda,
        alpha: cfg.det_budget(),
        padding: cfg.padding,
        log_samples: cfg.log_samples,
    }
}

/// Builds the controller for `policy` on seed `seed`. Failure to build the
/// offline cache is an episode failure, reported like any other.
pub fn make_controller(
    task: &TaskEnv,
    cfg: &RunConfig,
    policy: PolicyKind,
    seed: u64,
) -> covo_core::Result<Controller> {
    let x0 = task.initial_state(cfg);
    let covariance = match policy {
        PolicyKind::Mppi => CovariancePolicy::Isotropic,
        PolicyKind::Covo => CovariancePolicy::Online,
        PolicyKind::CovoOffline => CovariancePolicy::Offline(Arc::new(task.offline_cache(cfg, &x0)?)),
    };
    Controller::new(task.planner(), controller_config(cfg), covariance, seed)
}

/// One closed-loop episode of `policy` with seed `seed`.
pub fn run_policy_episode(cfg: &RunConfig, policy: PolicyKind, seed: u64) -> Result<Episode, CliError> {
    let task = TaskEnv::build(cfg, seed)?;
    let x0 = task.initial_state(cfg);
    match make_controller(&task, cfg, policy, seed) {
        Ok(controller) => Ok(run_episode(task.plant(), task.planner(), &x0, controller, cfg.steps)),
        Err(e) => Ok(Episode {
            records: Vec::new(),
            timings: Vec::new(),
            total_cost: 0.0,
            mean_tracking_error: None,
            failure: Some(format!("setup: {e}")),
        }),
    }
}
