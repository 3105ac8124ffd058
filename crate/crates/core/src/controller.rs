//! Receding-horizon control: per-step covariance choice, the MPPI update, and
//! the shift of the sampling mean.

use serde::{Deserialize, Serialize};
use std::sync::Arc;
use std::time::Instant;

use crate::cost::rollout_hessian;
use crate::covariance::{contraction_bound, covo_closed_form, isotropic};
use crate::env::{CartPole, Environment, Quadrotor, QuadrotorNominal};
use crate::error::{Error, Result};
use crate::mppi::{mppi_step, MppiConfig};
use crate::numerics::{RandomStream, SpdMatrix};
use crate::sequence::ControlSequence;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Repeat the last control block.
    #[default]
    RepeatLast,
    /// Append the environment's equilibrium control.
    Equilibrium,
}

/// Drops the first block and pads the tail.
pub fn shift(u: &ControlSequence, padding: Padding, equilibrium: &[f64]) -> ControlSequence {
    let m = u.control_dim();
    let mut values = u.as_slice()[m..].to_vec();
    match padding {
        Padding::RepeatLast => values.extend_from_slice(u.block(u.horizon() - 1)),
        Padding::Equilibrium => values.extend_from_slice(equilibrium),
    }
    u.with_values(values).expect("shift preserves shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Isotropic sampling covariance.
    Mppi,
    /// Covariance from the Hessian at the current sampling mean.
    Covo,
    /// Covariance precomputed along a nominal-controller trajectory.
    CovoOffline,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Mppi => "mppi",
            PolicyKind::Covo => "covo",
            PolicyKind::CovoOffline => "covo_offline",
        }
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mppi" => Ok(PolicyKind::Mppi),
            "covo" => Ok(PolicyKind::Covo),
            "covo_offline" => Ok(PolicyKind::CovoOffline),
            other => Err(Error::InvalidConfig(format!("unknown policy {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub enum CovariancePolicy {
    Isotropic,
    Online,
    Offline(Arc<Vec<SpdMatrix>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub horizon: usize,
    pub samples: usize,
    pub lambda: f64,
    /// Determinant of every sampling covariance.
    pub alpha: f64,
    pub padding: Padding,
    /// Keep samples and weights in each step record.
    pub log_samples: bool,
}

impl ControllerConfig {
    fn mppi(&self) -> MppiConfig {
        MppiConfig {
            horizon: self.horizon,
            samples: self.samples,
            lambda: self.lambda,
            keep_samples: self.log_samples,
        }
    }
}

/// Summary of the sampled-cost distribution at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostSpread {
    pub mean: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub diverged: usize,
}

impl CostSpread {
    pub fn from_costs(costs: &[f64]) -> Self {
        let mut finite: Vec<f64> = costs.iter().copied().filter(|c| c.is_finite()).collect();
        let diverged = costs.len() - finite.len();
        if finite.is_empty() {
            return Self {
                mean: f64::NAN,
                q1: f64::NAN,
                median: f64::NAN,
                q3: f64::NAN,
                diverged,
            };
        }
        finite.sort_by(f64::total_cmp);
        let mean = crate::numerics::pairwise_sum(&finite) / finite.len() as f64;
        Self {
            mean,
            q1: quantile(&finite, 0.25),
            median: quantile(&finite, 0.5),
            q3: quantile(&finite, 0.75),
            diverged,
        }
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Everything a step decided, in deterministic form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub step_cost: f64,
    pub tracking_error: Option<f64>,
    pub log_det_sigma: f64,
    pub u_rate: Option<f64>,
    pub j_rate: Option<f64>,
    pub ess: f64,
    pub sample_costs: CostSpread,
    pub u_in: Vec<f64>,
    pub u_out: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

/// Wall-clock split of one step, kept apart from the deterministic record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTiming {
    pub t: usize,
    pub sigma_ms: f64,
    pub sampling_ms: f64,
}

/// Sampling-based MPC state for one episode.
#[derive(Clone, Debug)]
pub struct Controller {
    cfg: ControllerConfig,
    policy: CovariancePolicy,
    u_in: ControlSequence,
    t: usize,
    rng: RandomStream,
    isotropic: SpdMatrix,
}

/// Result of one control step before the plant moves.
#[derive(Clone, Debug)]
pub struct ControlOutput {
    pub u: Vec<f64>,
    pub record: StepRecord,
    pub timing: StepTiming,
}

impl Controller {
    /// Starts from the equilibrium control repeated over the horizon.
    pub fn new<E: Environment + ?Sized>(
        env: &E,
        cfg: ControllerConfig,
        policy: CovariancePolicy,
        seed: u64,
    ) -> Result<Self> {
        cfg.mppi().validate()?;
        let dim = env.control_dim() * cfg.horizon;
        let isotropic = isotropic(dim, cfg.alpha)?;
        let u_in = ControlSequence::constant(&env.equilibrium_control(), cfg.horizon);
        Ok(Self {
            cfg,
            policy,
            u_in,
            t: 0,
            rng: RandomStream::new(seed),
            isotropic,
        })
    }

    pub fn mean(&self) -> &ControlSequence {
        &self.u_in
    }

    pub fn step_index(&self) -> usize {
        self.t
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    /// Sampling covariance at state `x`, with contraction rates when a
    /// Hessian is available.
    pub fn covariance<E: Environment + ?Sized>(
        &self,
        env: &E,
        x: &[f64],
    ) -> Result<(SpdMatrix, Option<(f64, f64)>)> {
        match &self.policy {
            CovariancePolicy::Isotropic => Ok((self.isotropic.clone(), None)),
            CovariancePolicy::Offline(cache) => cache
                .get(self.t)
                .cloned()
                .map(|s| (s, None))
                .ok_or(Error::CacheExhausted {
                    t: self.t,
                    len: cache.len(),
                }),
            CovariancePolicy::Online => {
                let est = rollout_hessian(env, x, self.t, &self.u_in)?;
                // Half the second-difference matrix is the quadratic-form matrix.
                let d = est.regularized.scaled(0.5);
                let sol = covo_closed_form(&est.regularized, self.cfg.alpha)?;
                let rates = contraction_bound(&d, &sol.sigma, self.cfg.lambda)?;
                Ok((sol.sigma, Some((rates.u_rate, rates.j_rate))))
            }
        }
    }

    /// Chooses the control for state `x` using the planning model `env`, then
    /// shifts the sampling mean and advances the step counter.
    pub fn control_step<E: Environment + ?Sized>(&mut self, env: &E, x: &[f64]) -> Result<ControlOutput> {
        let clock = Instant::now();
        let (sigma, rates) = self.covariance(env, x)?;
        let sigma_ms = clock.elapsed().as_secs_f64() * 1e3;

        let clock = Instant::now();
        let rng = self.rng.at_step(self.t as u64);
        let step = mppi_step(env, x, self.t, &self.u_in, &sigma, &self.cfg.mppi(), &rng)?;
        let sampling_ms = clock.elapsed().as_secs_f64() * 1e3;

        let u = step.u_out.block(0).to_vec();
        let record = StepRecord {
            t: self.t,
            x: x.to_vec(),
            u: u.clone(),
            step_cost: env.running_cost(x, &u, self.t),
            tracking_error: env.tracking_error(x, self.t),
            log_det_sigma: sigma.log_det(),
            u_rate: rates.map(|r| r.0),
            j_rate: rates.map(|r| r.1),
            ess: step.effective_sample_size,
            sample_costs: CostSpread::from_costs(&step.costs),
            u_in: self.u_in.as_slice().to_vec(),
            u_out: step.u_out.as_slice().to_vec(),
            samples: step.samples.as_ref().map(|s| s.as_flat().to_vec()),
            weights: self.cfg.log_samples.then(|| step.weights.clone()),
        };
        self.u_in = shift(&step.u_out, self.cfg.padding, &env.equilibrium_control());
        let timing = StepTiming {
            t: self.t,
            sigma_ms,
            sampling_ms,
        };
        self.t += 1;
        Ok(ControlOutput { u, record, timing })
    }
}

/// A feedback law that can be rolled forward from a copy of its own state.
pub trait NominalController<E: ?Sized>: Clone + Send + Sync {
    fn act(&mut self, env: &E, x: &[f64], k: usize) -> Result<Vec<f64>>;
}

/// `u = -K (x - x_ref)` on the cart-pole.
#[derive(Clone, Copy, Debug, Default)]
pub struct CartPoleFeedback;

impl NominalController<CartPole> for CartPoleFeedback {
    fn act(&mut self, env: &CartPole, x: &[f64], k: usize) -> Result<Vec<f64>> {
        Ok(vec![env.nominal_control(x, k)?])
    }
}

impl NominalController<Quadrotor> for QuadrotorNominal {
    fn act(&mut self, env: &Quadrotor, x: &[f64], k: usize) -> Result<Vec<f64>> {
        Ok(self.control(env, x, k)?.to_vec())
    }
}

/// Holds the equilibrium control regardless of state.
#[derive(Clone, Copy, Debug, Default)]
pub struct HoldEquilibrium;

impl<E: Environment + ?Sized> NominalController<E> for HoldEquilibrium {
    fn act(&mut self, env: &E, _x: &[f64], _k: usize) -> Result<Vec<f64>> {
        Ok(env.equilibrium_control())
    }
}

/// Covariances for steps `0..steps` along the nominal controller's own
/// trajectory from `x0`: at each step the controller is rolled `horizon`
/// steps ahead from a copy of its state, and the closed-form covariance is
/// taken at the Hessian of that control sequence.
pub fn build_offline_cache<E, C>(
    env: &E,
    nominal: &C,
    x0: &[f64],
    steps: usize,
    horizon: usize,
    alpha: f64,
) -> Result<Vec<SpdMatrix>>
where
    E: Environment + ?Sized,
    C: NominalController<E>,
{
    let mut live = nominal.clone();
    let mut x = x0.to_vec();
    let mut cache = Vec::with_capacity(steps);
    let diverged = |t: usize| Error::NominalRolloutDiverged { t };
    for t in 0..steps {
        let mut ahead = live.clone();
        let mut xa = x.clone();
        let mut values = Vec::with_capacity(horizon * env.control_dim());
        for h in 0..horizon {
            let mut u = ahead.act(env, &xa, t + h).map_err(|_| diverged(t))?;
            env.clamp_control(&mut u);
            xa = env.step(&xa, &u, t + h);
            values.extend_from_slice(&u);
        }
        let seq = ControlSequence::new(values, env.control_dim(), horizon)?;
        let est = rollout_hessian(env, &x, t, &seq).map_err(|_| diverged(t))?;
        cache.push(covo_closed_form(&est.regularized, alpha)?.sigma);

        let mut u = live.act(env, &x, t).map_err(|_| diverged(t))?;
        env.clamp_control(&mut u);
        x = env.step(&x, &u, t);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(diverged(t));
        }
    }
    Ok(cache)
}

/// Outcome of one closed-loop run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub records: Vec<StepRecord>,
    #[serde(skip)]
    pub timings: Vec<StepTiming>,
    /// Sum of plant running costs over executed steps.
    pub total_cost: f64,
    /// Mean tracking error over executed steps, when the task defines one.
    pub mean_tracking_error: Option<f64>,
    /// Why the episode stopped early, if it did.
    pub failure: Option<String>,
}

/// Runs `steps` control steps: the controller plans on `planner`, the
/// executed control drives `plant`. A failure ends the episode and is
/// recorded; the steps before it are kept.
pub fn run_episode<P, Q>(
    plant: &P,
    planner: &Q,
    x0: &[f64],
    mut controller: Controller,
    steps: usize,
) -> Episode
where
    P: Environment + ?Sized,
    Q: Environment + ?Sized,
{
    let mut x = x0.to_vec();
    let mut records = Vec::with_capacity(steps);
    let mut timings = Vec::with_capacity(steps);
    let mut failure = None;
    for t in 0..steps {
        let out = match controller.control_step(planner, &x) {
            Ok(out) => out,
            Err(e) => {
                failure = Some(format!("step {t}: {e}"));
                break;
            }
        };
        let mut record = out.record;
        record.step_cost = plant.running_cost(&x, &out.u, t);
        record.tracking_error = plant.tracking_error(&x, t);
        x = plant.step(&x, &out.u, t);
        records.push(record);
        timings.push(out.timing);
        if !x.iter().all(|v| v.is_finite()) {
            failure = Some(format!("step {t}: {}", Error::NonFiniteState { step: t + 1 }));
            break;
        }
    }
    let costs: Vec<f64> = records.iter().map(|r| r.step_cost).collect();
    let total_cost = crate::numerics::pairwise_sum(&costs);
    let errors: Vec<f64> = records.iter().filter_map(|r| r.tracking_error).collect();
    let mean_tracking_error = (!errors.is_empty() && errors.len() == records.len())
        .then(|| crate::numerics::pairwise_sum(&errors) / errors.len() as f64);
    Episode {
        records,
        timings,
        total_cost,
        mean_tracking_error,
        failure,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{assemble_ltv_cost, regularize_hessian, hessian_epsilon};
    use crate::env::{CartPoleCost, CartPoleParams, LtvSystem, Reference, ZeroCostEnv};
    use nalgebra::{DMatrix, DVector};

    fn cfg(samples: usize) -> ControllerConfig {
        ControllerConfig {
            horizon: 4,
            samples,
            lambda: 0.01,
            alpha: 0.5f64.powi(4),
            padding: Padding::RepeatLast,
            log_samples: true,
        }
    }

    fn double_integrator(len: usize) -> LtvSystem {
        LtvSystem::time_invariant(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 0.1]),
            DVector::zeros(2),
            DMatrix::identity(2, 2),
            DMatrix::identity(1, 1) * 0.1,
            len,
        )
        .unwrap()
    }

    #[test]
    fn shift_cases() {
        let c = ControlSequence::constant(&[2.0, -1.0], 3);
        assert_eq!(shift(&c, Padding::RepeatLast, &[0.0, 0.0]), c);
        let u = ControlSequence::new(vec![1.0, 2.0, 3.0], 1, 3).unwrap();
        assert_eq!(shift(&u, Padding::RepeatLast, &[0.0]).as_slice(), &[2.0, 3.0, 3.0]);
        assert_eq!(shift(&u, Padding::Equilibrium, &[9.0]).as_slice(), &[2.0, 3.0, 9.0]);
        let mut v = u.clone();
        for _ in 0..3 {
            v = shift(&v, Padding::RepeatLast, &[0.0]);
        }
        assert_eq!(v.as_slice(), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn single_step_episode() {
        let env = double_integrator(64);
        let ctrl = Controller::new(&env, cfg(32), CovariancePolicy::Isotropic, 0).unwrap();
        let ep = run_episode(&env, &env, &[1.0, 0.0], ctrl, 1);
        assert_eq!(ep.records.len(), 1);
        assert!(ep.failure.is_none());
    }

    #[test]
    fn zero_cost_episode() {
        let env = ZeroCostEnv {
            state_dim: 2,
            control_dim: 1,
        };
        let ctrl = Controller::new(&env, cfg(16), CovariancePolicy::Isotropic, 3).unwrap();
        let ep = run_episode(&env, &env, &[0.0, 0.0], ctrl, 5);
        assert_eq!(ep.total_cost, 0.0);
    }

    #[test]
    fn online_ltv_covariance_matches_analytic() {
        let env = double_integrator(64);
        let ctrl = Controller::new(&env, cfg(16), CovariancePolicy::Online, 0).unwrap();
        let x = [0.7, -0.2];
        let (sigma, _) = ctrl.covariance(&env, &x).unwrap();
        let window = env.window(0, 4).unwrap();
        let quad = assemble_ltv_cost(&window, &x).unwrap();
        let two_d = quad.hessian.matrix() * 2.0;
        let reg = regularize_hessian(&two_d, hessian_epsilon(&two_d)).unwrap();
        let expect = covo_closed_form(&reg, ctrl.cfg.alpha).unwrap().sigma;
        assert!((sigma.matrix() - expect.matrix()).amax() < 1e-6);
    }

    #[test]
    fn offline_cache_on_ltv_matches_online() {
        let env = double_integrator(64);
        let x0 = [0.7, -0.2];
        let cache = build_offline_cache(&env, &HoldEquilibrium, &x0, 5, 4, 0.1).unwrap();
        let alpha_ln = 0.1f64.ln();
        let mut online = Controller::new(
            &env,
            ControllerConfig { alpha: 0.1, ..cfg(16) },
            CovariancePolicy::Online,
            0,
        )
        .unwrap();
        let mut x = x0.to_vec();
        for sigma in &cache {
            assert!((sigma.log_det() - alpha_ln).abs() < 1e-8);
            let (s, _) = online.covariance(&env, &x).unwrap();
            assert!((s.matrix() - sigma.matrix()).amax() < 1e-6);
            let out = online.control_step(&env, &x).unwrap();
            x = env.step(&x, &out.u, out.record.t);
        }
    }

    #[test]
    fn offline_cache_exhaustion() {
        let env = double_integrator(64);
        let cache = build_offline_cache(&env, &HoldEquilibrium, &[0.0, 0.0], 2, 4, 0.1).unwrap();
        let ctrl = Controller::new(&env, cfg(16), CovariancePolicy::Offline(Arc::new(cache)), 0).unwrap();
        let ep = run_episode(&env, &env, &[0.0, 0.0], ctrl, 3);
        assert_eq!(ep.records.len(), 2);
        assert!(ep.failure.unwrap().contains("cache exhausted"));
    }

    #[test]
    fn cartpole_cache_builds() {
        let reference = Arc::new(Reference::stationary(vec![0.5], 0.02));
        let env = CartPole::new(CartPoleParams::default(), CartPoleCost::default(), reference);
        let cache = build_offline_cache(&env, &CartPoleFeedback, &env.initial_state(), 3, 8, 0.5f64.powi(8)).unwrap();
        assert_eq!(cache.len(), 3);
    }

    #[test]
    fn episodes_are_deterministic_and_replayable() {
        let env = double_integrator(64);
        let run = || {
            let ctrl = Controller::new(&env, cfg(64), CovariancePolicy::Online, 42).unwrap();
            run_episode(&env, &env, &[1.0, 0.5], ctrl, 6)
        };
        let a = run();
        let b = run();
        assert_eq!(a.records, b.records);
        for pair in a.records.windows(2) {
            let shifted = shift(
                &ControlSequence::new(pair[0].u_out.clone(), 1, 4).unwrap(),
                Padding::RepeatLast,
                &[0.0],
            );
            assert_eq!(shifted.as_slice(), pair[1].u_in.as_slice());
        }
        for r in &a.records {
            let samples = r.samples.as_ref().unwrap();
            let weights = r.weights.as_ref().unwrap();
            for k in 0..4 {
                let replay: f64 = weights.iter().enumerate().map(|(i, w)| w * samples[i * 4 + k]).sum();
                assert!((replay - r.u_out[k]).abs() < 1e-10);
            }
            assert!((r.log_det_sigma - cfg(1).alpha.ln()).abs() < 1e-8);
        }
    }

    #[test]
    fn quantiles_interpolate() {
        let s = CostSpread::from_costs(&[4.0, 1.0, 3.0, 2.0, 5.0, f64::INFINITY]);
        assert_eq!((s.q1, s.median, s.q3, s.mean, s.diverged), (2.0, 3.0, 4.0, 3.0, 1));
    }
}
