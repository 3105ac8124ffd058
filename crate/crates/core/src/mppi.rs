//! One MPPI update: sample around the current mean, roll out, and return the
//! softmax-weighted average of the samples.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{rollout_cost, RolloutBuffers};
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::numerics::{
    pairwise_sum, sample_gaussian, softmax_weights, weighted_sum, RandomStream, SampleSet, SpdMatrix,
};
use crate::sequence::ControlSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MppiConfig {
    pub horizon: usize,
    pub samples: usize,
    pub lambda: f64,
    /// Keep the drawn samples in the step result for replay and logging.
    pub keep_samples: bool,
}

impl MppiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.samples == 0 {
            return Err(Error::InvalidConfig("horizon and samples must be positive".into()));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda must be positive, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MppiStepResult {
    pub u_out: ControlSequence,
    pub weights: Vec<f64>,
    /// Realized cost of each (clamped) sample; `+inf` for diverged rollouts.
    pub costs: Vec<f64>,
    pub effective_sample_size: f64,
    pub samples: Option<SampleSet>,
}

/// `1 / sum w_i^2`.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let sq: Vec<f64> = weights.iter().map(|w| w * w).collect();
    1.0 / pairwise_sum(&sq)
}

/// Softmax weights over `costs` with non-finite entries given zero weight,
/// and the weighted mean of `samples`.
pub fn aggregate(samples: &SampleSet, costs: &[f64], lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let finite: Vec<f64> = costs.iter().copied().filter(|c| c.is_finite()).collect();
    if finite.is_empty() {
        return Err(Error::AllRolloutsDiverged { samples: costs.len() });
    }
    let weights = if finite.len() == costs.len() {
        softmax_weights(costs, lambda)?
    } else {
        let mut inner = softmax_weights(&finite, lambda)?.into_iter();
        costs
            .iter()
            .map(|c| if c.is_finite() { inner.next().unwrap_or(0.0) } else { 0.0 })
            .collect()
    };
    let mean = weighted_sum(samples, &weights);
    Ok((mean, weights))
}

fn clamp_blocks(values: &mut [f64], bounds: &(Vec<f64>, Vec<f64>)) {
    let m = bounds.0.len();
    for block in values.chunks_exact_mut(m) {
        for ((v, lo), hi) in block.iter_mut().zip(&bounds.0).zip(&bounds.1) {
            *v = v.clamp(*lo, *hi);
        }
    }
}

/// MPPI update for an arbitrary cost of the flattened sequence. `scratch`
/// builds per-worker state for `cost`. Samples are clamped to `bounds` before
/// evaluation and the mean is clamped after aggregation.
#[allow(clippy::too_many_arguments)]
pub fn mppi_update<S, I, F>(
    u_in: &ControlSequence,
    sigma: &SpdMatrix,
    samples: usize,
    lambda: f64,
    rng: &RandomStream,
    bounds: Option<&(Vec<f64>, Vec<f64>)>,
    keep_samples: bool,
    scratch: I,
    cost: F,
) -> Result<MppiStepResult>
where
    I: Fn() -> S + Sync + Send,
    F: Fn(&mut S, &[f64]) -> f64 + Sync + Send,
{
    let mut set = sample_gaussian(u_in.as_slice(), sigma, samples, rng)?;
    if let Some(b) = bounds {
        set.par_iter_mut().for_each(|s| clamp_blocks(s, b));
    }
    let costs: Vec<f64> = set
        .as_flat()
        .par_chunks_exact(set.dim())
        .map_init(&scratch, |s, u| {
            let c = cost(s, u);
            if c.is_finite() {
                c
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let (mut mean, weights) = aggregate(&set, &costs, lambda)?;
    if let Some(b) = bounds {
        clamp_blocks(&mut mean, b);
    }
    Ok(MppiStepResult {
        u_out: u_in.with_values(mean)?,
        effective_sample_size: effective_sample_size(&weights),
        weights,
        costs,
        samples: keep_samples.then_some(set),
    })
}

/// MPPI update on the rollout cost of `env` from state `x` at absolute step `t`.
pub fn mppi_step<E: Environment + ?Sized>(
    env: &E,
    x: &[f64],
    t: usize,
    u_in: &ControlSequence,
    sigma: &SpdMatrix,
    cfg: &MppiConfig,
    rng: &RandomStream,
) -> Result<MppiStepResult> {
    cfg.validate()?;
    if sigma.dim() != u_in.dim() {
        return Err(Error::DimensionMismatch {
            expected: u_in.dim(),
            got: sigma.dim(),
        });
    }
    let bounds = env.control_bounds();
    let n = env.state_dim();
    mppi_update(
        u_in,
        sigma,
        cfg.samples,
        cfg.lambda,
        rng,
        bounds.as_ref(),
        cfg.keep_samples,
        || RolloutBuffers::new(n),
        |buf, u| rollout_cost(env, x, u, t, buf),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::QuadraticCost;
    use crate::covariance::{fixed_point, isotropic};
    use crate::env::ZeroCostEnv;
    use nalgebra::DVector;
    use proptest::prelude::*;

    fn quad_2d() -> QuadraticCost {
        QuadraticCost::centered(
            SpdMatrix::diagonal(&[1.0, 4.0]).unwrap(),
            DVector::from_vec(vec![0.5, -0.25]),
            0.0,
        )
        .unwrap()
    }

    fn run_quadratic(q: &QuadraticCost, u_in: &[f64], sigma: &SpdMatrix, n: usize, lambda: f64, seed: u64) -> MppiStepResult {
        let seq = ControlSequence::new(u_in.to_vec(), u_in.len(), 1).unwrap();
        mppi_update(&seq, sigma, n, lambda, &RandomStream::new(seed), None, true, || (), |_, u| q.excess(u)).unwrap()
    }

    #[test]
    fn single_sample_is_returned() {
        let q = quad_2d();
        let sigma = SpdMatrix::scaled_identity(2, 0.3).unwrap();
        let r = run_quadratic(&q, &[1.0, 1.0], &sigma, 1, 0.01, 3);
        assert_eq!(r.u_out.as_slice(), r.samples.unwrap().sample(0));
        assert_eq!(r.weights, vec![1.0]);
    }

    #[test]
    fn weights_sum_to_one_and_mean_is_recomputable() {
        let q = quad_2d();
        let sigma = SpdMatrix::scaled_identity(2, 0.3).unwrap();
        let r = run_quadratic(&q, &[1.0, 1.0], &sigma, 500, 0.1, 4);
        assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let set = r.samples.unwrap();
        for k in 0..2 {
            let naive: f64 = set.iter().zip(&r.weights).map(|(s, w)| w * s[k]).sum();
            assert!((naive - r.u_out.as_slice()[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn large_temperature_gives_sample_mean() {
        let q = quad_2d();
        let sigma = SpdMatrix::scaled_identity(2, 0.25).unwrap();
        let n = 100_000;
        let r = run_quadratic(&q, &[1.0, -1.0], &sigma, n, 1e9, 5);
        let tol = 4.0 * 0.5 / (n as f64).sqrt();
        assert!((r.u_out.as_slice()[0] - 1.0).abs() < tol);
        assert!((r.u_out.as_slice()[1] + 1.0).abs() < tol);
        assert!(r.effective_sample_size > 0.999 * n as f64);
    }

    #[test]
    fn large_sample_limit_is_the_fixed_point() {
        let q = quad_2d();
        let sigma = isotropic(2, 0.01).unwrap();
        let lambda = 0.05;
        let u_in = DVector::from_vec(vec![1.0, 1.0]);
        let fp = fixed_point(&q.hessian, &sigma, lambda, &u_in, &q.minimizer);
        let trials = 20;
        let mut outs = Vec::new();
        for seed in 0..trials {
            outs.push(run_quadratic(&q, u_in.as_slice(), &sigma, 100_000, lambda, seed).u_out.into_vec());
        }
        for k in 0..2 {
            let xs: Vec<f64> = outs.iter().map(|o| o[k]).collect();
            let mean = xs.iter().sum::<f64>() / trials as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
            let se = (var / trials as f64).sqrt();
            assert!((mean - fp[k]).abs() <= 4.0 * se + 1e-3, "coord {k}: {mean} vs {}", fp[k]);
        }
    }

    #[test]
    fn ess_cases() {
        assert!((effective_sample_size(&[0.25; 4]) - 4.0).abs() < 1e-12);
        assert_eq!(effective_sample_size(&[0.0, 1.0, 0.0]), 1.0);
        assert!((effective_sample_size(&[2.0 / 3.0, 1.0 / 3.0]) - 1.8).abs() < 1e-12);
    }

    #[test]
    fn diverged_rollouts_get_zero_weight() {
        let set = SampleSet::from_data(1, vec![1.0, 2.0, 3.0]).unwrap();
        let (mean, w) = aggregate(&set, &[f64::INFINITY, 0.0, f64::INFINITY], 1.0).unwrap();
        assert_eq!(w, vec![0.0, 1.0, 0.0]);
        assert_eq!(mean, vec![2.0]);
        assert_eq!(
            aggregate(&set, &[f64::NAN; 3], 1.0).unwrap_err(),
            Error::AllRolloutsDiverged { samples: 3 }
        );
    }

    #[test]
    fn env_step_is_deterministic_and_clamped() {
        let env = ZeroCostEnv {
            state_dim: 1,
            control_dim: 2,
        };
        let u_in = ControlSequence::zeros(2, 3);
        let sigma = SpdMatrix::scaled_identity(6, 1.0).unwrap();
        let cfg = MppiConfig {
            horizon: 3,
            samples: 64,
            lambda: 1.0,
            keep_samples: false,
        };
        let a = mppi_step(&env, &[0.0], 0, &u_in, &sigma, &cfg, &RandomStream::new(9)).unwrap();
        let b = mppi_step(&env, &[0.0], 0, &u_in, &sigma, &cfg, &RandomStream::new(9)).unwrap();
        assert_eq!(a.u_out, b.u_out);
        assert!((a.effective_sample_size - 64.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn shift_invariance_is_bitwise(
            costs in proptest::collection::vec(0i32..64, 2..40),
            shift in -1000i32..1000,
        ) {
            let n = costs.len();
            let data: Vec<f64> = (0..2 * n).map(|i| (i as f64 * 0.7).sin()).collect();
            let set = SampleSet::from_data(2, data).unwrap();
            let base: Vec<f64> = costs.iter().map(|&c| c as f64 * 0.125).collect();
            let moved: Vec<f64> = base.iter().map(|c| c + shift as f64).collect();
            let (a, _) = aggregate(&set, &base, 0.5).unwrap();
            let (b, _) = aggregate(&set, &moved, 0.5).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn permutation_invariance(
            costs in proptest::collection::vec(0.0f64..3.0, 2..60),
            rotate in 0usize..60,
        ) {
            let n = costs.len();
            let data: Vec<f64> = (0..n).map(|i| (i as f64 * 1.3).cos()).collect();
            let set = SampleSet::from_data(1, data.clone()).unwrap();
            let r = rotate % n;
            let perm: Vec<usize> = (0..n).map(|i| (i + r) % n).collect();
            let pdata: Vec<f64> = perm.iter().map(|&i| data[i]).collect();
            let pcosts: Vec<f64> = perm.iter().map(|&i| costs[i]).collect();
            let pset = SampleSet::from_data(1, pdata).unwrap();
            let (a, _) = aggregate(&set, &costs, 0.3).unwrap();
            let (b, _) = aggregate(&pset, &pcosts, 0.3).unwrap();
            prop_assert!((a[0] - b[0]).abs() <= 1e-12);
        }

        #[test]
        fn output_lies_in_sample_hull(seed in 0u64..500, lambda in 1e-3f64..10.0) {
            let q = quad_2d();
            let sigma = SpdMatrix::diagonal(&[0.5, 0.1]).unwrap();
            let r = run_quadratic(&q, &[0.2, 0.3], &sigma, 50, lambda, seed);
            let set = r.samples.unwrap();
            for k in 0..2 {
                let lo = set.iter().map(|s| s[k]).fold(f64::INFINITY, f64::min);
                let hi = set.iter().map(|s| s[k]).fold(f64::NEG_INFINITY, f64::max);
                let v = r.u_out.as_slice()[k];
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}
