use std::path::{Path, PathBuf};

use covo_core::controller::{Padding, PolicyKind};
use covo_core::env::{CartPoleCost, CartPoleParams, FlatnessGains, QuadrotorCost, QuadrotorParams, ZigzagConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Environment variable that relocates relative output directories.
pub const OUTPUT_ROOT_VAR: &str = "COVO_OUTPUT_ROOT";

/// `0.5^32`: per-dimension variance 0.5 over a 32-dimensional sequence.
pub const DEFAULT_ALPHA: f64 = 2.3283064365386963e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Cartpole,
    Quadrotor,
    Ltv,
}

impl TaskKind {
    pub fn control_dim(self) -> usize {
        match self {
            TaskKind::Cartpole | TaskKind::Ltv => 1,
            TaskKind::Quadrotor => 4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CartPoleSection {
    pub params: CartPoleParams,
    pub cost: CartPoleCost,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadrotorSection {
    pub params: QuadrotorParams,
    pub cost: QuadrotorCost,
    /// Gains of the nominal controller that seeds the offline cache.
    pub gains: FlatnessGains,
}

/// Double integrator `p' = v, v' = u` regulated to the origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LtvSection {
    pub dt: f64,
    pub position_weight: f64,
    pub velocity_weight: f64,
    pub control_weight: f64,
    pub initial_state: [f64; 2],
}

impl Default for LtvSection {
    fn default() -> Self {
        Self {
            dt: 0.1,
            position_weight: 1.0,
            velocity_weight: 0.1,
            control_weight: 0.01,
            initial_state: [1.0, 0.0],
        }
    }
}

/// One benchmark run: every policy on `seeds` consecutive seeds starting at
/// `seed`. Seed `s` fixes the sampling stream, the reference and the plant
/// disturbance, so policies are compared on identical tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: TaskKind,
    pub policies: Vec<PolicyKind>,
    pub horizon: usize,
    pub samples: usize,
    pub lambda: f64,
    /// Determinant of the sampling covariance. Mutually exclusive with `sigma`.
    pub alpha: Option<f64>,
    /// Per-coordinate variance of the isotropic baseline; sets `alpha = sigma^(m H)`.
    pub sigma: Option<f64>,
    /// Control steps per episode.
    pub steps: usize,
    /// Overrides the task's integration step when set.
    pub dt: Option<f64>,
    pub seed: u64,
    pub seeds: usize,
    pub padding: Padding,
    /// Keep every sample and weight in the episode log.
    pub log_samples: bool,
    pub output: PathBuf,
    pub reference: Option<ZigzagConfig>,
    pub cartpole: CartPoleSection,
    pub quadrotor: QuadrotorSection,
    pub ltv: LtvSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Quadrotor,
            policies: vec![PolicyKind::Mppi, PolicyKind::Covo],
            horizon: 32,
            samples: 8192,
            lambda: 0.01,
            alpha: None,
            sigma: None,
            steps: 250,
            dt: None,
            seed: 0,
            seeds: 10,
            padding: Padding::RepeatLast,
            log_samples: false,
            output: PathBuf::from("runs/default"),
            reference: None,
            cartpole: CartPoleSection::default(),
            quadrotor: QuadrotorSection::default(),
            ltv: LtvSection::default(),
        }
    }
}

/// Command-line values that replace config keys.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub policies: Option<Vec<PolicyKind>>,
    pub horizon: Option<usize>,
    pub samples: Option<usize>,
    pub lambda: Option<f64>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub seeds: Option<usize>,
    pub output: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), CliError> {
        if let Some(v) = &o.policies {
            self.policies = v.clone();
        }
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = &o.$f { self.$f = v.clone(); } )* };
        }
        set!(horizon, samples, lambda, steps, seed, seeds, output);
        self.validate()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let fail = |msg: &str| Err(CliError::Config(msg.to_string()));
        if self.policies.is_empty() {
            return fail("policies must not be empty");
        }
        if self.horizon == 0 || self.samples == 0 || self.seeds == 0 {
            return fail("horizon, samples and seeds must be positive");
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return fail("lambda must be positive and finite");
        }
        match (self.alpha, self.sigma) {
            (Some(_), Some(_)) => return fail("set at most one of alpha and sigma"),
            (Some(a), None) if !(a.is_finite() && a > 0.0) => return fail("alpha must be positive and finite"),
            (None, Some(s)) if !(s.is_finite() && s > 0.0) => return fail("sigma must be positive and finite"),
            _ => {}
        }
        if !self.det_budget().is_finite() || self.det_budget() <= 0.0 {
            return fail("determinant budget underflows; use a larger sigma");
        }
        if let Some(dt) = self.dt {
            if !(dt.is_finite() && dt > 0.0) {
                return fail("dt must be positive and finite");
            }
        }
        if let Some(r) = &self.reference {
            let want = match self.task {
                TaskKind::Cartpole => 1,
                TaskKind::Quadrotor => 3,
                TaskKind::Ltv => r.amplitude.len(),
            };
            if r.amplitude.len() != want || r.segment_duration.is_nan() || r.segment_duration <= 0.0 {
                return fail("reference needs a positive segment duration and one amplitude per axis");
            }
        }
        Ok(())
    }

    pub fn det_budget(&self) -> f64 {
        match (self.alpha, self.sigma) {
            (Some(a), _) => a,
            (None, Some(s)) => s.powi((self.task.control_dim() * self.horizon) as i32),
            (None, None) => DEFAULT_ALPHA,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// `output`, placed under the output-root variable when it is relative.
    pub fn output_dir(&self) -> PathBuf {
        resolve_output(&self.output)
    }
}

pub fn resolve_output(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_takes_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.horizon, 32);
        assert_eq!(cfg.samples, 8192);
        assert_eq!(cfg.lambda, 0.01);
        assert_eq!(cfg.det_budget(), 0.5f64.powi(32));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::parse("horizn = 3"), Err(CliError::Config(_))));
        assert!(RunConfig::parse("[quadrotor.cost]\nposition = 1.0\nheading = 2.0").is_err());
    }

    #[test]
    fn sigma_sets_the_budget() {
        let cfg = RunConfig::parse("task = \"cartpole\"\nhorizon = 4\nsigma = 0.5").unwrap();
        assert_eq!(cfg.det_budget(), 0.0625);
        assert!(RunConfig::parse("alpha = 1.0\nsigma = 1.0").is_err());
    }

    #[test]
    fn overrides_replace_keys_and_change_the_hash() {
        let mut cfg = RunConfig::default();
        let before = cfg.hash();
        cfg.apply(&Overrides { samples: Some(64), ..Default::default() }).unwrap();
        assert_eq!(cfg.samples, 64);
        assert_ne!(cfg.hash(), before);
        assert!(cfg.apply(&Overrides { samples: Some(0), ..Default::default() }).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig {
            task: TaskKind::Cartpole,
            alpha: Some(1e-3),
            reference: Some(ZigzagConfig { segment_duration: 2.0, amplitude: vec![0.5] }),
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }
}
