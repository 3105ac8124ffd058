use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use covo_core::controller::{Episode, PolicyKind};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::tasks::run_policy_episode;
use crate::CliError;

/// Outcome of one episode, as written to `episodes.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub policy: PolicyKind,
    pub samples: usize,
    pub seed: u64,
    pub steps: usize,
    pub total_cost: f64,
    pub mean_tracking_error: Option<f64>,
    pub failure: Option<String>,
}

/// Per-policy statistics over seeds, as written to `summary.csv`. Standard
/// deviations use the `n - 1` denominator and are 0 for a single seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub policy: PolicyKind,
    pub samples: usize,
    pub episodes: usize,
    pub failures: usize,
    pub cost_mean: f64,
    pub cost_std: f64,
    pub tracking_error_mean: Option<f64>,
    pub tracking_error_std: Option<f64>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = covo_core::numerics::pairwise_sum(xs) / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean).powi(2)).collect();
    (mean, (covo_core::numerics::pairwise_sum(&dev) / (n - 1.0)).sqrt())
}

pub fn summarize(policy: PolicyKind, samples: usize, rows: &[&EpisodeRow]) -> SummaryRow {
    let costs: Vec<f64> = rows.iter().map(|r| r.total_cost).collect();
    let errors: Vec<f64> = rows.iter().filter_map(|r| r.mean_tracking_error).collect();
    let (cost_mean, cost_std) = mean_std(&costs);
    let (te_mean, te_std) = if errors.len() == rows.len() && !errors.is_empty() {
        let (m, s) = mean_std(&errors);
        (Some(m), Some(s))
    } else {
        (None, None)
    };
    SummaryRow {
        policy,
        samples,
        episodes: rows.len(),
        failures: rows.iter().filter(|r| r.failure.is_some()).count(),
        cost_mean,
        cost_std,
        tracking_error_mean: te_mean,
        tracking_error_std: te_std,
    }
}

/// Everything a run produced, in policy-major, seed-minor order.
pub struct RunOutput {
    pub dir: PathBuf,
    pub episodes: Vec<(EpisodeRow, Episode)>,
    pub summary: Vec<SummaryRow>,
}

impl RunOutput {
    pub fn failed(&self) -> bool {
        self.episodes.iter().any(|(r, _)| r.failure.is_some())
    }

    pub fn episode(&self, policy: PolicyKind, seed: u64) -> Option<&Episode> {
        self.episodes
            .iter()
            .find(|(r, _)| r.policy == policy && r.seed == seed)
            .map(|(_, e)| e)
    }

    pub fn summary_for(&self, policy: PolicyKind) -> Option<&SummaryRow> {
        self.summary.iter().find(|s| s.policy == policy)
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

pub fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

pub fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| io_err(path, e))).collect()
}

pub fn episode_log_name(policy: PolicyKind, seed: u64) -> String {
    format!("{}_seed{seed}.jsonl", policy.name())
}

fn write_episode_log(path: &Path, episode: &Episode) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for record in &episode.records {
        serde_json::to_writer(&mut w, record).map_err(|e| io_err(path, e))?;
        w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn write_timing(path: &Path, episode: &Episode) -> Result<(), CliError> {
    write_csv(path, &episode.timings)
}

#[derive(Serialize)]
struct Metadata<'a> {
    command: &'a str,
    toolkit_version: &'a str,
    config_hash: String,
    seeds: Vec<u64>,
}

/// Writes the effective config and metadata. Nothing here depends on the wall
/// clock, so reruns reproduce these files bit for bit.
pub fn write_run_header(dir: &Path, cfg: &RunConfig, command: &str) -> Result<(), CliError> {
    create_dir(dir)?;
    write_file(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    let meta = Metadata {
        command,
        toolkit_version: env!("CARGO_PKG_VERSION"),
        config_hash: cfg.hash(),
        seeds: (0..cfg.seeds as u64).map(|i| cfg.seed + i).collect(),
    };
    let json = serde_json::to_vec_pretty(&meta).expect("metadata serializes");
    write_file(&dir.join("metadata.json"), &json)
}

/// Runs every policy on every seed and writes, under `dir`:
/// `episodes/<policy>_seed<s>.jsonl` (one step record per line),
/// `timing/<policy>_seed<s>.csv` (wall clock; not reproducible),
/// `episodes.csv`, `summary.csv`, `config.toml` and `metadata.json`.
pub fn run_benchmark(cfg: &RunConfig, dir: &Path, command: &str) -> Result<RunOutput, CliError> {
    write_run_header(dir, cfg, command)?;
    let logs = dir.join("episodes");
    let timing = dir.join("timing");
    create_dir(&logs)?;
    create_dir(&timing)?;
    let jobs: Vec<(PolicyKind, u64)> = cfg
        .policies
        .iter()
        .flat_map(|&p| (0..cfg.seeds as u64).map(move |i| (p, cfg.seed + i)))
        .collect();
    // Each job owns its controller and log files; the merge below is sequential.
    let results: Vec<Result<(EpisodeRow, Episode), CliError>> = jobs
        .par_iter()
        .map(|&(policy, seed)| {
            let episode = run_policy_episode(cfg, policy, seed)?;
            write_episode_log(&logs.join(episode_log_name(policy, seed)), &episode)?;
            write_timing(&timing.join(format!("{}_seed{seed}.csv", policy.name())), &episode)?;
            let row = EpisodeRow {
                policy,
                samples: cfg.samples,
                seed,
                steps: episode.records.len(),
                total_cost: episode.total_cost,
                mean_tracking_error: episode.mean_tracking_error,
                failure: episode.failure.clone(),
            };
            Ok((row, episode))
        })
        .collect();
    let episodes = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let rows: Vec<EpisodeRow> = episodes.iter().map(|(r, _)| r.clone()).collect();
    write_csv(&dir.join("episodes.csv"), &rows)?;
    let summary: Vec<SummaryRow> = cfg
        .policies
        .iter()
        .map(|&p| {
            let mine: Vec<&EpisodeRow> = rows.iter().filter(|r| r.policy == p).collect();
            summarize(p, cfg.samples, &mine)
        })
        .collect();
    write_csv(&dir.join("summary.csv"), &summary)?;
    Ok(RunOutput {
        dir: dir.to_path_buf(),
        episodes,
        summary,
    })
}

/// Sweeps the sample count for every policy. Each count gets its own
/// `n<N>/` run directory; `ablation.csv` collects the summaries.
pub fn run_ablation(cfg: &RunConfig, counts: &[usize], dir: &Path) -> Result<Vec<SummaryRow>, CliError> {
    if counts.is_empty() || counts.contains(&0) {
        return Err(CliError::Config("sample list must be nonempty and positive".into()));
    }
    write_run_header(dir, cfg, "ablate-samples")?;
    let mut rows = Vec::new();
    let mut failed = false;
    for &n in counts {
        let mut sub = cfg.clone();
        sub.samples = n;
        let out = run_benchmark(&sub, &dir.join(format!("n{n}")), "ablate-samples")?;
        failed |= out.failed();
        rows.extend(out.summary);
    }
    write_csv(&dir.join("ablation.csv"), &rows)?;
    if failed {
        return Err(CliError::Runtime("an episode diverged; partial artifacts kept".into()));
    }
    Ok(rows)
}
