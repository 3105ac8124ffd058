use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use covo_cli::config::{resolve_output, Overrides, RunConfig};
use covo_cli::covdump::dump_covariance;
use covo_cli::run::{run_ablation, run_benchmark};
use covo_cli::theory::{run_theory, TheoryConfig, TheoryKind};
use covo_cli::CliError;
use covo_core::controller::PolicyKind;

#[derive(Parser)]
#[command(name = "covo", version, about = "MPPI and covariance-optimal MPC experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct RunFlags {
    /// Comma-separated policies: mppi, covo, covo_offline.
    #[arg(long, value_delimiter = ',', value_parser = parse_policy)]
    policies: Option<Vec<PolicyKind>>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    seeds: Option<usize>,
    /// Output directory; relative paths go under the output-root variable.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn parse_policy(s: &str) -> Result<PolicyKind, String> {
    s.parse().map_err(|e: covo_core::Error| e.to_string())
}

impl RunFlags {
    fn overrides(&self) -> Overrides {
        Overrides {
            policies: self.policies.clone(),
            horizon: self.horizon,
            samples: self.samples,
            lambda: self.lambda,
            steps: self.steps,
            seed: self.seed,
            seeds: self.seeds,
            output: self.output.clone(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TheoryArg {
    Contraction,
    Dominance,
    Strongconvex,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured policy on every seed.
    Run {
        config: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Sweep the sample count for every policy.
    AblateSamples {
        config: PathBuf,
        /// Comma-separated sample counts.
        #[arg(long, value_delimiter = ',', required = true)]
        samples_list: Vec<usize>,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Single-step Monte-Carlo checks on quadratic and strongly convex costs.
    Theory {
        experiment: TheoryArg,
        /// Theory config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to the config's `output`, then `runs/theory`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write the online and isotropic covariances at selected steps.
    DumpCovariance {
        config: PathBuf,
        /// Comma-separated step indices.
        #[arg(long, value_delimiter = ',', required = true)]
        steps_list: Vec<usize>,
        #[command(flatten)]
        flags: RunFlags,
    },
}

fn load(config: &Path, flags: &RunFlags) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(config)?;
    cfg.apply(&flags.overrides())?;
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, flags } => {
            let cfg = load(&config, &flags)?;
            let dir = cfg.output_dir();
            let out = run_benchmark(&cfg, &dir, "run")?;
            for s in &out.summary {
                println!(
                    "{:<13} cost {:.4} ± {:.4}  tracking {}",
                    s.policy.name(),
                    s.cost_mean,
                    s.cost_std,
                    match (s.tracking_error_mean, s.tracking_error_std) {
                        (Some(m), Some(sd)) => format!("{m:.4} ± {sd:.4}"),
                        _ => "-".into(),
                    }
                );
            }
            println!("artifacts in {}", dir.display());
            if out.failed() {
                return Err(CliError::Runtime("an episode diverged; partial artifacts kept".into()));
            }
            Ok(())
        }
        Command::AblateSamples { config, samples_list, flags } => {
            let cfg = load(&config, &flags)?;
            let dir = cfg.output_dir();
            for row in run_ablation(&cfg, &samples_list, &dir)? {
                println!(
                    "{:<13} N={:<6} tracking {:?}",
                    row.policy.name(),
                    row.samples,
                    row.tracking_error_mean
                );
            }
            Ok(())
        }
        Command::Theory { experiment, config, output } => {
            let cfg = match &config {
                Some(p) => TheoryConfig::load(p)?,
                None => TheoryConfig::default(),
            };
            let dir = resolve_output(
                &output
                    .or_else(|| cfg.output.clone())
                    .unwrap_or_else(|| PathBuf::from("runs/theory")),
            );
            let kind = match experiment {
                TheoryArg::Contraction => TheoryKind::Contraction,
                TheoryArg::Dominance => TheoryKind::Dominance,
                TheoryArg::Strongconvex => TheoryKind::StrongConvex,
            };
            let ok = run_theory(kind, &cfg, &dir)?;
            println!("{} in {}", if ok { "all checks passed" } else { "some checks failed" }, dir.display());
            Ok(())
        }
        Command::DumpCovariance { config, steps_list, flags } => {
            let cfg = load(&config, &flags)?;
            let dir = cfg.output_dir();
            let dumps = dump_covariance(&cfg, &steps_list, &dir)?;
            println!("wrote {} covariance sets to {}", dumps.len(), dir.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
