//! Experiment harness: configuration, benchmark runs, theory experiments and
//! covariance dumps, with the artifacts each one writes.

pub mod config;
pub mod covdump;
pub mod run;
pub mod tasks;
pub mod theory;

/// Failure classes with distinct exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}
