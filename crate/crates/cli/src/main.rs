//! `msgen` — data generation, staged training, evaluation, traversal dumps,
//! and the exact d-separation demo, driven by JSON configs.
//!
//! Exit codes: 0 success, 2 invalid config, 3 numeric divergence (the
//! last-good checkpoint path is printed), 4 missing file, 1 anything else.

mod commands;
mod config;

use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Parser)]
#[command(name = "msgen", version, about = "Multi-stage generative modelling pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON config document for the command.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for artifacts (created if absent).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Overrides the config's `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Scalar precision for model math.
    #[arg(long, global = true, value_enum, default_value = "f32")]
    precision: Precision,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic factor image dataset.
    GenData,
    /// Generate the pendulum trajectory dataset.
    GenPendulum,
    /// Train the stage-1 disentangling model.
    TrainStage1,
    /// Train the stage-2 refinement model against a frozen stage 1.
    TrainStage2,
    /// Fit the mixture and train the conditional flow.
    TrainMsflow,
    /// Train the three-step pendulum hierarchy.
    TrainPendulum,
    /// Evaluate MIG, normalized MI, M1-M4, Fréchet distances, and L1.
    EvalMetrics,
    /// Dump latent-traversal grids as MSTN tensors.
    Traverse,
    /// Print the exact conditional tables and independence verdicts.
    DsepDemo,
    /// Run the finite-difference gradient suite (always 64-bit).
    GradCheck,
}

/// Error carrying the process exit code.
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn new(code: u8, message: impl Into<String>) -> Self {
        CliError { code, message: message.into() }
    }

    pub fn invalid_config(msg: impl std::fmt::Display) -> Self {
        CliError::new(2, format!("invalid config: {msg}"))
    }

    pub fn missing_file(msg: impl std::fmt::Display) -> Self {
        CliError::new(4, format!("missing file: {msg}"))
    }

    pub fn diverged(checkpoint: &std::path::Path, epoch: usize) -> Self {
        CliError::new(
            3,
            format!(
                "training diverged at epoch {epoch}; last-good checkpoint written to {}",
                checkpoint.display()
            ),
        )
    }
}

impl From<msgen_core::Error> for CliError {
    fn from(e: msgen_core::Error) -> Self {
        match &e {
            msgen_core::Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                CliError::missing_file(e)
            }
            _ => CliError::new(1, e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

impl Cli {
    /// Parses the command's JSON config, applying the `--seed` override.
    /// Commands with an optional config fall back to `{}`.
    fn parse_config<C: serde::de::DeserializeOwned + serde::Serialize>(
        &self,
        required: bool,
    ) -> Result<C, CliError> {
        let text = match &self.config {
            Some(path) => std::fs::read_to_string(path).map_err(|e| {
                if e.kind() == std::io::ErrorKind::NotFound {
                    CliError::missing_file(format!("config {}: {e}", path.display()))
                } else {
                    CliError::new(1, e.to_string())
                }
            })?,
            None if required => {
                return Err(CliError::invalid_config("this command requires --config"))
            }
            None => "{}".to_string(),
        };
        let mut value: serde_json::Value =
            serde_json::from_str(&text).map_err(CliError::invalid_config)?;
        if let Some(seed) = self.seed {
            if let Some(obj) = value.as_object_mut() {
                obj.insert("seed".to_string(), serde_json::json!(seed));
            }
        }
        serde_json::from_value(value).map_err(CliError::invalid_config)
    }

    /// Creates the output directory and records the resolved config.
    fn prepare_out<C: serde::Serialize>(&self, resolved: &C) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(&self.out).map_err(|e| CliError::new(1, e.to_string()))?;
        let text = serde_json::to_string_pretty(resolved)
            .map_err(|e| CliError::new(1, e.to_string()))?;
        std::fs::write(self.out.join("config.json"), text)
            .map_err(|e| CliError::new(1, e.to_string()))?;
        Ok(self.out.clone())
    }
}
