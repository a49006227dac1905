//! Run configuration: command-line flags layered over an optional file.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use alc_core::acquisition::AcquisitionKind;
use alc_core::correction::OracleConfig;
use alc_core::model::ResidualPolicy;
use alc_core::session::{LoopConfig, PredictorConfig};
use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Simulate,
    Serve,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    #[default]
    Builtin,
    External,
}

/// Every field is optional so a config file can fill the gaps; a flag given
/// on the command line always wins.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunArgs {
    /// TOML or JSON file with the same fields as these flags (snake_case)
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    /// Continue the run stored in --out from its checkpoint
    #[arg(long)]
    #[serde(skip)]
    pub resume: bool,

    /// Dataset manifest (required unless resuming)
    #[arg(long)]
    pub manifest: Option<PathBuf>,

    /// simulate answers with the oracle, or serve queries over HTTP [default: simulate]
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,

    /// Acquisition function: sim, lcil, cil, entropy, bvsb, random:SEED [default: sim]
    #[arg(long)]
    pub kind: Option<AcquisitionKind>,

    /// Queries per round (B) [default: 64]
    #[arg(long)]
    pub batch_size: Option<usize>,

    /// Number of rounds (T) [default: 4]
    #[arg(long)]
    pub rounds: Option<u32>,

    /// Expansion threshold in [0, 1]; 0 relabels the whole superpixel [default: 0]
    #[arg(long)]
    pub epsilon: Option<f64>,

    /// Predictor refreshed between rounds [default: builtin]
    #[arg(long, value_enum)]
    pub predictor: Option<PredictorKind>,

    /// Shell command for the external predictor, called with the round directory;
    /// without it the run pauses until predictions are dropped in place
    #[arg(long)]
    pub predictor_command: Option<String>,

    /// Probability that the simulated oracle answers wrongly [default: 0]
    #[arg(long)]
    pub oracle_error_rate: Option<f64>,

    /// Seed of the simulated oracle [default: 7]
    #[arg(long)]
    pub oracle_seed: Option<u64>,

    /// Run directory for checkpoints, logs, metrics and the export [default: alc-run]
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Handling of pixels without a superpixel: components, single, exclude [default: components]
    #[arg(long)]
    pub residual: Option<ResidualPolicy>,

    /// Relabel the superpixel on confirmations too [default: true]
    #[arg(long)]
    pub expand_confirmed: Option<bool>,

    /// Listen address in serve mode [default: 127.0.0.1:8080]
    #[arg(long)]
    pub listen: Option<SocketAddr>,

    /// Seconds a served query stays reserved for one annotator [default: 120]
    #[arg(long)]
    pub lease_secs: Option<u64>,

    /// Directory of UI assets served at / in serve mode
    #[arg(long)]
    pub static_dir: Option<PathBuf>,

    /// Pause (resumably) after this many completed rounds
    #[arg(long)]
    pub stop_after: Option<u32>,
}

/// Fully resolved settings.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub mode: Mode,
    pub loop_config: LoopConfig,
    pub out: PathBuf,
    pub listen: SocketAddr,
    pub lease: Duration,
    pub static_dir: Option<PathBuf>,
    pub stop_after: Option<u32>,
    pub resume: bool,
}

/// Problems with flags or config files; reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

pub fn load_file(path: &Path) -> Result<RunArgs> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let parsed = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => serde_json::from_str(&text).map_err(|e| e.to_string()),
        _ => toml::from_str(&text).map_err(|e| e.to_string()),
    };
    match parsed {
        Ok(args) => Ok(args),
        Err(e) => usage(format!("{}: {e}", path.display())),
    }
}

impl RunArgs {
    /// Fills unset fields from `file`.
    pub fn or(self, file: RunArgs) -> RunArgs {
        RunArgs {
            config: self.config,
            resume: self.resume,
            manifest: self.manifest.or(file.manifest),
            mode: self.mode.or(file.mode),
            kind: self.kind.or(file.kind),
            batch_size: self.batch_size.or(file.batch_size),
            rounds: self.rounds.or(file.rounds),
            epsilon: self.epsilon.or(file.epsilon),
            predictor: self.predictor.or(file.predictor),
            predictor_command: self.predictor_command.or(file.predictor_command),
            oracle_error_rate: self.oracle_error_rate.or(file.oracle_error_rate),
            oracle_seed: self.oracle_seed.or(file.oracle_seed),
            out: self.out.or(file.out),
            residual: self.residual.or(file.residual),
            expand_confirmed: self.expand_confirmed.or(file.expand_confirmed),
            listen: self.listen.or(file.listen),
            lease_secs: self.lease_secs.or(file.lease_secs),
            static_dir: self.static_dir.or(file.static_dir),
            stop_after: self.stop_after.or(file.stop_after),
        }
    }

    pub fn resolve(self) -> Result<RunConfig> {
        let args = match &self.config {
            Some(path) => {
                let file = load_file(path)?;
                self.or(file)
            }
            None => self,
        };
        let predictor = match (args.predictor.unwrap_or_default(), args.predictor_command) {
            (PredictorKind::Builtin, None) => PredictorConfig::Builtin,
            (PredictorKind::Builtin, Some(_)) => {
                return usage("--predictor-command needs --predictor external");
            }
            (PredictorKind::External, command) => PredictorConfig::External { command },
        };
        let defaults = LoopConfig::default();
        let loop_config = LoopConfig {
            batch_size: args.batch_size.unwrap_or(defaults.batch_size),
            rounds: args.rounds.unwrap_or(defaults.rounds),
            kind: args.kind.unwrap_or(defaults.kind),
            epsilon: args.epsilon.unwrap_or(defaults.epsilon),
            predictor,
            oracle: OracleConfig {
                error_rate: args.oracle_error_rate.unwrap_or(defaults.oracle.error_rate),
                seed: args.oracle_seed.unwrap_or(defaults.oracle.seed),
            },
            residual: args.residual.unwrap_or(defaults.residual),
            expand_confirmed: args.expand_confirmed.unwrap_or(defaults.expand_confirmed),
        };
        if let Err(e) = loop_config.validate() {
            return usage(e.to_string());
        }
        if args.manifest.is_none() && !args.resume {
            return usage("--manifest is required unless --resume is given");
        }
        Ok(RunConfig {
            manifest: args.manifest,
            mode: args.mode.unwrap_or_default(),
            loop_config,
            out: args.out.unwrap_or_else(|| PathBuf::from("alc-run")),
            listen: args
                .listen
                .unwrap_or_else(|| "127.0.0.1:8080".parse().expect("valid literal")),
            lease: Duration::from_secs(args.lease_secs.unwrap_or(120)),
            static_dir: args.static_dir,
            stop_after: args.stop_after,
            resume: args.resume,
        })
    }
}

pub fn check_fresh_out_dir(out: &Path) -> Result<()> {
    if out.join(alc_core::session::CHECKPOINT_FILE).exists() {
        bail!("{} already holds a run; pass --resume to continue it", out.display());
    }
    Ok(())
}
