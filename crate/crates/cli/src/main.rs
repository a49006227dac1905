mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use alc_core::cost::{classification_cost, correction_cost, cost_saving_rate};
use alc_core::dataset::Dataset;
use alc_core::manifest::{validate_manifest, DatasetManifest};
use alc_core::session::{RoundMetrics, Session, SessionError, METRICS_FILE};
use alc_core::synth::{generate, SynthSpec};
use alc_service::{AppState, ServiceConfig};
use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};

use config::{check_fresh_out_dir, Mode, RunArgs, RunConfig, UsageError};

#[derive(Debug, Parser)]
#[command(
    name = "alc",
    version,
    about = "Budget-aware active label correction for segmentation datasets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a manifest and every tensor it references; prints a JSON report
    Validate { manifest: PathBuf },
    /// Generate a synthetic dataset with known ground truth
    Synth(SynthArgs),
    /// Run the correction loop in simulate or serve mode
    Run(RunArgs),
    /// Print per-round metrics of a run as JSON and write metrics.csv beside them
    Metrics { run_dir: PathBuf },
    /// Print annotation costs per query as CSV
    Cost {
        /// Class counts L
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,16,20,21,32,64,256")]
        classes: Vec<usize>,
        /// Pseudo-label accuracies p
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1"
        )]
        p: Vec<f64>,
    },
    /// Write the current corrected dataset of a run
    Export {
        run_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, clap::Args)]
struct SynthArgs {
    /// Output directory for tensors and manifest.json
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    images: usize,
    #[arg(long, default_value_t = 64)]
    height: u32,
    #[arg(long, default_value_t = 64)]
    width: u32,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Fraction of superpixels given a wrong pseudo label
    #[arg(long, default_value_t = 0.4)]
    noise: f64,
    /// Superpixels per side
    #[arg(long, default_value_t = 8)]
    grid: u32,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Per-channel color noise on the [0, 1] scale
    #[arg(long, default_value_t = 0.04)]
    color_noise: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { manifest } => return validate(&manifest),
        Command::Synth(args) => synth(args),
        Command::Run(args) => args.resolve().and_then(run),
        Command::Metrics { run_dir } => metrics(&run_dir),
        Command::Cost { classes, p } => cost_table(&classes, &p),
        Command::Export { run_dir, out } => export(&run_dir, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn validate(path: &Path) -> ExitCode {
    let manifest = match DatasetManifest::load(path) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let base = path.parent().unwrap_or(Path::new("."));
    let report = validate_manifest(&manifest, base);
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    if report.is_clean() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn synth(args: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        images: args.images,
        height: args.height,
        width: args.width,
        classes: args.classes,
        noise: args.noise,
        grid: args.grid,
        seed: args.seed,
        color_noise: args.color_noise,
    };
    let dataset = generate(&spec).map_err(|e| UsageError(e.to_string()))?;
    dataset.write(&args.out, None)?;
    println!("{}", args.out.join("manifest.json").display());
    Ok(())
}

fn run(cfg: RunConfig) -> Result<()> {
    let mut session = if cfg.resume {
        Session::resume(&cfg.out).with_context(|| format!("resuming {}", cfg.out.display()))?
    } else {
        check_fresh_out_dir(&cfg.out)?;
        let manifest = cfg.manifest.clone().expect("checked when resolving");
        let dataset = Dataset::load(&manifest, cfg.loop_config.residual)?;
        Session::new(dataset, cfg.loop_config.clone(), Some(cfg.out.clone()), Some(manifest))?
    };
    match cfg.mode {
        Mode::Simulate => match session.run_simulated(cfg.stop_after) {
            Ok(()) => print_summary(&session),
            Err(SessionError::InterruptedResumable { round, reason }) => {
                eprintln!("paused after round {round}: {reason}");
                eprintln!("continue with: alc run --resume --out {}", cfg.out.display());
                Ok(())
            }
            Err(e) => Err(e.into()),
        },
        Mode::Serve => serve(session, &cfg),
    }
}

fn serve(session: Session, cfg: &RunConfig) -> Result<()> {
    let runtime = tokio::runtime::Runtime::new()?;
    let service = ServiceConfig {
        session_id: cfg.out.display().to_string(),
        lease: cfg.lease,
        static_dir: cfg.static_dir.clone(),
    };
    let state = AppState::new(Some(session), service)?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(cfg.listen)
            .await
            .map_err(|e| anyhow!("address unavailable: {}: {e}", cfg.listen))?;
        eprintln!("serving on http://{}", listener.local_addr()?);
        let interrupted = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        alc_service::serve(listener, state.clone(), interrupted).await?;
        Ok::<_, anyhow::Error>(())
    })?;
    state.inspect(|s| match s {
        Some(s) => print_summary(s),
        None => Ok(()),
    })
}

fn print_summary(session: &Session) -> Result<()> {
    let summary = serde_json::json!({
        "phase": session.phase(),
        "round": session.state().round,
        "ledger": session.ledger(),
        "metrics": session.metrics().last(),
        "export": session.export_dir(),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn metrics(run_dir: &Path) -> Result<()> {
    let path = run_dir.join(METRICS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| anyhow!("missing outputs: {}: {e}", path.display()))?;
    let rounds: Vec<RoundMetrics> =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut csv = String::from("round,clicks,bits,precision,recall,f1,data_accuracy,data_miou\n");
    for m in &rounds {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            m.round,
            m.clicks,
            m.bits,
            opt(m.precision),
            opt(m.recall),
            opt(m.f1),
            opt(m.data_accuracy),
            opt(m.data_miou)
        )?;
    }
    std::fs::write(run_dir.join("metrics.csv"), csv)?;
    println!("{}", serde_json::to_string_pretty(&rounds)?);
    Ok(())
}

fn cost_table(classes: &[usize], ps: &[f64]) -> Result<()> {
    println!("classes,p,classification_cost,correction_cost,ratio,saving_rate");
    for &l in classes {
        let cls = classification_cost(l).map_err(|e| UsageError(e.to_string()))?;
        for &p in ps {
            let cor = correction_cost(l, p).map_err(|e| UsageError(e.to_string()))?;
            let rate = cost_saving_rate(l, p).map_err(|e| UsageError(e.to_string()))?;
            println!("{l},{p},{cls:.6},{cor:.6},{:.6},{rate:.6}", cor / cls);
        }
    }
    Ok(())
}

fn export(run_dir: &Path, out: &Path) -> Result<()> {
    let session = Session::resume(run_dir).with_context(|| format!("opening {}", run_dir.display()))?;
    session.dataset().write(out, Some(session.working_labels()))?;
    println!("{}", out.join("manifest.json").display());
    Ok(())
}
