use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use fsi_core::config::{ScenarioConfig, PRESETS};
use fsi_core::output::{render_dir, run_to_dir};
use fsi_core::stepper::ExitStatus;
use fsi_core::sweep::{sweep, write_sweep, SweepAxis};
use fsi_core::verify::{run_suite, Suite, VerifyOptions};

/// Environment variable holding the worker thread count.
const THREADS_VAR: &str = "FSI_THREADS";

#[derive(Parser)]
#[command(name = "fsi", version, about = "Elastic beam between two viscous fluids, minimizing-movements solver")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and write its artifacts.
    Run {
        /// Scenario file (TOML).
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        config: Option<PathBuf>,
        /// Built-in scenario instead of a file.
        #[arg(long)]
        preset: Option<String>,
        /// Output directory; overrides the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// SVG frame every this many windows (0 = none); overrides the config.
        #[arg(long)]
        frames_every: Option<usize>,
    },
    /// One run per value along an axis, with a joint trend table.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// h, tau, k or eps0.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an acceptance suite and print a JSON report.
    Verify {
        /// operators, energies, stepper or pressure.
        #[arg(long)]
        suite: String,
        /// Tolerance of the divergence identity check.
        #[arg(long, default_value_t = 1e-8)]
        div_tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render SVG frames from the snapshots of a finished run.
    Render {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        frames_every: usize,
    },
}

fn load(config: &Path) -> Result<ScenarioConfig> {
    ScenarioConfig::load(config).with_context(|| format!("loading {}", config.display()))
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_VAR) {
        let n: usize = v.parse().with_context(|| format!("{THREADS_VAR} must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    init_threads()?;
    match cli.cmd {
        Cmd::Run { config, preset, out, frames_every } => {
            let cfg = match (config, preset) {
                (Some(path), _) => load(&path)?,
                (None, Some(name)) => ScenarioConfig::preset(&name).with_context(|| format!("presets: {PRESETS:?}"))?,
                (None, None) => bail!("either --config or --preset is required"),
            };
            let out = out.unwrap_or_else(|| cfg.out_dir());
            let frames = frames_every.unwrap_or(cfg.cli.frames_every);
            let manifest = run_to_dir(&cfg, &out, frames)?;
            let steps: usize = manifest.windows.iter().map(|w| w.steps).sum();
            match manifest.exit {
                ExitStatus::Completed => println!("exit: completed"),
                ExitStatus::Collision { last_safe_time } => println!("exit: collision (last safe time {last_safe_time})"),
                ExitStatus::SolverAbort => println!("exit: solver_abort"),
            }
            println!("{} windows, {steps} substeps, artifacts in {}", manifest.windows.len(), out.display());
            Ok(if manifest.exit == ExitStatus::SolverAbort { ExitCode::from(3) } else { ExitCode::SUCCESS })
        }
        Cmd::Sweep { config, axis, values, out } => {
            let cfg = load(&config)?;
            let axis: SweepAxis = axis.parse()?;
            let out = out.unwrap_or_else(|| cfg.out_dir().join(format!("sweep-{axis}")));
            let rep = sweep(&cfg, axis, &values)?;
            write_sweep(&out, &rep)?;
            for (v, e) in &rep.failures {
                eprintln!("value {v}: {e}");
            }
            for t in &rep.trends {
                println!("{} {}", if t.passed { "PASS" } else { "FAIL" }, t.name);
            }
            println!("{} runs, report in {}", rep.rows.len(), out.display());
            Ok(if rep.failures.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
        Cmd::Verify { suite, div_tol, seed } => {
            let suite: Suite = suite.parse()?;
            let rep = run_suite(suite, VerifyOptions { div_tol, seed });
            println!("{}", serde_json::to_string_pretty(&rep)?);
            Ok(if rep.passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Cmd::Render { out, frames_every } => {
            let n = render_dir(&out, frames_every)?;
            println!("{n} frames written to {}", out.join("frames").display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
