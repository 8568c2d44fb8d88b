//! Command-line front end over the experiment runners in `statfilter::lab`.
//!
//! Every run command takes an experiment TOML (`--config`, defaulting to the
//! built-in scalar demo), writes its series plus a `manifest.json` into
//! `--out`, and prints a one-line summary. Exit codes: 0 success, 2 bad
//! configuration or input files, 3 numerical failure (blow-up, stability
//! bound, exhausted data), 4 I/O failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use statfilter::lab::{
    analyze_run, run_convergence_sweep, run_forecast_experiment, run_truth_experiment, run_twin, ExperimentSpec,
};
use statfilter::Result;

#[derive(Parser)]
#[command(name = "statfilter", version, about = "Coupled stochastic-statistical closure and ensemble statistical filter")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment TOML; omitted, the built-in scalar demo configuration runs.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for CSV/NDJSON outputs and the run manifest.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the system (builtin name or TOML path).
    #[arg(long)]
    system: Option<String>,
    /// Override thread-count-invariant reductions (true = bit-reproducible
    /// across worker counts).
    #[arg(long)]
    reproducible: Option<bool>,
}

impl RunArgs {
    fn spec(&self) -> Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(path) => ExperimentSpec::from_path(path)?,
            None => ExperimentSpec::default(),
        };
        if let Some(seed) = self.seed {
            spec.seed = seed;
        }
        if let Some(system) = &self.system {
            spec.system = system.clone();
        }
        if let Some(rep) = self.reproducible {
            spec.deterministic = rep;
        }
        Ok(spec)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate the coupled truth run and synthesize observations.
    Truth(RunArgs),
    /// Ensemble forecast (no assimilation) through the filter engine.
    Forecast(RunArgs),
    /// Full twin experiment: truth, observations, filter plus forecast twin.
    Filter(RunArgs),
    /// Twin experiment with the d=1 grid oracle enabled.
    Oracle(RunArgs),
    /// Convergence sweep in step size and ensemble size.
    Converge(RunArgs),
    /// Recompute error diagnostics from an existing run directory.
    Analyze {
        /// Directory holding truth.csv, filter.csv, and forecast.csv.
        #[arg(long)]
        run: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Truth(args) => {
            let spec = args.spec()?;
            let (truth, obs) = run_truth_experiment(&spec, args.out.as_deref())?;
            println!(
                "truth: {} records to t = {}, {} observation knots, cloud of {} particles{}",
                truth.path.records.len(),
                truth.path.t_end(),
                obs.n_knots(),
                truth.final_cloud.ens.len(),
                dest(&args.out),
            );
        }
        Cmd::Forecast(args) => {
            let spec = args.spec()?;
            let run = run_forecast_experiment(&spec, args.out.as_deref())?;
            println!(
                "forecast: {} records to t = {}, {} PSD projections{}",
                run.records.len(),
                run.final_state.t,
                run.psd_events,
                dest(&args.out),
            );
        }
        Cmd::Filter(args) => {
            let spec = args.spec()?;
            let out = run_twin(&spec, args.out.as_deref())?;
            println!(
                "filter: {} records, improvement mean {:.4} cov {:.4}{}",
                out.filter.records.len(),
                out.summary.improvement_mean,
                out.summary.improvement_cov,
                dest(&args.out),
            );
        }
        Cmd::Oracle(args) => {
            let mut spec = args.spec()?;
            spec.oracle.enabled = true;
            let out = run_twin(&spec, args.out.as_deref())?;
            let oracle = out.oracle.as_ref().expect("oracle enabled");
            println!(
                "oracle: {} records, final Hm gap {:.3e}, neglected third moment <= {:.3e}{}",
                oracle.records.len(),
                oracle.gap_hm.last().map(|g| g.1).unwrap_or(f64::NAN),
                oracle.q_h_max,
                dest(&args.out),
            );
        }
        Cmd::Converge(args) => {
            let spec = args.spec()?;
            let report = run_convergence_sweep(&spec, args.out.as_deref())?;
            println!(
                "converge: {} points, tau slope {:.3} (r2 {:.3}), 1/N slope {:.3} (r2 {:.3}){}",
                report.points.len(),
                report.tau_fit_combined.slope,
                report.tau_fit_combined.r2,
                report.n_fit_combined.slope,
                report.n_fit_combined.r2,
                dest(&args.out),
            );
        }
        Cmd::Analyze { run } => {
            let report = analyze_run(&run)?;
            println!(
                "analyze: {} rows, improvement mean {:.4} cov {:.4} -> {}",
                report.rows,
                report.improvement_mean,
                report.improvement_cov,
                run.join("analysis.json").display(),
            );
        }
    }
    Ok(())
}

fn dest(out: &Option<PathBuf>) -> String {
    match out {
        Some(dir) => format!(" -> {}", dir.display()),
        None => String::new(),
    }
}
