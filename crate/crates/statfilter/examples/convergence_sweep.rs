//! Discrete-parameter convergence of the closure forecast: sup-norm errors
//! against a high-resolution reference, swept in step size at fixed
//! ensemble size and in ensemble size at fixed step, with log-log slope
//! fits. This is a scaled-down sweep that finishes in about a minute; the
//! acceptance suite runs the full-size version.
//!
//! ```text
//! cargo run --release --example convergence_sweep
//! ```

use statfilter::lab::{run_convergence_sweep, ExperimentSpec, InitSpec, SweepSection};
use statfilter::Result;

fn main() -> Result<()> {
    let mut spec = ExperimentSpec { system: "cubic1".into(), seed: 2718, ..ExperimentSpec::default() };
    spec.init = InitSpec { mean: Some(vec![0.8]), diag: Some(vec![0.25]), rows: None };
    spec.converge = SweepSection {
        taus: vec![8e-3, 4e-3, 2e-3, 1e-3],
        ns: vec![256, 512, 1024, 2048],
        tau_sweep_n: None,
        replicates: 6,
        ref_replicates: Some(3),
        t_end: 0.25,
    };

    let report = run_convergence_sweep(&spec, None)?;

    println!("closure-forecast convergence on `{}` ({} replicates)", spec.system, spec.converge.replicates);
    println!();
    println!("step-size sweep at N = {}:", spec.converge.ns.last().expect("sizes"));
    println!("{:>10} {:>14} {:>14}", "tau", "MSE(mean)", "MSE(cov)");
    for (tau, m, c, _) in &report.tau_table {
        println!("{:>10} {:>14.6e} {:>14.6e}", tau, m, c);
    }
    println!(
        "log-log slope {:.3} (95% CI {:.3}..{:.3}, R^2 {:.3})",
        report.tau_fit_combined.slope,
        report.tau_fit_combined.ci95.0,
        report.tau_fit_combined.ci95.1,
        report.tau_fit_combined.r2
    );
    println!();
    println!("ensemble-size sweep at tau = {}:", spec.converge.taus.last().expect("steps"));
    println!("{:>10} {:>14} {:>14}", "N", "MSE(mean)", "MSE(cov)");
    for (n, m, c, _) in &report.n_table {
        println!("{:>10} {:>14.6e} {:>14.6e}", n, m, c);
    }
    println!(
        "MSE vs 1/N slope {:.3} (95% CI {:.3}..{:.3}, R^2 {:.3})",
        report.n_fit_combined.slope,
        report.n_fit_combined.ci95.0,
        report.n_fit_combined.ci95.1,
        report.n_fit_combined.r2
    );
    println!();
    println!("a slope near 1 in both fits is first-order stepping plus 1/N sampling variance;");
    println!("the step-size fit flattens once the bias floor of the Monte Carlo reference dominates.");
    Ok(())
}
