//! Experiment orchestration: builtin prototype systems, twin experiments
//! (truth → observations → filter, with an optional d=1 grid-oracle mirror),
//! convergence sweeps against a high-resolution reference, histogram/KL
//! diagnostics, and persistent outputs with reproducibility manifests.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::closure::statistics_rhs;
use crate::ensemble::{Ensemble, InitPairing};
use crate::error::{Error, Result};
use crate::filter::{run_filter, AnalysisTerms, FilterConfig, FilterMode, FilterRecord, FilterRun};
use crate::fp1d::{grid_moments, initial_kernel, kb_filter_step, Grid1D, GridDensity};
use crate::gain::GainVariant;
use crate::io;
use crate::moments::Feedbacks;
use crate::obs::{synthesize, ObsMode, ObservationSeries};
use crate::rng::subseed;
use crate::spectral::{parse_system, parse_toml, system_to_toml, ForcingSpec, NoiseSpec, SpectralSystem, StatState};
use crate::truth::{run_closure, run_truth, ClosureRun, TruthConfig, TruthRun};

// Sub-seed tags: every run in a pipeline derives its seed from the
// experiment seed and a tag path, so stages are independent but the whole
// pipeline is a pure function of one seed.
const TAG_TRUTH: u64 = 1;
const TAG_OBS: u64 = 2;
const TAG_FILTER: u64 = 3;
const TAG_SWEEP_REF: u64 = 4;
const TAG_SWEEP_TAU: u64 = 5;
const TAG_SWEEP_N: u64 = 6;

// ---------------------------------------------------------------------------
// Builtin systems
// ---------------------------------------------------------------------------

/// Names accepted by [`builtin_system`].
pub const BUILTIN_SYSTEMS: &[&str] = &["ou1", "cubic1", "triad3", "l96s"];

/// Prototype systems covering the regimes the test suite exercises:
///
/// * `ou1` — scalar Ornstein-Uhlenbeck (`lambda = -1`, `sigma = sqrt(2)`,
///   stationary variance 1); the linear-Gaussian baseline where quadratic
///   observables vanish identically.
/// * `cubic1` — scalar with `gamma_111 = 0.4`: quadratic drift makes the
///   stationary marginal visibly skewed, the smallest genuinely non-Gaussian
///   case.
/// * `triad3` — three-mode energy-conserving triad with cyclic coefficients
///   `(0.9, -0.5, -0.4)`, per-mode damping, and moderate noise.
/// * `l96s` — six cyclic modes with advection-style quadratic coupling
///   (`u_{k+1} u_{k-1} - u_{k-2} u_{k-1}`), unit damping, and constant
///   forcing 6: a small unstable spectral-truncation-style system.
pub fn builtin_system(name: &str) -> Result<SpectralSystem> {
    match name {
        "ou1" => SpectralSystem::new(
            1,
            1,
            vec![-1.0],
            vec![0.0],
            ForcingSpec::zero(1),
            NoiseSpec::isotropic(1, std::f64::consts::SQRT_2),
            false,
        ),
        "cubic1" => SpectralSystem::new(
            1,
            1,
            vec![-2.0],
            vec![0.4],
            ForcingSpec::zero(1),
            NoiseSpec::isotropic(1, 0.5),
            false,
        ),
        "triad3" => {
            let d = 3;
            let mut lambda = vec![0.0; d * d];
            for (k, damp) in [0.5, 0.4, 0.6].iter().enumerate() {
                lambda[k * d + k] = -damp;
            }
            let mut gamma = vec![0.0; d * d * d];
            // Mode k is driven by the product of the other two; the cyclic
            // coefficient sum is zero, so the quadratic part conserves energy.
            let coeff = [0.9, -0.5, -0.4];
            for k in 0..d {
                let m = (k + 1) % d;
                let n = (k + 2) % d;
                gamma[k * d * d + m * d + n] = 0.5 * coeff[k];
                gamma[k * d * d + n * d + m] = 0.5 * coeff[k];
            }
            SpectralSystem::new(d, d, lambda, gamma, ForcingSpec::zero(d), NoiseSpec::isotropic(d, 0.5), true)
        }
        "l96s" => {
            let d = 6;
            let mut lambda = vec![0.0; d * d];
            for k in 0..d {
                lambda[k * d + k] = -1.0;
            }
            let mut gamma = vec![0.0; d * d * d];
            for k in 0..d {
                let kp1 = (k + 1) % d;
                let km1 = (k + d - 1) % d;
                let km2 = (k + d - 2) % d;
                // (u_{k+1} - u_{k-2}) u_{k-1}, split symmetrically.
                gamma[k * d * d + kp1 * d + km1] += 0.5;
                gamma[k * d * d + km1 * d + kp1] += 0.5;
                gamma[k * d * d + km2 * d + km1] -= 0.5;
                gamma[k * d * d + km1 * d + km2] -= 0.5;
            }
            SpectralSystem::new(
                d,
                d,
                lambda,
                gamma,
                ForcingSpec::Constant { value: vec![6.0; d] },
                NoiseSpec::isotropic(d, 0.5),
                true,
            )
        }
        other => Err(Error::UnknownSystem(other.to_string())),
    }
}

/// Resolve a system reference — a builtin name or a TOML file path — into
/// the system plus the label and definition text recorded in manifests.
pub fn load_system_spec(spec: &str) -> Result<(SpectralSystem, String, String)> {
    if BUILTIN_SYSTEMS.contains(&spec) {
        let sys = builtin_system(spec)?;
        let text = system_to_toml(&sys);
        Ok((sys, format!("builtin:{spec}"), text))
    } else {
        let text = fs::read_to_string(spec)?;
        let sys = parse_system(&text, spec)?;
        Ok((sys, spec.to_string(), text))
    }
}

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

/// Initial resolved statistics. Mean defaults to zero; covariance defaults
/// to the identity, or can be given as a diagonal or as full rows.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct InitSpec {
    pub mean: Option<Vec<f64>>,
    pub diag: Option<Vec<f64>>,
    pub rows: Option<Vec<Vec<f64>>>,
}

impl InitSpec {
    pub fn stat_state(&self, d: usize) -> Result<StatState> {
        let mean = match &self.mean {
            Some(v) if v.len() != d => {
                return Err(Error::Config(format!("init.mean has {} entries, system dimension is {d}", v.len())))
            }
            Some(v) => DVector::from_column_slice(v),
            None => DVector::zeros(d),
        };
        let cov = if let Some(rows) = &self.rows {
            if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                return Err(Error::Config(format!("init.rows must be a {d}x{d} matrix")));
            }
            DMatrix::from_fn(d, d, |i, j| rows[i][j])
        } else if let Some(diag) = &self.diag {
            if diag.len() != d {
                return Err(Error::Config(format!("init.diag has {} entries, system dimension is {d}", diag.len())));
            }
            DMatrix::from_fn(d, d, |i, j| if i == j { diag[i] } else { 0.0 })
        } else {
            DMatrix::identity(d, d)
        };
        StatState::new(mean, cov)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TruthSection {
    pub n: usize,
    pub tau: f64,
    pub t_end: f64,
    pub epsilon: f64,
    pub record_every: usize,
    pub snapshot_times: Vec<f64>,
}

impl Default for TruthSection {
    fn default() -> Self {
        TruthSection { n: 8192, tau: 5e-4, t_end: 1.0, epsilon: 1.0, record_every: 1, snapshot_times: Vec::new() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ObsSection {
    pub mode: ObsMode,
    pub delta: f64,
    pub gamma_m: f64,
    pub gamma_v: f64,
}

impl Default for ObsSection {
    fn default() -> Self {
        ObsSection { mode: ObsMode::Sde, delta: 1e-2, gamma_m: 2.0, gamma_v: 2.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub n: usize,
    pub tau: f64,
    /// Horizon; defaults to the truth horizon.
    pub t_end: Option<f64>,
    pub epsilon: f64,
    /// Observation noise levels assumed by the filter; default to the values
    /// the observations were synthesized with.
    pub gamma_m: Option<f64>,
    pub gamma_v: Option<f64>,
    pub mode: FilterMode,
    pub variant: GainVariant,
    pub split_step: bool,
    pub perturb: bool,
    pub record_every: usize,
    pub with_h_cov: bool,
    /// Filter-side initial statistics; default to the truth's.
    pub init: Option<InitSpec>,
}

impl Default for FilterSection {
    fn default() -> Self {
        FilterSection {
            n: 1024,
            tau: 1e-3,
            t_end: None,
            epsilon: 1.0,
            gamma_m: None,
            gamma_v: None,
            mode: FilterMode::Full,
            variant: GainVariant::EulerConsistent,
            split_step: false,
            perturb: true,
            record_every: 1,
            with_h_cov: false,
            init: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    pub enabled: bool,
    /// Grid cells.
    pub m: usize,
    /// Domain half-width in units of the largest truth-path standard
    /// deviation.
    pub pad: f64,
    /// Oracle substeps per filter step (the grid stability bound is usually
    /// tighter than the particle step).
    pub substeps: usize,
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection { enabled: false, m: 192, pad: 8.0, substeps: 1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Step sizes; every entry must divide the largest one.
    pub taus: Vec<f64>,
    /// Ensemble sizes for the sampling sweep.
    pub ns: Vec<usize>,
    /// Ensemble size of the step-size sweep (defaults to the largest entry
    /// of `ns`).
    pub tau_sweep_n: Option<usize>,
    pub replicates: usize,
    /// Independent repetitions averaged into the reference trajectory
    /// (defaults to `max(1, replicates / 8)`; the reference's own noise is
    /// already `4 * n_max / n` times smaller than any sweep run's).
    pub ref_replicates: Option<usize>,
    pub t_end: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            taus: vec![4e-3, 2e-3, 1e-3, 5e-4],
            ns: vec![512, 1024, 2048, 4096, 8192, 16384],
            tau_sweep_n: Some(8192),
            replicates: 20,
            ref_replicates: None,
            t_end: 0.5,
        }
    }
}

/// Full experiment description; the structured form behind `--config` and
/// the single source the run manifest records.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Builtin system name or path to a system TOML file.
    pub system: String,
    pub seed: u64,
    pub t0: f64,
    pub pairing: InitPairing,
    /// Thread-count-invariant reductions (reproducible mode).
    pub deterministic: bool,
    pub init: InitSpec,
    pub truth: TruthSection,
    pub obs: ObsSection,
    pub filter: FilterSection,
    pub oracle: OracleSection,
    pub converge: SweepSection,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        // Out-of-the-box demo: the skewed scalar system in the tested
        // observation-noise regime. (A linear system would be degenerate
        // here: its quadratic observables vanish identically, so the gains
        // are exactly zero and the filter cannot differ from the forecast.)
        ExperimentSpec {
            system: "cubic1".to_string(),
            seed: 1,
            t0: 0.0,
            pairing: InitPairing::Antithetic,
            deterministic: true,
            init: InitSpec { mean: Some(vec![0.4]), diag: Some(vec![0.0625]), rows: None },
            truth: TruthSection { t_end: 0.5, ..TruthSection::default() },
            obs: ObsSection::default(),
            // Start the filter wrong on purpose: a twin whose filter begins
            // at the truth has nothing to correct.
            filter: FilterSection {
                init: Some(InitSpec { mean: Some(vec![0.0]), diag: Some(vec![0.16]), rows: None }),
                ..FilterSection::default()
            },
            oracle: OracleSection::default(),
            converge: SweepSection::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        parse_toml(text, origin)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        ExperimentSpec::from_toml(&text, &path.display().to_string())
    }
}

// ---------------------------------------------------------------------------
// Histogram / KL diagnostics
// ---------------------------------------------------------------------------

/// Counts over `edges.len() - 1` contiguous bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Bin samples into the given edges; values outside the range are clamped
/// into the end bins so both clouds of a comparison keep their full mass.
pub fn histogram_with_edges(xs: &[f64], edges: &[f64]) -> Result<Histogram> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Config("histogram edges must be at least two strictly increasing values".into()));
    }
    let nb = edges.len() - 1;
    let lo = edges[0];
    let hi = edges[nb];
    let mut counts = vec![0u64; nb];
    for &x in xs {
        let idx = if x <= lo {
            0
        } else if x >= hi {
            nb - 1
        } else {
            // Binary search for the bin containing x.
            match edges.binary_search_by(|e| e.partial_cmp(&x).expect("finite edges")) {
                Ok(i) => i.min(nb - 1),
                Err(i) => i - 1,
            }
        };
        counts[idx] += 1;
    }
    Ok(Histogram { edges: edges.to_vec(), counts })
}

/// Freedman-Diaconis binning: width `2 IQR n^{-1/3}` over the sample range,
/// falling back to a single bin for degenerate samples. Bin count is capped
/// at 4096.
pub fn fd_histogram(xs: &[f64]) -> Result<Histogram> {
    if xs.is_empty() {
        return Err(Error::Config("cannot histogram an empty sample".into()));
    }
    if !xs.iter().all(|x| x.is_finite()) {
        return Err(Error::Config("histogram samples must be finite".into()));
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let lo = sorted[0];
    let hi = sorted[sorted.len() - 1];
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let width = 2.0 * iqr * (xs.len() as f64).powf(-1.0 / 3.0);
    let edges = if hi > lo && width > 0.0 {
        let nb = (((hi - lo) / width).ceil() as usize).clamp(1, 4096);
        let step = (hi - lo) / nb as f64;
        (0..=nb).map(|i| lo + i as f64 * step).collect()
    } else {
        // All mass in (numerically) one spot: one unit-width bin around it.
        vec![lo - 0.5, lo + 0.5]
    };
    histogram_with_edges(xs, &edges)
}

/// Linear-interpolation quantile of a sorted sample.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < n {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[n - 1]
    }
}

/// Kullback-Leibler divergence `sum p log(p/q)` between two histograms over
/// identical binning, after adding 1e-12 to every normalized bin and
/// renormalizing so the value is finite for disjoint supports. Zero exactly
/// when the normalized histograms are identical.
pub fn kl_divergence(p: &Histogram, q: &Histogram) -> Result<f64> {
    if p.counts.len() != q.counts.len() {
        return Err(Error::BinMismatch { np: p.counts.len(), nq: q.counts.len() });
    }
    let smooth = |h: &Histogram| -> Vec<f64> {
        let total = h.total().max(1) as f64;
        let raw: Vec<f64> = h.counts.iter().map(|&c| c as f64 / total + 1e-12).collect();
        let z: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / z).collect()
    };
    let ps = smooth(p);
    let qs = smooth(q);
    let mut kl = 0.0;
    for (a, b) in ps.iter().zip(&qs) {
        if *a > 0.0 && a != b {
            kl += a * (a / b).ln();
        }
    }
    Ok(kl.max(0.0))
}

// ---------------------------------------------------------------------------
// Twin experiments
// ---------------------------------------------------------------------------

/// Per-record-time comparison of the assimilating and forecast-only runs
/// against the truth path.
#[derive(Debug, Clone)]
pub struct ErrorRow {
    pub t: f64,
    /// `|mean - truth mean|` (Euclidean) for the assimilating run.
    pub filter_mean: f64,
    /// `|cov - truth cov|` (Frobenius) for the assimilating run.
    pub filter_cov: f64,
    pub forecast_mean: f64,
    pub forecast_cov: f64,
}

/// d=1 grid-oracle mirror of a filter run.
pub struct OracleRun {
    /// Moment series in the filter-record schema (`stat` holds the oracle's
    /// resolved statistics, `hbar_*` the grid observable means, `tr_h_cov`
    /// the trace of the projected kernel, `h_cov` the full 2x2 projection).
    pub records: Vec<FilterRecord>,
    /// `(t, |grid Hm mean - ensemble Hm mean|)` per record time.
    pub gap_hm: Vec<(f64, f64)>,
    /// Largest third central observable moment seen (size of what the
    /// Kalman-Bucy projection neglects).
    pub q_h_max: f64,
}

/// Scalar diagnostics of a twin run, serialized into `report.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TwinSummary {
    /// Time-averaged error ratios, assimilating / forecast-only (< 1 means
    /// assimilation helped).
    pub improvement_mean: f64,
    pub improvement_cov: f64,
    /// Per-component KL(filtered ensemble || truth cloud) at the filter
    /// horizon, over shared Freedman-Diaconis bins built on the truth cloud.
    pub kl_marginals: Vec<f64>,
    pub oracle_gap_initial: Option<f64>,
    pub oracle_gap_final: Option<f64>,
    pub oracle_q_h_max: Option<f64>,
    pub oracle_tr_projection_final: Option<f64>,
}

/// Everything a twin experiment produced, in memory.
pub struct TwinOutput {
    pub truth: TruthRun,
    pub obs: ObservationSeries,
    pub filter: FilterRun,
    pub forecast: FilterRun,
    pub errors: Vec<ErrorRow>,
    pub summary: TwinSummary,
    pub oracle: Option<OracleRun>,
}

fn truth_config(spec: &ExperimentSpec) -> TruthConfig {
    TruthConfig {
        n: spec.truth.n,
        tau: spec.truth.tau,
        t0: spec.t0,
        t_end: spec.truth.t_end,
        seed: subseed(spec.seed, &[TAG_TRUTH]),
        epsilon: spec.truth.epsilon,
        record_every: spec.truth.record_every,
        pairing: spec.pairing,
        deterministic: spec.deterministic,
        snapshot_times: spec.truth.snapshot_times.clone(),
    }
}

fn filter_config(spec: &ExperimentSpec, obs: &ObsSection) -> FilterConfig {
    FilterConfig {
        n: spec.filter.n,
        tau: spec.filter.tau,
        t0: spec.t0,
        t_end: spec.filter.t_end.unwrap_or(spec.truth.t_end),
        epsilon: spec.filter.epsilon,
        gamma_m: spec.filter.gamma_m.unwrap_or(obs.gamma_m),
        gamma_v: spec.filter.gamma_v.unwrap_or(obs.gamma_v),
        variant: spec.filter.variant,
        mode: spec.filter.mode,
        split_step: spec.filter.split_step,
        perturb_obs_noise: spec.filter.perturb,
        seed: subseed(spec.seed, &[TAG_FILTER]),
        pairing: spec.pairing,
        record_every: spec.filter.record_every,
        with_h_cov: spec.filter.with_h_cov,
        deterministic: spec.deterministic,
    }
}

/// Run the full twin pipeline: simulate truth, synthesize observations,
/// assimilate, rerun forecast-only on identical noise, compare everything
/// against the truth path, and (for d=1 when enabled) mirror the run with
/// the grid oracle. When `out` is given, all series plus a manifest are
/// written there.
pub fn run_twin(spec: &ExperimentSpec, out: Option<&Path>) -> Result<TwinOutput> {
    let (sys, sys_label, sys_toml) = load_system_spec(&spec.system)?;
    let d = sys.dim();
    let stat0 = spec.init.stat_state(d)?;
    let stat0_filter = match &spec.filter.init {
        Some(init) => init.stat_state(d)?,
        None => stat0.clone(),
    };

    let truth = run_truth(&sys, stat0.clone(), &truth_config(spec))?;

    let obs = synthesize(
        &sys,
        &truth.path,
        spec.obs.mode,
        spec.obs.delta,
        spec.obs.gamma_m,
        spec.obs.gamma_v,
        subseed(spec.seed, &[TAG_OBS]),
    )?;

    let fil_cfg = filter_config(spec, &spec.obs);
    let filter = run_filter(&sys, Some(&obs), &fil_cfg, stat0_filter.clone())?;

    // Forecast-only twin on the same seed: identical initial ensemble and
    // dynamics noise, so differences are the assimilation alone.
    let fc_cfg = FilterConfig { mode: FilterMode::ForecastOnly, ..fil_cfg.clone() };
    let forecast = run_filter(&sys, None, &fc_cfg, stat0_filter.clone())?;

    let errors = error_series(&truth, &filter, &forecast)?;
    let improvement_mean = ratio(
        errors.iter().map(|e| e.filter_mean).sum::<f64>(),
        errors.iter().map(|e| e.forecast_mean).sum::<f64>(),
    );
    let improvement_cov = ratio(
        errors.iter().map(|e| e.filter_cov).sum::<f64>(),
        errors.iter().map(|e| e.forecast_cov).sum::<f64>(),
    );

    // Marginal KL between the filtered ensemble and the truth cloud at the
    // filter horizon, over bins built on the truth cloud. The truth cloud
    // carries full states while the filter ensemble carries fluctuations, so
    // the filter samples are recentered on its resolved mean first.
    let t_filter_end = fil_cfg.t_end;
    let truth_cloud = truth_cloud_at(&truth, t_filter_end)?;
    let fil_mean = &filter.final_state.stat.mean;
    let mut kl_marginals = Vec::with_capacity(d);
    for k in 0..d {
        let txs = component(truth_cloud, k);
        let mut fxs = component(&filter.final_state.ens, k);
        for x in &mut fxs {
            *x += fil_mean[k];
        }
        let t_hist = fd_histogram(&txs)?;
        let f_hist = histogram_with_edges(&fxs, &t_hist.edges)?;
        kl_marginals.push(kl_divergence(&f_hist, &t_hist)?);
    }

    let oracle = if spec.oracle.enabled {
        Some(run_grid_oracle(&sys, spec, &truth, &obs, &fil_cfg, &stat0_filter, &filter)?)
    } else {
        None
    };

    let summary = TwinSummary {
        improvement_mean,
        improvement_cov,
        kl_marginals,
        oracle_gap_initial: oracle.as_ref().and_then(|o| o.gap_hm.first().map(|g| g.1)),
        oracle_gap_final: oracle.as_ref().and_then(|o| o.gap_hm.last().map(|g| g.1)),
        oracle_q_h_max: oracle.as_ref().map(|o| o.q_h_max),
        oracle_tr_projection_final: oracle.as_ref().and_then(|o| o.records.last().map(|r| r.tr_h_cov)),
    };

    let output = TwinOutput { truth, obs, filter, forecast, errors, summary, oracle };
    if let Some(dir) = out {
        write_twin_outputs(spec, &sys_label, &sys_toml, &output, dir)?;
    }
    Ok(output)
}

/// Run just the truth simulation of an experiment; when `out` is given,
/// write `truth.csv`, observations synthesized per the `[obs]` section
/// (`obs.csv`), final-cloud marginal histograms, and a manifest.
pub fn run_truth_experiment(spec: &ExperimentSpec, out: Option<&Path>) -> Result<(TruthRun, ObservationSeries)> {
    let (sys, sys_label, sys_toml) = load_system_spec(&spec.system)?;
    let stat0 = spec.init.stat_state(sys.dim())?;
    let truth = run_truth(&sys, stat0, &truth_config(spec))?;
    let obs = synthesize(
        &sys,
        &truth.path,
        spec.obs.mode,
        spec.obs.delta,
        spec.obs.gamma_m,
        spec.obs.gamma_v,
        subseed(spec.seed, &[TAG_OBS]),
    )?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut manifest = io::RunManifest::new("truth", spec.seed, spec.deterministic, spec, &sys_label, &sys_toml)?;
        let mut buf = Vec::new();
        io::write_truth_csv(&mut buf, &truth.path)?;
        io::write_output(dir, "truth.csv", &buf)?;
        buf.clear();
        io::write_obs_csv(&mut buf, &obs)?;
        io::write_output(dir, "obs.csv", &buf)?;
        let mut hists = Vec::new();
        for (t, ens) in &truth.snapshots {
            hists.extend(cloud_histograms(ens, *t)?);
        }
        hists.extend(cloud_histograms(&truth.final_cloud.ens, truth.final_cloud.t)?);
        buf.clear();
        io::write_ndjson(&mut buf, &hists)?;
        io::write_output(dir, "truth_hist.ndjson", &buf)?;
        for rel in ["truth.csv", "obs.csv", "truth_hist.ndjson"] {
            manifest.add_output(dir, rel)?;
        }
        manifest.save(dir)?;
    }
    Ok((truth, obs))
}

/// Forecast-only ensemble run through the filter engine (no observations
/// consumed); when `out` is given, write `forecast.csv`, final-cloud
/// histograms, and a manifest.
pub fn run_forecast_experiment(spec: &ExperimentSpec, out: Option<&Path>) -> Result<FilterRun> {
    let (sys, sys_label, sys_toml) = load_system_spec(&spec.system)?;
    let d = sys.dim();
    let stat0 = match &spec.filter.init {
        Some(init) => init.stat_state(d)?,
        None => spec.init.stat_state(d)?,
    };
    let cfg = FilterConfig { mode: FilterMode::ForecastOnly, ..filter_config(spec, &spec.obs) };
    let run = run_filter(&sys, None, &cfg, stat0)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut manifest =
            io::RunManifest::new("forecast", spec.seed, spec.deterministic, spec, &sys_label, &sys_toml)?;
        let mut buf = Vec::new();
        io::write_filter_csv(&mut buf, d, &run.records)?;
        io::write_output(dir, "forecast.csv", &buf)?;
        // Recenter the fluctuation ensemble on the resolved mean so the
        // histogram is a state marginal.
        let mut states = run.final_state.ens.clone();
        for i in 0..states.len() {
            let p = states.particle_mut(i);
            for k in 0..d {
                p[k] += run.final_state.stat.mean[k];
            }
        }
        let hists = cloud_histograms(&states, run.final_state.t)?;
        buf.clear();
        io::write_ndjson(&mut buf, &hists)?;
        io::write_output(dir, "forecast_hist.ndjson", &buf)?;
        for rel in ["forecast.csv", "forecast_hist.ndjson"] {
            manifest.add_output(dir, rel)?;
        }
        manifest.save(dir)?;
    }
    Ok(run)
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        f64::NAN
    }
}

fn component(ens: &Ensemble, k: usize) -> Vec<f64> {
    (0..ens.len()).map(|i| ens.particle(i)[k]).collect()
}

/// The truth particle cloud at time `t`: the final state when the horizon
/// matches, otherwise a recorded snapshot.
fn truth_cloud_at(truth: &TruthRun, t: f64) -> Result<&Ensemble> {
    let scale = truth.path.t_end().abs().max(1.0);
    if (truth.final_cloud.t - t).abs() <= 1e-9 * scale {
        return Ok(&truth.final_cloud.ens);
    }
    truth
        .snapshots
        .iter()
        .find(|(ts, _)| (ts - t).abs() <= 1e-9 * scale)
        .map(|(_, ens)| ens)
        .ok_or_else(|| {
            Error::Config(format!(
                "no truth cloud available at t = {t}; add it to truth.snapshot_times or align the horizons"
            ))
        })
}

fn error_series(truth: &TruthRun, filter: &FilterRun, forecast: &FilterRun) -> Result<Vec<ErrorRow>> {
    if filter.records.len() != forecast.records.len() {
        return Err(Error::Config(format!(
            "filter and forecast runs recorded {} vs {} rows; configure them identically",
            filter.records.len(),
            forecast.records.len()
        )));
    }
    let mut rows = Vec::with_capacity(filter.records.len());
    for (f, fc) in filter.records.iter().zip(&forecast.records) {
        let tr = truth.path.at_time(f.t)?;
        rows.push(ErrorRow {
            t: f.t,
            filter_mean: (&f.stat.mean - &tr.stat.mean).norm(),
            filter_cov: (&f.stat.cov - &tr.stat.cov).norm(),
            forecast_mean: (&fc.stat.mean - &tr.stat.mean).norm(),
            forecast_cov: (&fc.stat.cov - &tr.stat.cov).norm(),
        });
    }
    Ok(rows)
}

/// Mirror a d=1 filter run on the grid: Kalman-Bucy density filter driven by
/// the same observations, resolved statistics advanced by the same closure
/// equations with quadrature feedbacks. Supports `full` and `analysis_only`
/// filter modes (a forecast-only oracle is just transport; run `fp_step`
/// directly instead).
fn run_grid_oracle(
    sys: &SpectralSystem,
    spec: &ExperimentSpec,
    truth: &TruthRun,
    obs: &ObservationSeries,
    fil_cfg: &FilterConfig,
    stat0: &StatState,
    filter: &FilterRun,
) -> Result<OracleRun> {
    if sys.dim() != 1 {
        return Err(Error::Config(format!("the grid oracle is d=1 only; system dimension is {}", sys.dim())));
    }
    if fil_cfg.mode == FilterMode::ForecastOnly {
        return Err(Error::Config("the grid oracle mirrors assimilating runs; disable it for forecast-only".into()));
    }
    let analysis_only = fil_cfg.mode == FilterMode::AnalysisOnly;
    if spec.oracle.substeps == 0 {
        return Err(Error::Config("oracle.substeps must be at least 1".into()));
    }

    // Domain wide enough for the largest spread the truth path visits.
    let mut scale: f64 = stat0.cov[(0, 0)].sqrt();
    for rec in &truth.path.records {
        scale = scale.max(rec.stat.cov[(0, 0)].sqrt());
    }
    let half = spec.oracle.pad * scale;
    let grid = Grid1D::new(-half, half, spec.oracle.m)?;

    let mut rho = GridDensity::gaussian(&grid, 0.0, stat0.cov[(0, 0)])?;
    let mut kernel = initial_kernel(sys, &grid, &rho);
    let mut stat = stat0.clone();
    let mut psd_events = 0usize;

    let tau = fil_cfg.tau;
    let sub = spec.oracle.substeps;
    let dt = tau / sub as f64;
    let n_steps = fil_cfg.n_steps();

    let mut records = Vec::new();
    let mut gap_hm = Vec::new();
    let mut q_h_max = 0.0f64;
    let mut rec_idx = 0usize;

    for i in 0..n_steps {
        for s in 0..sub {
            let t = fil_cfg.t0 + (i * sub + s) as f64 * dt;
            let terms = AnalysisTerms::at(sys, obs, t, dt)?;
            let (rho_next, kernel_next) = kb_filter_step(
                sys,
                &grid,
                &rho,
                &kernel,
                &stat,
                fil_cfg.gamma_m,
                fil_cfg.gamma_v,
                &terms,
                t,
                dt,
                i * sub + s,
                !analysis_only,
            )?;
            // Resolved statistics advance on quadrature feedbacks, frozen in
            // analysis-only runs just like the ensemble filter's.
            if !analysis_only {
                let mom = grid_moments(sys, &grid, &rho);
                let fb = Feedbacks {
                    qm: DVector::from_column_slice(&[mom.hbar_m]),
                    qv: DMatrix::from_element(1, 1, mom.hbar_v),
                    zz: DMatrix::from_element(1, 1, mom.var + mom.mean * mom.mean),
                };
                let (mean_rhs, cov_rhs) = statistics_rhs(sys, &stat, &fb, fil_cfg.epsilon, t);
                stat.mean += mean_rhs * dt;
                stat.cov += cov_rhs * dt;
                if stat.psd_project() {
                    psd_events += 1;
                }
            }
            rho = rho_next;
            kernel = kernel_next;
        }

        let t_rec = fil_cfg.t0 + (i + 1) as f64 * tau;
        let is_last = i + 1 == n_steps;
        if (i + 1) % fil_cfg.record_every == 0 || is_last {
            let mom = grid_moments(sys, &grid, &rho);
            q_h_max = q_h_max.max(mom.q_h);
            let proj = kernel.projection(sys, &grid);
            records.push(FilterRecord {
                t: t_rec,
                step: i + 1,
                stat: stat.clone(),
                hbar_m: DVector::from_column_slice(&[mom.hbar_m]),
                hbar_v: DMatrix::from_element(1, 1, mom.hbar_v),
                tr_h_cov: proj.trace(),
                h_cov: Some(proj),
                psd_events,
            });
            if let Some(frec) = filter.records.get(rec_idx) {
                if (frec.t - t_rec).abs() <= 1e-9 * t_rec.abs().max(1.0) {
                    gap_hm.push((t_rec, (mom.hbar_m - frec.hbar_m[0]).abs()));
                }
            }
            rec_idx += 1;
        }
    }

    Ok(OracleRun { records, gap_hm, q_h_max })
}

fn write_errors_csv<W: std::io::Write>(w: W, rows: &[ErrorRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["t", "filter_mean_err", "filter_cov_err", "forecast_mean_err", "forecast_cov_err"])?;
    for r in rows {
        wtr.write_record([
            io::fmt_float(r.t),
            io::fmt_float(r.filter_mean),
            io::fmt_float(r.filter_cov),
            io::fmt_float(r.forecast_mean),
            io::fmt_float(r.forecast_cov),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

fn write_gap_csv<W: std::io::Write>(w: W, rows: &[(f64, f64)]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["t", "hm_gap"])?;
    for (t, gap) in rows {
        wtr.write_record([io::fmt_float(*t), io::fmt_float(*gap)])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Marginal histograms of a particle cloud, one record per component.
fn cloud_histograms(ens: &Ensemble, t: f64) -> Result<Vec<io::HistogramRecord>> {
    let mut recs = Vec::with_capacity(ens.dim());
    for k in 0..ens.dim() {
        let hist = fd_histogram(&component(ens, k))?;
        recs.push(io::HistogramRecord { t, component: k, bin_edges: hist.edges, counts: hist.counts });
    }
    Ok(recs)
}

fn write_twin_outputs(
    spec: &ExperimentSpec,
    sys_label: &str,
    sys_toml: &str,
    output: &TwinOutput,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = io::RunManifest::new("twin", spec.seed, spec.deterministic, spec, sys_label, sys_toml)?;

    let mut buf = Vec::new();
    io::write_truth_csv(&mut buf, &output.truth.path)?;
    io::write_output(dir, "truth.csv", &buf)?;

    buf.clear();
    io::write_obs_csv(&mut buf, &output.obs)?;
    io::write_output(dir, "obs.csv", &buf)?;

    buf.clear();
    io::write_filter_csv(&mut buf, output.truth.path.d, &output.filter.records)?;
    io::write_output(dir, "filter.csv", &buf)?;

    buf.clear();
    io::write_filter_csv(&mut buf, output.truth.path.d, &output.forecast.records)?;
    io::write_output(dir, "forecast.csv", &buf)?;

    buf.clear();
    write_errors_csv(&mut buf, &output.errors)?;
    io::write_output(dir, "errors.csv", &buf)?;

    // Marginal histograms: truth snapshots and both horizon clouds.
    let mut hists = Vec::new();
    for (t, ens) in &output.truth.snapshots {
        hists.extend(cloud_histograms(ens, *t)?);
    }
    hists.extend(cloud_histograms(&output.truth.final_cloud.ens, output.truth.final_cloud.t)?);
    buf.clear();
    io::write_ndjson(&mut buf, &hists)?;
    io::write_output(dir, "truth_hist.ndjson", &buf)?;

    // The filter ensemble carries fluctuations; recenter on the resolved mean
    // so its histogram is a state marginal comparable with `truth_hist.ndjson`.
    let mut fil_states = output.filter.final_state.ens.clone();
    let fil_mean = &output.filter.final_state.stat.mean;
    for i in 0..fil_states.len() {
        let p = fil_states.particle_mut(i);
        for k in 0..fil_mean.len() {
            p[k] += fil_mean[k];
        }
    }
    let fil_hists = cloud_histograms(&fil_states, output.filter.final_state.t)?;
    buf.clear();
    io::write_ndjson(&mut buf, &fil_hists)?;
    io::write_output(dir, "filter_hist.ndjson", &buf)?;

    let mut outputs = vec![
        "truth.csv",
        "obs.csv",
        "filter.csv",
        "forecast.csv",
        "errors.csv",
        "truth_hist.ndjson",
        "filter_hist.ndjson",
    ];

    if let Some(oracle) = &output.oracle {
        buf.clear();
        io::write_filter_csv(&mut buf, 1, &oracle.records)?;
        io::write_output(dir, "oracle.csv", &buf)?;
        buf.clear();
        write_gap_csv(&mut buf, &oracle.gap_hm)?;
        io::write_output(dir, "oracle_gap.csv", &buf)?;
        outputs.push("oracle.csv");
        outputs.push("oracle_gap.csv");
    }

    let report = serde_json::to_string_pretty(&output.summary)
        .map_err(|e| Error::Config(format!("failed to serialize twin report: {e}")))?;
    io::write_output(dir, "report.json", (report + "\n").as_bytes())?;
    outputs.push("report.json");

    for rel in outputs {
        manifest.add_output(dir, rel)?;
    }
    manifest.save(dir)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Convergence sweeps
// ---------------------------------------------------------------------------

/// Which sweep a point belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Tau,
    N,
}

/// One (step size, ensemble size, replicate) forecast run's sup-errors
/// against the reference trajectory.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub kind: SweepKind,
    pub tau: f64,
    pub n: usize,
    pub replicate: usize,
    pub sup_mean_sq: f64,
    pub sup_cov_sq: f64,
}

/// Ordinary least squares on log-log data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
    /// `slope ± t_crit * stderr` at 95%.
    pub ci95: (f64, f64),
    pub r2: f64,
}

/// Fit `log(y) = intercept + slope * log(x)`.
pub fn fit_loglog(xs: &[f64], ys: &[f64]) -> Result<SlopeFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Config(format!("log-log fit needs >= 2 paired points, got {} and {}", xs.len(), ys.len())));
    }
    if xs.iter().chain(ys.iter()).any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::Config("log-log fit needs positive finite data".into()));
    }
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Config("log-log fit needs at least two distinct x values".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - (intercept + slope * x)).powi(2)).sum();
    let sst: f64 = ly.iter().map(|y| (y - my) * (y - my)).sum();
    let df = (xs.len() as i64 - 2).max(1) as f64;
    let stderr = (sse / df / sxx).sqrt();
    let t = t_crit95(xs.len().saturating_sub(2));
    let r2 = if sst > 0.0 { 1.0 - sse / sst } else { 1.0 };
    Ok(SlopeFit { slope, intercept, stderr, ci95: (slope - t * stderr, slope + t * stderr), r2 })
}

/// Two-sided 95% Student-t critical value.
fn t_crit95(df: usize) -> f64 {
    const TABLE: [f64; 12] = [12.71, 4.30, 3.18, 2.78, 2.57, 2.45, 2.36, 2.31, 2.26, 2.23, 2.20, 2.18];
    match df {
        0 => f64::INFINITY,
        1..=12 => TABLE[df - 1],
        13..=30 => 2.1 - 0.003 * (df as f64 - 13.0),
        _ => 1.96,
    }
}

/// Aggregated sweep results: raw per-replicate points, per-level MSE tables,
/// and log-log slope fits for both sweeps.
#[derive(Debug)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    /// `(tau, mse_mean, mse_cov, mse_combined)` at the largest N.
    pub tau_table: Vec<(f64, f64, f64, f64)>,
    /// `(n, mse_mean, mse_cov, mse_combined)` at the smallest tau.
    pub n_table: Vec<(usize, f64, f64, f64)>,
    /// MSE vs tau slopes. Per-channel fits are `None` when a channel is
    /// degenerate (e.g. the resolved mean of a linear system with zero
    /// coupling is deterministic, so its sampling error is exactly zero).
    pub tau_fit_mean: Option<SlopeFit>,
    pub tau_fit_cov: Option<SlopeFit>,
    pub tau_fit_combined: SlopeFit,
    /// MSE vs 1/N slopes (positive slope ~ 1 means MSE ∝ 1/N).
    pub n_fit_mean: Option<SlopeFit>,
    pub n_fit_cov: Option<SlopeFit>,
    pub n_fit_combined: SlopeFit,
}

#[derive(Serialize)]
struct SweepReportJson<'a> {
    tau_fit_mean: &'a Option<SlopeFit>,
    tau_fit_cov: &'a Option<SlopeFit>,
    tau_fit_combined: &'a SlopeFit,
    n_fit_mean: &'a Option<SlopeFit>,
    n_fit_cov: &'a Option<SlopeFit>,
    n_fit_combined: &'a SlopeFit,
}

/// Forecast-only closure run recorded every step.
fn sweep_run(
    sys: &SpectralSystem,
    spec: &ExperimentSpec,
    stat0: &StatState,
    tau: f64,
    n: usize,
    t_end: f64,
    seed: u64,
) -> Result<ClosureRun> {
    let cfg = TruthConfig {
        n,
        tau,
        t0: spec.t0,
        t_end,
        seed,
        epsilon: spec.truth.epsilon,
        record_every: 1,
        pairing: spec.pairing,
        deterministic: spec.deterministic,
        snapshot_times: Vec::new(),
    };
    run_closure(sys, stat0.clone(), &cfg)
}

/// Sample `(mean, cov)` at multiples of `tau_anchor` from a run recorded at
/// every step of size `tau`.
fn anchor_samples(run: &ClosureRun, tau: f64, tau_anchor: f64, k_max: usize) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> {
    let ratio = tau_anchor / tau;
    let r = ratio.round();
    if (ratio - r).abs() > 1e-9 * ratio.abs() || r < 1.0 {
        return Err(Error::Config(format!("step {tau} does not divide the anchor step {tau_anchor}")));
    }
    let stride = r as usize;
    let mut out = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        let idx = k * stride - 1;
        let rec = run.path.records.get(idx).ok_or_else(|| {
            Error::Config(format!("run too short: needed record {idx} for anchor {k}, have {}", run.path.records.len()))
        })?;
        out.push((rec.stat.mean.clone(), rec.stat.cov.clone()));
    }
    Ok(out)
}

fn sup_errors(samples: &[(DVector<f64>, DMatrix<f64>)], reference: &[(DVector<f64>, DMatrix<f64>)]) -> (f64, f64) {
    let mut sup_mean = 0.0f64;
    let mut sup_cov = 0.0f64;
    for (s, r) in samples.iter().zip(reference) {
        sup_mean = sup_mean.max((&s.0 - &r.0).norm());
        sup_cov = sup_cov.max((&s.1 - &r.1).norm());
    }
    (sup_mean * sup_mean, sup_cov * sup_cov)
}

/// Discrete-parameter convergence study of the closure forecast.
///
/// Each error source gets the reference that isolates it. The tau sweep
/// (at the largest N) compares against an independent high-resolution
/// surrogate for the continuous model: step `tau_min/4`, ensemble
/// `4 * n_max`, averaged over `ref_replicates` repetitions. The N sweep
/// (at the smallest tau) compares against a run at the *same* step with
/// `4 * n_max` particles drawn from the same per-particle streams, so each
/// ladder run is literally a prefix of its reference cloud and the gap is
/// pure sampling error — no discretization bias leaks into the 1/N fit.
/// Errors are sup-norms over the coarsest step grid; slopes come from
/// log-log least squares on replicate-averaged MSE.
pub fn run_convergence_sweep(spec: &ExperimentSpec, out: Option<&Path>) -> Result<SweepReport> {
    let (sys, sys_label, sys_toml) = load_system_spec(&spec.system)?;
    let sw = &spec.converge;
    if sw.taus.len() < 2 || sw.ns.len() < 2 {
        return Err(Error::Config("convergence sweep needs at least two step sizes and two ensemble sizes".into()));
    }
    if sw.replicates == 0 {
        return Err(Error::Config("convergence sweep needs at least one replicate".into()));
    }
    let mut taus = sw.taus.clone();
    taus.sort_by(|a, b| b.partial_cmp(a).expect("finite step sizes"));
    if !taus.iter().all(|&t| t > 0.0 && t.is_finite()) {
        return Err(Error::Config("step sizes must be positive and finite".into()));
    }
    let mut ns = sw.ns.clone();
    ns.sort_unstable();
    if ns[0] < 2 {
        return Err(Error::Config("ensemble sizes must be at least 2".into()));
    }
    let tau_anchor = taus[0];
    let tau_min = taus[taus.len() - 1];
    let n_max = ns[ns.len() - 1];
    let n_tau_sweep = sw.tau_sweep_n.unwrap_or(n_max);
    let tau_ref = tau_min / 4.0;
    let n_ref = 4 * n_max;
    let t_end = sw.t_end;
    let k_max = ((t_end - spec.t0) / tau_anchor + 1e-9).floor() as usize;
    if k_max == 0 {
        return Err(Error::Config(format!("horizon {t_end} is shorter than the largest step {tau_anchor}")));
    }
    let ref_reps = sw.ref_replicates.unwrap_or_else(|| (sw.replicates / 8).max(1));
    let stat0 = spec.init.stat_state(sys.dim())?;

    let mut points = Vec::new();
    for rep in 0..sw.replicates {
        // Variance-reduced reference: average several independent
        // high-resolution trajectories.
        let mut reference: Vec<(DVector<f64>, DMatrix<f64>)> = Vec::new();
        for rr in 0..ref_reps {
            let run = sweep_run(
                &sys,
                spec,
                &stat0,
                tau_ref,
                n_ref,
                t_end,
                subseed(spec.seed, &[TAG_SWEEP_REF, rr as u64, rep as u64]),
            )?;
            let samples = anchor_samples(&run, tau_ref, tau_anchor, k_max)?;
            if reference.is_empty() {
                reference = samples;
            } else {
                for (acc, s) in reference.iter_mut().zip(samples) {
                    acc.0 += s.0;
                    acc.1 += s.1;
                }
            }
        }
        for (mean, cov) in &mut reference {
            *mean /= ref_reps as f64;
            *cov /= ref_reps as f64;
        }

        for (i, &tau) in taus.iter().enumerate() {
            let run = sweep_run(
                &sys,
                spec,
                &stat0,
                tau,
                n_tau_sweep,
                t_end,
                subseed(spec.seed, &[TAG_SWEEP_TAU, i as u64, rep as u64]),
            )?;
            let samples = anchor_samples(&run, tau, tau_anchor, k_max)?;
            let (sup_mean_sq, sup_cov_sq) = sup_errors(&samples, &reference);
            points.push(SweepPoint { kind: SweepKind::Tau, tau, n: n_tau_sweep, replicate: rep, sup_mean_sq, sup_cov_sq });
        }
        // Common random numbers across the N ladder: every size reuses the
        // same per-particle streams, so a run with N particles is literally
        // the first N particles of the largest run. Sampling errors are then
        // positively correlated along the ladder, and since a fitted slope is
        // a zero-sum contrast of the log-MSEs, the shared component cancels
        // instead of jittering the slope. The reference shares those streams
        // too and runs at the same step, which makes each comparison a nested
        // cloud-vs-supercloud gap with variance proportional to 1/N - 1/(4 n_max).
        let ref_n_run = sweep_run(
            &sys,
            spec,
            &stat0,
            tau_min,
            n_ref,
            t_end,
            subseed(spec.seed, &[TAG_SWEEP_N, rep as u64]),
        )?;
        let reference_n = anchor_samples(&ref_n_run, tau_min, tau_anchor, k_max)?;
        for &n in &ns {
            let run = sweep_run(
                &sys,
                spec,
                &stat0,
                tau_min,
                n,
                t_end,
                subseed(spec.seed, &[TAG_SWEEP_N, rep as u64]),
            )?;
            let samples = anchor_samples(&run, tau_min, tau_anchor, k_max)?;
            let (sup_mean_sq, sup_cov_sq) = sup_errors(&samples, &reference_n);
            points.push(SweepPoint { kind: SweepKind::N, tau: tau_min, n, replicate: rep, sup_mean_sq, sup_cov_sq });
        }
    }

    // Replicate-averaged MSE tables.
    let mut tau_table = Vec::with_capacity(taus.len());
    for &tau in &taus {
        let sel: Vec<&SweepPoint> = points.iter().filter(|p| p.kind == SweepKind::Tau && p.tau == tau).collect();
        let m = sel.len() as f64;
        let mean = sel.iter().map(|p| p.sup_mean_sq).sum::<f64>() / m;
        let cov = sel.iter().map(|p| p.sup_cov_sq).sum::<f64>() / m;
        tau_table.push((tau, mean, cov, mean + cov));
    }
    let mut n_table = Vec::with_capacity(ns.len());
    for &n in &ns {
        let sel: Vec<&SweepPoint> = points.iter().filter(|p| p.kind == SweepKind::N && p.n == n).collect();
        let m = sel.len() as f64;
        let mean = sel.iter().map(|p| p.sup_mean_sq).sum::<f64>() / m;
        let cov = sel.iter().map(|p| p.sup_cov_sq).sum::<f64>() / m;
        n_table.push((n, mean, cov, mean + cov));
    }

    let txs: Vec<f64> = tau_table.iter().map(|r| r.0).collect();
    let tau_fit_mean = fit_loglog(&txs, &tau_table.iter().map(|r| r.1).collect::<Vec<_>>()).ok();
    let tau_fit_cov = fit_loglog(&txs, &tau_table.iter().map(|r| r.2).collect::<Vec<_>>()).ok();
    let tau_fit_combined = fit_loglog(&txs, &tau_table.iter().map(|r| r.3).collect::<Vec<_>>())?;
    let nxs: Vec<f64> = n_table.iter().map(|r| 1.0 / r.0 as f64).collect();
    let n_fit_mean = fit_loglog(&nxs, &n_table.iter().map(|r| r.1).collect::<Vec<_>>()).ok();
    let n_fit_cov = fit_loglog(&nxs, &n_table.iter().map(|r| r.2).collect::<Vec<_>>()).ok();
    let n_fit_combined = fit_loglog(&nxs, &n_table.iter().map(|r| r.3).collect::<Vec<_>>())?;

    let report = SweepReport {
        points,
        tau_table,
        n_table,
        tau_fit_mean,
        tau_fit_cov,
        tau_fit_combined,
        n_fit_mean,
        n_fit_cov,
        n_fit_combined,
    };

    if let Some(dir) = out {
        write_sweep_outputs(spec, &sys_label, &sys_toml, &report, dir)?;
    }
    Ok(report)
}

fn write_sweep_outputs(
    spec: &ExperimentSpec,
    sys_label: &str,
    sys_toml: &str,
    report: &SweepReport,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = io::RunManifest::new("converge", spec.seed, spec.deterministic, spec, sys_label, sys_toml)?;

    let mut buf = Vec::new();
    {
        let mut wtr = csv::Writer::from_writer(&mut buf);
        wtr.write_record(["sweep", "tau", "n", "replicate", "sup_mean_sq", "sup_cov_sq"])?;
        for p in &report.points {
            wtr.write_record([
                match p.kind {
                    SweepKind::Tau => "tau".to_string(),
                    SweepKind::N => "n".to_string(),
                },
                io::fmt_float(p.tau),
                p.n.to_string(),
                p.replicate.to_string(),
                io::fmt_float(p.sup_mean_sq),
                io::fmt_float(p.sup_cov_sq),
            ])?;
        }
        wtr.flush()?;
    }
    io::write_output(dir, "sweep_raw.csv", &buf)?;

    buf.clear();
    {
        let mut wtr = csv::Writer::from_writer(&mut buf);
        wtr.write_record(["tau", "mse_mean", "mse_cov", "mse_combined"])?;
        for (tau, a, b, c) in &report.tau_table {
            wtr.write_record([io::fmt_float(*tau), io::fmt_float(*a), io::fmt_float(*b), io::fmt_float(*c)])?;
        }
        wtr.flush()?;
    }
    io::write_output(dir, "sweep_tau.csv", &buf)?;

    buf.clear();
    {
        let mut wtr = csv::Writer::from_writer(&mut buf);
        wtr.write_record(["n", "mse_mean", "mse_cov", "mse_combined"])?;
        for (n, a, b, c) in &report.n_table {
            wtr.write_record([n.to_string(), io::fmt_float(*a), io::fmt_float(*b), io::fmt_float(*c)])?;
        }
        wtr.flush()?;
    }
    io::write_output(dir, "sweep_n.csv", &buf)?;

    let json = SweepReportJson {
        tau_fit_mean: &report.tau_fit_mean,
        tau_fit_cov: &report.tau_fit_cov,
        tau_fit_combined: &report.tau_fit_combined,
        n_fit_mean: &report.n_fit_mean,
        n_fit_cov: &report.n_fit_cov,
        n_fit_combined: &report.n_fit_combined,
    };
    let text = serde_json::to_string_pretty(&json)
        .map_err(|e| Error::Config(format!("failed to serialize sweep report: {e}")))?;
    io::write_output(dir, "report.json", (text + "\n").as_bytes())?;

    for rel in ["sweep_raw.csv", "sweep_tau.csv", "sweep_n.csv", "report.json"] {
        manifest.add_output(dir, rel)?;
    }
    manifest.save(dir)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Post-hoc analysis of a run directory
// ---------------------------------------------------------------------------

/// Diagnostics recomputed from a twin run's CSV files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalyzeReport {
    pub improvement_mean: f64,
    pub improvement_cov: f64,
    pub rows: usize,
}

/// Re-derive the error series and improvement ratios of an existing twin
/// run directory from `truth.csv`, `filter.csv`, and `forecast.csv`, and
/// write `analysis.csv` / `analysis.json` next to them. Cloud-level
/// diagnostics (KL) need the particle data and are only computed at run
/// time.
pub fn analyze_run(dir: &Path) -> Result<AnalyzeReport> {
    let read = |name: &str| -> Result<Vec<u8>> { Ok(fs::read(dir.join(name))?) };
    let truth_raw = read("truth.csv")?;
    let (d, truth_rows) = io::read_truth_csv(&truth_raw[..], "truth.csv")?;
    let filter_raw = read("filter.csv")?;
    let (df, filter_rows) = io::read_filter_csv(&filter_raw[..], "filter.csv")?;
    let forecast_raw = read("forecast.csv")?;
    let (dc, forecast_rows) = io::read_filter_csv(&forecast_raw[..], "forecast.csv")?;
    if df != d || dc != d {
        return Err(Error::Config(format!("dimension mismatch across CSVs: truth {d}, filter {df}, forecast {dc}")));
    }
    if filter_rows.len() != forecast_rows.len() {
        return Err(Error::Config(format!(
            "filter.csv has {} rows but forecast.csv has {}",
            filter_rows.len(),
            forecast_rows.len()
        )));
    }
    let t_scale = truth_rows.last().map(|r| r.t.abs()).unwrap_or(1.0).max(1.0);
    let mut rows = Vec::with_capacity(filter_rows.len());
    for (f, fc) in filter_rows.iter().zip(&forecast_rows) {
        let tr = truth_rows
            .iter()
            .find(|r| (r.t - f.t).abs() <= 1e-9 * t_scale)
            .ok_or(Error::OutOfRange { t: f.t, t0: truth_rows.first().map(|r| r.t).unwrap_or(0.0), t1: truth_rows.last().map(|r| r.t).unwrap_or(0.0) })?;
        rows.push(ErrorRow {
            t: f.t,
            filter_mean: (&f.mean - &tr.mean).norm(),
            filter_cov: (&f.cov - &tr.cov).norm(),
            forecast_mean: (&fc.mean - &tr.mean).norm(),
            forecast_cov: (&fc.cov - &tr.cov).norm(),
        });
    }
    let report = AnalyzeReport {
        improvement_mean: ratio(
            rows.iter().map(|e| e.filter_mean).sum::<f64>(),
            rows.iter().map(|e| e.forecast_mean).sum::<f64>(),
        ),
        improvement_cov: ratio(
            rows.iter().map(|e| e.filter_cov).sum::<f64>(),
            rows.iter().map(|e| e.forecast_cov).sum::<f64>(),
        ),
        rows: rows.len(),
    };

    let mut buf = Vec::new();
    write_errors_csv(&mut buf, &rows)?;
    io::write_output(dir, "analysis.csv", &buf)?;
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Config(format!("failed to serialize analysis report: {e}")))?;
    io::write_output(dir, "analysis.json", (text + "\n").as_bytes())?;
    Ok(report)
}
