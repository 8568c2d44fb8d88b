//! Reference ("truth") runs and the raw-dynamics particle cloud behind them.
//!
//! The ground truth of a twin experiment is the original system itself,
//! simulated as a large cloud of full states with no mean/fluctuation
//! decomposition: `du = [Lambda u + q(u) + F(t)] dt + Sigma(t) dW` per
//! particle, where `q(u)_k` is the quadratic interaction. Its empirical
//! mean/covariance path supplies the observations, and its marginals carry
//! the non-Gaussian shape the filter is judged against.
//!
//! The same recording scaffolding also drives `run_closure`, which integrates
//! the coupled particle/statistics closure at scale — the two engines solve
//! statistically equivalent models, and the convergence and equivalence tests
//! lean on exactly that.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::closure::{row_major, ClosureOpts, ClosureState, BLOCK, BLOWUP};
use crate::ensemble::{init_gaussian, Ensemble, InitPairing};
use crate::error::{Error, Result};
use crate::moments;
use crate::rng::{self, Channel};
use crate::spectral::{SpectralSystem, StatState};

/// Settings of a truth run.
#[derive(Clone, Debug)]
pub struct TruthConfig {
    /// Ensemble size.
    pub n: usize,
    /// Euler step.
    pub tau: f64,
    /// Final time (start is `t0`).
    pub t0: f64,
    pub t_end: f64,
    pub seed: u64,
    /// Covariance relaxation time (closure runs only; the raw cloud carries
    /// no statistics equations).
    pub epsilon: f64,
    /// Record every this many steps (>= 1); first and last steps are always
    /// recorded.
    pub record_every: usize,
    pub pairing: InitPairing,
    pub deterministic: bool,
    /// Times at which to keep a full copy of the particle cloud.
    pub snapshot_times: Vec<f64>,
}

impl Default for TruthConfig {
    fn default() -> Self {
        TruthConfig {
            n: 4096,
            tau: 1e-3,
            t0: 0.0,
            t_end: 1.0,
            seed: 0,
            epsilon: 1.0,
            record_every: 10,
            pairing: InitPairing::Iid,
            deterministic: true,
            snapshot_times: Vec::new(),
        }
    }
}

impl TruthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config(format!("ensemble size must be at least 2, got {}", self.n)));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("step must be positive, got {}", self.tau)));
        }
        if !(self.t_end > self.t0) {
            return Err(Error::Config(format!(
                "final time {} must exceed start time {}",
                self.t_end, self.t0
            )));
        }
        if self.record_every == 0 {
            return Err(Error::Config("record_every must be at least 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }

    /// Number of Euler steps in the run.
    pub fn n_steps(&self) -> usize {
        ((self.t_end - self.t0) / self.tau).round().max(1.0) as usize
    }
}

/// One recorded instant of a truth run.
#[derive(Clone, Debug)]
pub struct TruthRecord {
    pub t: f64,
    pub stat: StatState,
    /// Ensemble mean-feedback `E_N[Hm(Z)]`.
    pub qm: DVector<f64>,
    /// Ensemble covariance-feedback `E_N[Hv(Z)]`.
    pub qv: DMatrix<f64>,
    /// Empirical second moment of the cloud.
    pub zz: DMatrix<f64>,
    /// Marginal skewness of each fluctuation component.
    pub skew: DVector<f64>,
    /// Marginal (raw) kurtosis of each component; 3 for a Gaussian.
    pub kurt: DVector<f64>,
}

/// Recorded statistics path of a truth run.
#[derive(Clone, Debug)]
pub struct TruthPath {
    pub d: usize,
    pub records: Vec<TruthRecord>,
}

impl TruthPath {
    pub fn t0(&self) -> f64 {
        self.records.first().map(|r| r.t).unwrap_or(0.0)
    }

    pub fn t_end(&self) -> f64 {
        self.records.last().map(|r| r.t).unwrap_or(0.0)
    }

    /// Record at time `t`, which must sit on the recorded grid (relative
    /// tolerance 1e-9 against the record spacing).
    pub fn at_time(&self, t: f64) -> Result<&TruthRecord> {
        let scale = (self.t_end() - self.t0()).abs().max(1.0);
        self.records
            .iter()
            .find(|r| (r.t - t).abs() <= 1e-9 * scale)
            .ok_or(Error::OutOfRange { t, t0: self.t0(), t1: self.t_end() })
    }
}

/// A cloud of full system states advanced by the original dynamics. Each
/// particle owns its noise stream, so trajectories are reproducible
/// particle-by-particle regardless of thread count.
pub struct TruthCloud {
    pub t: f64,
    pub step: usize,
    pub ens: Ensemble,
    dyn_rngs: Vec<ChaCha8Rng>,
}

impl TruthCloud {
    /// Draw the cloud from `N(mean0, cov0)` at time `t0`.
    pub fn init(
        sys: &SpectralSystem,
        stat0: &StatState,
        n: usize,
        seed: u64,
        pairing: InitPairing,
        t0: f64,
    ) -> Result<Self> {
        stat0.validate()?;
        if stat0.dim() != sys.dim() {
            return Err(Error::Config(format!(
                "initial state dimension {} does not match system dimension {}",
                stat0.dim(),
                sys.dim()
            )));
        }
        let ens = init_gaussian(&stat0.mean, &stat0.cov, n, seed, pairing)?;
        let dyn_rngs = (0..n).map(|i| rng::particle_rng(seed, i as u64, Channel::Dynamics)).collect();
        Ok(TruthCloud { t: t0, step: 0, ens, dyn_rngs })
    }

    /// One Euler–Maruyama step of every particle:
    /// `u += [Lambda u + q(u) + F(t)] dt + Sigma(t) sqrt(dt) xi`.
    pub fn step(&mut self, sys: &SpectralSystem, dt: f64) -> Result<()> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::Config(format!("step must be positive, got {dt}")));
        }
        let d = sys.dim();
        let s = sys.noise_dim();
        let lrow = row_major(sys.linear_part());
        let frc = sys.forcing_at(self.t);
        let sigrow = row_major(&sys.noise_at(self.t));
        let sqrt_dt = dt.sqrt();

        let max_abs = self
            .ens
            .data_mut()
            .par_chunks_mut(d * BLOCK)
            .zip(self.dyn_rngs.par_chunks_mut(BLOCK))
            .map(|(ublock, rblock)| {
                let mut q = vec![0.0; d];
                let mut xi = vec![0.0; s];
                let mut incr = vec![0.0; d];
                let mut local_max = 0.0f64;
                for (u, rng) in ublock.chunks_exact_mut(d).zip(rblock.iter_mut()) {
                    // The quadratic interaction q(u) is the same contraction
                    // as the degree-2 observable.
                    sys.obs_mean_into(u, &mut q);
                    rng::fill_standard_normal(rng, &mut xi);
                    for k in 0..d {
                        let mut lu = 0.0;
                        for l in 0..d {
                            lu += lrow[k * d + l] * u[l];
                        }
                        let mut eta = 0.0;
                        for m in 0..s {
                            eta += sigrow[k * s + m] * xi[m];
                        }
                        incr[k] = (lu + q[k] + frc[k]) * dt + eta * sqrt_dt;
                    }
                    for k in 0..d {
                        u[k] += incr[k];
                        local_max = local_max.max(u[k].abs());
                    }
                }
                local_max
            })
            .reduce(|| 0.0, f64::max);

        if !max_abs.is_finite() || max_abs > BLOWUP {
            return Err(Error::NonFinite { what: "truth cloud".into(), step: self.step, t: self.t });
        }
        self.t += dt;
        self.step += 1;
        Ok(())
    }

    /// Empirical mean and covariance of the cloud (divisor `N`).
    pub fn stats(&self, deterministic: bool) -> StatState {
        moments::mean_cov(&self.ens, deterministic)
    }
}

/// A completed truth run: the recorded statistics path, requested cloud
/// snapshots, and the final cloud (reusable as an initial condition).
pub struct TruthRun {
    pub path: TruthPath,
    pub snapshots: Vec<(f64, Ensemble)>,
    pub final_cloud: TruthCloud,
}

/// A completed closure run: same recorded shape as a truth run plus the final
/// coupled state and the PSD-clamp counter.
pub struct ClosureRun {
    pub path: TruthPath,
    pub snapshots: Vec<(f64, Ensemble)>,
    pub final_state: ClosureState,
    pub psd_events: usize,
}

fn make_closure_record(sys: &SpectralSystem, state: &ClosureState, deterministic: bool) -> TruthRecord {
    let fb = state.feedbacks(sys, deterministic);
    let emp = moments::mean_cov(&state.ens, deterministic);
    let (skew, kurt) = moments::marginal_shape(&state.ens, &emp, deterministic);
    TruthRecord {
        t: state.t,
        stat: state.stat.clone(),
        qm: fb.qm,
        qv: fb.qv,
        zz: fb.zz,
        skew,
        kurt,
    }
}

/// Record a raw cloud: statistics are the empirical moments and the feedback
/// diagnostics are taken about the instantaneous cloud mean.
fn make_cloud_record(sys: &SpectralSystem, cloud: &TruthCloud, deterministic: bool) -> TruthRecord {
    let emp = cloud.stats(deterministic);
    let d = cloud.ens.dim();
    let mut fluct = cloud.ens.clone();
    for i in 0..fluct.len() {
        let p = fluct.particle_mut(i);
        for k in 0..d {
            p[k] -= emp.mean[k];
        }
    }
    let fb = moments::feedbacks(sys, &fluct, deterministic);
    let (skew, kurt) = moments::marginal_shape(&cloud.ens, &emp, deterministic);
    TruthRecord { t: cloud.t, stat: emp, qm: fb.qm, qv: fb.qv, zz: fb.zz, skew, kurt }
}

fn snapshot_if_wanted(
    times: &[f64],
    time_scale: f64,
    t: f64,
    ens: &Ensemble,
    out: &mut Vec<(f64, Ensemble)>,
) {
    for &st in times {
        if (st - t).abs() <= 1e-9 * time_scale && !out.iter().any(|(q, _)| (q - t).abs() <= 1e-9 * time_scale) {
            out.push((t, ens.clone()));
        }
    }
}

/// Simulate the original system as a raw particle cloud drawn from
/// `N(mean0, cov0)` and record its empirical statistics path.
pub fn run_truth(sys: &SpectralSystem, stat0: StatState, cfg: &TruthConfig) -> Result<TruthRun> {
    cfg.validate()?;
    let mut cloud = TruthCloud::init(sys, &stat0, cfg.n, cfg.seed, cfg.pairing, cfg.t0)?;
    let n_steps = cfg.n_steps();
    let time_scale = (cfg.t_end - cfg.t0).abs().max(1.0);

    let mut records = vec![make_cloud_record(sys, &cloud, cfg.deterministic)];
    let mut snapshots = Vec::new();
    snapshot_if_wanted(&cfg.snapshot_times, time_scale, cloud.t, &cloud.ens, &mut snapshots);

    for i in 0..n_steps {
        // Pin the clock to the grid so long runs do not accumulate rounding.
        cloud.t = cfg.t0 + i as f64 * cfg.tau;
        cloud.step(sys, cfg.tau)?;
        cloud.t = cfg.t0 + (i + 1) as f64 * cfg.tau;
        if (i + 1) % cfg.record_every == 0 || i + 1 == n_steps {
            records.push(make_cloud_record(sys, &cloud, cfg.deterministic));
        }
        snapshot_if_wanted(&cfg.snapshot_times, time_scale, cloud.t, &cloud.ens, &mut snapshots);
    }

    Ok(TruthRun { path: TruthPath { d: sys.dim(), records }, snapshots, final_cloud: cloud })
}

/// Integrate the coupled closure at scale and record its statistics path.
pub fn run_closure(sys: &SpectralSystem, stat0: StatState, cfg: &TruthConfig) -> Result<ClosureRun> {
    cfg.validate()?;
    let opts = ClosureOpts { epsilon: cfg.epsilon, deterministic: cfg.deterministic };
    let mut state = ClosureState::init(sys, stat0, cfg.n, cfg.seed, cfg.pairing, cfg.t0)?;
    let n_steps = cfg.n_steps();
    let time_scale = (cfg.t_end - cfg.t0).abs().max(1.0);

    let mut records = vec![make_closure_record(sys, &state, cfg.deterministic)];
    let mut snapshots = Vec::new();
    snapshot_if_wanted(&cfg.snapshot_times, time_scale, state.t, &state.ens, &mut snapshots);

    for i in 0..n_steps {
        // Pin the clock to the grid so long runs do not accumulate rounding.
        state.t = cfg.t0 + i as f64 * cfg.tau;
        state.forecast_step(sys, cfg.tau, &opts)?;
        state.t = cfg.t0 + (i + 1) as f64 * cfg.tau;
        if (i + 1) % cfg.record_every == 0 || i + 1 == n_steps {
            records.push(make_closure_record(sys, &state, cfg.deterministic));
        }
        snapshot_if_wanted(&cfg.snapshot_times, time_scale, state.t, &state.ens, &mut snapshots);
    }

    let psd_events = state.psd_events;
    Ok(ClosureRun { path: TruthPath { d: sys.dim(), records }, snapshots, final_state: state, psd_events })
}
