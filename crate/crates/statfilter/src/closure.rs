//! Coupled particle/statistics forecast dynamics.
//!
//! The resolved statistics `(mean, cov)` evolve by explicit moment equations
//! whose unclosed terms are read off a particle ensemble, while each particle
//! feels the current statistics through the fluctuation operator and the
//! centered quadratic drift:
//!
//! * particle: `dZ = L(mean) Z dt + [Hm(Z) - G(cov)] dt + Sigma(t) dW`
//! * mean:     `d mean = [M(mean) + qm + F(t)] dt`
//! * cov:      `d cov  = [L cov + cov L^T + qv + Sigma Sigma^T + (zz - cov)/epsilon] dt`
//!
//! with `qm = E_N[Hm(Z)]`, `qv = E_N[Hv(Z)]`, `zz = E_N[Z Z^T]` and Euler
//! stepping; feedbacks are always evaluated at the step start. The relaxation
//! term pulls the covariance toward the empirical second moment, which keeps
//! the pair statistically consistent over long runs.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::ensemble::{init_gaussian, Ensemble, InitPairing};
use crate::error::{Error, Result};
use crate::moments::{self, Feedbacks};
use crate::rng::{self, Channel};
use crate::spectral::{SpectralSystem, StatState};

/// Magnitude beyond which a run is declared blown up.
pub const BLOWUP: f64 = 1e8;

/// Particles per parallel work block (also the reproducibility granularity of
/// the in-step maximum; `max` is order-independent, so any block size gives
/// the same answer).
pub(crate) const BLOCK: usize = 512;

/// Step options shared by truth and forecast runs.
#[derive(Clone, Copy, Debug)]
pub struct ClosureOpts {
    /// Relaxation time of the covariance toward the empirical second moment.
    pub epsilon: f64,
    /// Use the fixed-shape (thread-count-invariant) reduction tree.
    pub deterministic: bool,
}

impl Default for ClosureOpts {
    fn default() -> Self {
        ClosureOpts { epsilon: 1.0, deterministic: true }
    }
}

impl ClosureOpts {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!("epsilon must be positive and finite, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Ensemble, statistics, and per-particle noise streams of a coupled run.
pub struct ClosureState {
    pub t: f64,
    pub step: usize,
    pub ens: Ensemble,
    pub stat: StatState,
    /// Number of steps on which the covariance needed PSD clamping.
    pub psd_events: usize,
    pub(crate) dyn_rngs: Vec<ChaCha8Rng>,
}

impl ClosureState {
    /// Initialize at time `t0` with particles drawn from `N(0, cov0)` — the
    /// ensemble carries the fluctuation about the mean, so its own mean is
    /// zero (exactly zero under antithetic pairing).
    pub fn init(
        sys: &SpectralSystem,
        stat0: StatState,
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
        let zero = DVector::zeros(sys.dim());
        let ens = init_gaussian(&zero, &stat0.cov, n, seed, pairing)?;
        let dyn_rngs = (0..n).map(|i| rng::particle_rng(seed, i as u64, Channel::Dynamics)).collect();
        Ok(ClosureState { t: t0, step: 0, ens, stat: stat0, psd_events: 0, dyn_rngs })
    }

    /// Ensemble feedbacks at the current state.
    pub fn feedbacks(&self, sys: &SpectralSystem, deterministic: bool) -> Feedbacks {
        moments::feedbacks(sys, &self.ens, deterministic)
    }

    /// One Euler step of the coupled system.
    pub fn forecast_step(&mut self, sys: &SpectralSystem, tau: f64, opts: &ClosureOpts) -> Result<()> {
        let fb = self.feedbacks(sys, opts.deterministic);
        self.advance_particles_forecast(sys, tau)?;
        self.advance_statistics(sys, &fb, tau, opts)
    }

    /// Particle half of the step (public within the crate so the filter can
    /// interleave analysis terms around it).
    pub(crate) fn advance_particles_forecast(&mut self, sys: &SpectralSystem, tau: f64) -> Result<()> {
        let d = sys.dim();
        let s = sys.noise_dim();
        let lrow = row_major(&sys.fluct_operator(&self.stat.mean));
        let gr = sys.quad_coupling(&self.stat.cov);
        let sigrow = row_major(&sys.noise_at(self.t));
        let sqrt_tau = tau.sqrt();

        let max_abs = self
            .ens
            .data_mut()
            .par_chunks_mut(d * BLOCK)
            .zip(self.dyn_rngs.par_chunks_mut(BLOCK))
            .map(|(zblock, rblock)| {
                let mut hm = vec![0.0; d];
                let mut xi = vec![0.0; s];
                let mut incr = vec![0.0; d];
                let mut local_max = 0.0f64;
                for (z, rng) in zblock.chunks_exact_mut(d).zip(rblock.iter_mut()) {
                    sys.obs_mean_into(z, &mut hm);
                    rng::fill_standard_normal(rng, &mut xi);
                    for k in 0..d {
                        let mut lz = 0.0;
                        for l in 0..d {
                            lz += lrow[k * d + l] * z[l];
                        }
                        let mut eta = 0.0;
                        for m in 0..s {
                            eta += sigrow[k * s + m] * xi[m];
                        }
                        incr[k] = (lz + hm[k] - gr[k]) * tau + eta * sqrt_tau;
                    }
                    for k in 0..d {
                        z[k] += incr[k];
                        local_max = local_max.max(z[k].abs());
                    }
                }
                local_max
            })
            .reduce(|| 0.0, f64::max);

        if !max_abs.is_finite() || max_abs > BLOWUP {
            return Err(Error::NonFinite { what: "particle cloud".into(), step: self.step, t: self.t });
        }
        Ok(())
    }

    /// Statistics half of the step; also advances time and the step counter.
    pub(crate) fn advance_statistics(
        &mut self,
        sys: &SpectralSystem,
        fb: &Feedbacks,
        tau: f64,
        opts: &ClosureOpts,
    ) -> Result<()> {
        let (mean_rhs, cov_rhs) = statistics_rhs(sys, &self.stat, fb, opts.epsilon, self.t);
        self.stat.mean += mean_rhs * tau;
        self.stat.cov += cov_rhs * tau;
        if self.stat.psd_project() {
            self.psd_events += 1;
        }

        let finite = self.stat.mean.iter().chain(self.stat.cov.iter()).all(|x| x.is_finite());
        let max = self
            .stat
            .mean
            .iter()
            .chain(self.stat.cov.iter())
            .fold(0.0f64, |a, &x| a.max(x.abs()));
        if !finite || max > BLOWUP {
            return Err(Error::NonFinite { what: "resolved statistics".into(), step: self.step, t: self.t });
        }
        self.t += tau;
        self.step += 1;
        Ok(())
    }
}

/// Right-hand side of the resolved statistics equations given feedbacks:
/// `dmean = M(mean) + qm + F(t)`,
/// `dcov = L cov + cov L^T + qv + Sigma Sigma^T + (zz - cov)/epsilon`.
/// Shared by the ensemble runs and the d=1 grid oracle (which supplies
/// quadrature feedbacks instead of ensemble averages).
pub fn statistics_rhs(
    sys: &SpectralSystem,
    stat: &StatState,
    fb: &Feedbacks,
    epsilon: f64,
    t: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let lmat = sys.fluct_operator(&stat.mean);
    let mean_rhs = sys.mean_drift(&stat.mean) + &fb.qm + sys.forcing_at(t);
    let mut cov_rhs = &lmat * &stat.cov;
    cov_rhs += cov_rhs.transpose();
    cov_rhs += &fb.qv + sys.noise_cov_at(t) + (&fb.zz - &stat.cov) / epsilon;
    (mean_rhs, cov_rhs)
}

/// Statistics-only Gaussian closure: third moments are dropped (`qv = 0`) and
/// the quadratic mean feedback is taken from the covariance itself
/// (`qm = G(cov)`), so no ensemble is needed. Cheap preview integrator.
/// Returns whether the covariance needed PSD clamping.
pub fn forecast_step_first_order(
    sys: &SpectralSystem,
    stat: &mut StatState,
    t: f64,
    tau: f64,
) -> Result<bool> {
    let lmat = sys.fluct_operator(&stat.mean);
    let mean_rhs = sys.mean_drift(&stat.mean) + sys.quad_coupling(&stat.cov) + sys.forcing_at(t);
    let mut cov_rhs = &lmat * &stat.cov;
    cov_rhs += cov_rhs.transpose();
    cov_rhs += sys.noise_cov_at(t);

    stat.mean += mean_rhs * tau;
    stat.cov += cov_rhs * tau;
    let clamped = stat.psd_project();

    let finite = stat.mean.iter().chain(stat.cov.iter()).all(|x| x.is_finite());
    let max = stat.mean.iter().chain(stat.cov.iter()).fold(0.0f64, |a, &x| a.max(x.abs()));
    if !finite || max > BLOWUP {
        return Err(Error::NonFinite { what: "first-order statistics".into(), step: 0, t });
    }
    Ok(clamped)
}

pub(crate) fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[i * c + j] = m[(i, j)];
        }
    }
    out
}
