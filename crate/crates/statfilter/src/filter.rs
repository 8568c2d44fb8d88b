//! Ensemble statistical filter with mean and covariance observations.
//!
//! Each step advances the coupled particle/statistics pair exactly like the
//! forecast model and adds, per particle, the analysis terms
//!
//! ```text
//! a(z) tau
//!   + Km(z) { dy_m - [Hm(z) + h_m(y)] tau - gamma_m sqrt(tau) xi }
//!   + Kv(z) { dy_v - [Hv(z) + h_v(y)] tau - gamma_v sqrt(tau) Xi }
//! ```
//!
//! where `K = Ktilde / gamma^2` are the closed-form gains, `a` is their Ito
//! drift correction, `dy` is the observation increment over the step window
//! (piecewise-constant slope times `tau`), `h(y)` is the observable drift
//! evaluated on the interpolated observation, and `xi`, `Xi` are optional
//! per-particle perturbation draws (`Xi` symmetric). Gains and their
//! references `hbar = (qm, qv)` are computed once per step from the
//! step-start ensemble; forecast and analysis are applied in one combined
//! Euler increment unless `split_step` is set.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::closure::{ClosureOpts, ClosureState, BLOWUP};
use crate::ensemble::InitPairing;
use crate::error::{Error, Result};
use crate::gain::{GainBuffers, GainCtx, GainVariant};
use crate::moments::{self, Feedbacks, HStats};
use crate::obs::{obs_drift, ObservationSeries};
use crate::rng::{self, Channel};
use crate::spectral::{SpectralSystem, StatState};

/// Particles per parallel work block.
const BLOCK: usize = 512;

/// Which parts of the step to run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// Forecast dynamics plus analysis terms.
    #[default]
    Full,
    /// Forecast dynamics only (no observations consumed); identical in law
    /// and in random-number usage to the plain coupled run.
    ForecastOnly,
    /// Analysis terms only: particles feel just `a` and the gains, and the
    /// resolved statistics stay frozen. This is the regime whose observable
    /// moments follow the pure analysis evolution.
    AnalysisOnly,
}

/// Filter run settings.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FilterConfig {
    /// Ensemble size.
    pub n: usize,
    /// Integration step.
    pub tau: f64,
    pub t0: f64,
    /// Horizon; the run takes `round((t_end - t0)/tau)` steps.
    pub t_end: f64,
    /// Covariance relaxation time of the forecast statistics.
    pub epsilon: f64,
    /// Mean-channel observation noise level.
    pub gamma_m: f64,
    /// Covariance-channel observation noise level.
    pub gamma_v: f64,
    pub variant: GainVariant,
    pub mode: FilterMode,
    /// Apply forecast and analysis as two sub-steps (gain references are then
    /// recomputed from the post-forecast ensemble) instead of one combined
    /// Euler increment.
    pub split_step: bool,
    /// Draw the per-particle observation perturbation noises.
    pub perturb_obs_noise: bool,
    pub seed: u64,
    pub pairing: InitPairing,
    /// Record every this many steps (the final step is always recorded).
    pub record_every: usize,
    /// Store the full observable covariance matrix in each record (its trace
    /// is always recorded).
    pub with_h_cov: bool,
    /// Use the fixed-shape reduction tree for ensemble averages.
    pub deterministic: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            n: 1024,
            tau: 1e-3,
            t0: 0.0,
            t_end: 1.0,
            epsilon: 1.0,
            gamma_m: 1.0,
            gamma_v: 1.0,
            variant: GainVariant::default(),
            mode: FilterMode::Full,
            split_step: false,
            perturb_obs_noise: true,
            seed: 0,
            pairing: InitPairing::Antithetic,
            record_every: 1,
            with_h_cov: false,
            deterministic: true,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config(format!("ensemble size must be at least 2, got {}", self.n)));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("step must be positive, got {}", self.tau)));
        }
        if !(self.t_end > self.t0) {
            return Err(Error::Config(format!("horizon {} must exceed start time {}", self.t_end, self.t0)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.gamma_m > 0.0) || !(self.gamma_v > 0.0) {
            return Err(Error::Config(format!(
                "observation noise levels must be positive, got gamma_m={} gamma_v={}",
                self.gamma_m, self.gamma_v
            )));
        }
        if self.record_every == 0 {
            return Err(Error::Config("record_every must be at least 1".into()));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        ((self.t_end - self.t0) / self.tau).round().max(1.0) as usize
    }

    /// The observation grid must nest the integration grid: the spacing is an
    /// integer multiple of `tau` and the start offset a whole number of steps.
    fn check_alignment(&self, obs: &ObservationSeries) -> Result<()> {
        let ratio = obs.delta / self.tau;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::Config(format!(
                "observation spacing {} is not an integer multiple of the step {}",
                obs.delta, self.tau
            )));
        }
        let offset = (self.t0 - obs.t0) / self.tau;
        if (offset - offset.round()).abs() > 1e-9 * offset.abs().max(1.0) {
            return Err(Error::Config(format!(
                "filter start {} is not on the step grid anchored at the observation start {}",
                self.t0, obs.t0
            )));
        }
        Ok(())
    }
}

/// One recorded instant of a filter run (taken after the step completes).
#[derive(Clone, Debug)]
pub struct FilterRecord {
    pub t: f64,
    pub step: usize,
    pub stat: StatState,
    /// Ensemble average of the mean-channel observable.
    pub hbar_m: DVector<f64>,
    /// Ensemble average of the covariance-channel observable.
    pub hbar_v: DMatrix<f64>,
    /// Trace of the observable covariance.
    pub tr_h_cov: f64,
    /// Full observable covariance, when requested.
    pub h_cov: Option<DMatrix<f64>>,
    /// Cumulative count of PSD projections so far.
    pub psd_events: usize,
}

/// A completed filter run.
pub struct FilterRun {
    pub records: Vec<FilterRecord>,
    pub final_state: ClosureState,
    pub psd_events: usize,
}

/// Step-level observation quantities shared by every particle (and by the
/// d=1 grid oracle, so both consumers see identical window arithmetic).
pub struct AnalysisTerms {
    /// Observation increments over the step window (already times `tau`).
    pub dy_m: Vec<f64>,
    pub dy_v: Vec<f64>,
    /// Observable drift at the interpolated observation value.
    pub h_m: Vec<f64>,
    pub h_v: Vec<f64>,
}

impl AnalysisTerms {
    pub fn at(sys: &SpectralSystem, obs: &ObservationSeries, t: f64, tau: f64) -> Result<Self> {
        let d = sys.dim();
        let dy = obs.derivative(t)? * tau;
        let h = obs_drift(sys, &obs.value(t)?, t)?;
        Ok(AnalysisTerms {
            dy_m: dy.as_slice()[..d].to_vec(),
            dy_v: dy.as_slice()[d..].to_vec(),
            h_m: h.as_slice()[..d].to_vec(),
            h_v: h.as_slice()[d..].to_vec(),
        })
    }
}

/// Per-particle analysis displacement (drift plus gain terms), written into
/// `out`. Perturbation noises are drawn from `rng` when provided (`xi` first,
/// then the symmetric `Xi`). `scratch` must hold `2 d^2 + 2 d` values.
fn analysis_increment_into(
    ctx: &GainCtx,
    z: &[f64],
    buf: &mut GainBuffers,
    terms: &AnalysisTerms,
    tau: f64,
    mut rng: Option<&mut ChaCha8Rng>,
    scratch: &mut [f64],
    out: &mut [f64],
) {
    let d = ctx.sys.dim();
    let sqrt_tau = tau.sqrt();
    let (innov_m, rest) = scratch.split_at_mut(d);
    let (innov_v, rest) = rest.split_at_mut(d * d);
    let (noise_m, noise_v) = rest.split_at_mut(d);

    ctx.prepare(z, buf);
    for k in 0..d {
        innov_m[k] = terms.dy_m[k] - (buf.s[k] + terms.h_m[k]) * tau;
    }
    for b in 0..d * d {
        innov_v[b] = terms.dy_v[b] - (buf.v[b] + terms.h_v[b]) * tau;
    }
    if let Some(rng) = rng.as_deref_mut() {
        rng::fill_standard_normal(rng, noise_m);
        rng::fill_symmetric_normal(rng, d, noise_v);
        for k in 0..d {
            innov_m[k] -= ctx.gamma_m * sqrt_tau * noise_m[k];
        }
        for b in 0..d * d {
            innov_v[b] -= ctx.gamma_v * sqrt_tau * noise_v[b];
        }
    }
    ctx.drift_into(z, buf, out);
    for x in out.iter_mut() {
        *x *= tau;
    }
    // Reuse the noise scratch for the gain output.
    ctx.apply_gain_into(z, buf, innov_m, innov_v, noise_m);
    for j in 0..d {
        out[j] += noise_m[j];
    }
}

/// Analysis displacement of a single particle, in the dense form convenient
/// for tests and diagnostics. `dy_m`/`dy_v` are increments over the step
/// window; `y_val` is the interpolated observation the drift `h` is evaluated
/// at. Perturbation noises are drawn iff `rng` is provided.
pub fn analysis_increment(
    ctx: &GainCtx,
    z: &DVector<f64>,
    dy_m: &DVector<f64>,
    dy_v: &DMatrix<f64>,
    y_val: &DVector<f64>,
    t: f64,
    tau: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<DVector<f64>> {
    let d = ctx.sys.dim();
    let h = obs_drift(ctx.sys, y_val, t)?;
    let mut dv = vec![0.0; d * d];
    for k in 0..d {
        for l in 0..d {
            dv[k * d + l] = dy_v[(k, l)];
        }
    }
    let terms = AnalysisTerms {
        dy_m: dy_m.as_slice().to_vec(),
        dy_v: dv,
        h_m: h.as_slice()[..d].to_vec(),
        h_v: h.as_slice()[d..].to_vec(),
    };
    let mut buf = GainBuffers::new(d);
    let mut scratch = vec![0.0; 2 * d * d + 2 * d];
    let mut out = vec![0.0; d];
    analysis_increment_into(ctx, z.as_slice(), &mut buf, &terms, tau, rng, &mut scratch, &mut out);
    Ok(DVector::from_vec(out))
}

/// Filter state: the coupled pair plus the per-particle analysis noise
/// streams (kept apart from the dynamics streams so forecast-only and
/// filtered runs share identical `W` paths).
pub struct FilterState {
    pub inner: ClosureState,
    analysis_rngs: Vec<ChaCha8Rng>,
}

impl FilterState {
    pub fn init(sys: &SpectralSystem, stat0: StatState, cfg: &FilterConfig) -> Result<Self> {
        let inner = ClosureState::init(sys, stat0, cfg.n, cfg.seed, cfg.pairing, cfg.t0)?;
        let analysis_rngs =
            (0..cfg.n).map(|i| rng::particle_rng(cfg.seed, i as u64, Channel::Analysis)).collect();
        Ok(FilterState { inner, analysis_rngs })
    }

    /// Apply the analysis displacement to every particle (no forecast terms,
    /// no statistics update).
    fn advance_particles_analysis(&mut self, ctx: &GainCtx, terms: &AnalysisTerms, tau: f64, perturb: bool) -> Result<()> {
        let d = ctx.sys.dim();
        let max_abs = self
            .inner
            .ens
            .data_mut()
            .par_chunks_mut(d * BLOCK)
            .zip(self.analysis_rngs.par_chunks_mut(BLOCK))
            .map(|(zblock, rblock)| {
                let mut buf = GainBuffers::new(d);
                let mut scratch = vec![0.0; 2 * d * d + 2 * d];
                let mut incr = vec![0.0; d];
                let mut local_max = 0.0f64;
                for (z, rng) in zblock.chunks_exact_mut(d).zip(rblock.iter_mut()) {
                    let rng = perturb.then_some(rng);
                    analysis_increment_into(ctx, z, &mut buf, terms, tau, rng, &mut scratch, &mut incr);
                    for k in 0..d {
                        z[k] += incr[k];
                        local_max = local_max.max(z[k].abs());
                    }
                }
                local_max
            })
            .reduce(|| 0.0, f64::max);
        if !max_abs.is_finite() || max_abs > BLOWUP {
            return Err(Error::NonFinite { what: "particle cloud".into(), step: self.inner.step, t: self.inner.t });
        }
        Ok(())
    }

    /// Combined forecast+analysis particle pass: both displacements are
    /// evaluated at the step-start particle and added in one Euler increment.
    fn advance_particles_combined(
        &mut self,
        sys: &SpectralSystem,
        ctx: &GainCtx,
        terms: &AnalysisTerms,
        tau: f64,
        perturb: bool,
    ) -> Result<()> {
        let d = sys.dim();
        let s = sys.noise_dim();
        let lrow = {
            let m = sys.fluct_operator(&self.inner.stat.mean);
            let mut v = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    v[i * d + j] = m[(i, j)];
                }
            }
            v
        };
        let gr = sys.quad_coupling(&self.inner.stat.cov);
        let sigrow = {
            let m = sys.noise_at(self.inner.t);
            let mut v = vec![0.0; d * s];
            for i in 0..d {
                for j in 0..s {
                    v[i * s + j] = m[(i, j)];
                }
            }
            v
        };
        let sqrt_tau = tau.sqrt();

        let max_abs = self
            .inner
            .ens
            .data_mut()
            .par_chunks_mut(d * BLOCK)
            .zip(self.inner.dyn_rngs.par_chunks_mut(BLOCK))
            .zip(self.analysis_rngs.par_chunks_mut(BLOCK))
            .map(|((zblock, dblock), ablock)| {
                let mut buf = GainBuffers::new(d);
                let mut scratch = vec![0.0; 2 * d * d + 2 * d];
                let mut ana = vec![0.0; d];
                let mut xi = vec![0.0; s];
                let mut incr = vec![0.0; d];
                let mut local_max = 0.0f64;
                for ((z, drng), arng) in zblock.chunks_exact_mut(d).zip(dblock.iter_mut()).zip(ablock.iter_mut()) {
                    let arng = perturb.then_some(arng);
                    // The analysis kernel also fills buf.s = Hm(z), which the
                    // forecast drift reuses below.
                    analysis_increment_into(ctx, z, &mut buf, terms, tau, arng, &mut scratch, &mut ana);
                    rng::fill_standard_normal(drng, &mut xi);
                    for k in 0..d {
                        let mut lz = 0.0;
                        for l in 0..d {
                            lz += lrow[k * d + l] * z[l];
                        }
                        let mut eta = 0.0;
                        for m in 0..s {
                            eta += sigrow[k * s + m] * xi[m];
                        }
                        incr[k] = (lz + buf.s[k] - gr[k]) * tau + eta * sqrt_tau;
                    }
                    for k in 0..d {
                        z[k] += incr[k] + ana[k];
                        local_max = local_max.max(z[k].abs());
                    }
                }
                local_max
            })
            .reduce(|| 0.0, f64::max);
        if !max_abs.is_finite() || max_abs > BLOWUP {
            return Err(Error::NonFinite { what: "particle cloud".into(), step: self.inner.step, t: self.inner.t });
        }
        Ok(())
    }
}

fn gain_ctx_from_feedbacks<'a>(sys: &'a SpectralSystem, fb: &Feedbacks, cfg: &FilterConfig) -> Result<GainCtx<'a>> {
    GainCtx::new(sys, fb.qm.clone(), fb.qv.clone(), cfg.gamma_m, cfg.gamma_v, cfg.variant)
}

/// One filter step: gains from the step-start ensemble, particles, then the
/// resolved statistics (feedbacks at step start throughout).
pub fn filter_step(
    st: &mut FilterState,
    sys: &SpectralSystem,
    obs: Option<&ObservationSeries>,
    cfg: &FilterConfig,
) -> Result<()> {
    let tau = cfg.tau;
    let opts = ClosureOpts { epsilon: cfg.epsilon, deterministic: cfg.deterministic };
    if cfg.mode == FilterMode::ForecastOnly {
        return st.inner.forecast_step(sys, tau, &opts);
    }

    let obs = obs.ok_or_else(|| Error::Config("this filter mode requires an observation series".into()))?;
    let t = st.inner.t;
    if !obs.covers(t, t + tau) {
        return Err(Error::ObsExhausted { t });
    }
    let terms = AnalysisTerms::at(sys, obs, t, tau)?;
    let fb = st.inner.feedbacks(sys, cfg.deterministic);

    match cfg.mode {
        FilterMode::AnalysisOnly => {
            let ctx = gain_ctx_from_feedbacks(sys, &fb, cfg)?;
            st.advance_particles_analysis(&ctx, &terms, tau, cfg.perturb_obs_noise)?;
            st.inner.t += tau;
            st.inner.step += 1;
            Ok(())
        }
        FilterMode::Full if cfg.split_step => {
            // Operator splitting: forecast sub-step first, then the analysis
            // displacement evaluated on (and referenced to) the forecast
            // ensemble.
            st.inner.advance_particles_forecast(sys, tau)?;
            let fb_post = st.inner.feedbacks(sys, cfg.deterministic);
            let ctx = gain_ctx_from_feedbacks(sys, &fb_post, cfg)?;
            st.advance_particles_analysis(&ctx, &terms, tau, cfg.perturb_obs_noise)?;
            st.inner.advance_statistics(sys, &fb, tau, &opts)
        }
        FilterMode::Full => {
            let ctx = gain_ctx_from_feedbacks(sys, &fb, cfg)?;
            st.advance_particles_combined(sys, &ctx, &terms, tau, cfg.perturb_obs_noise)?;
            st.inner.advance_statistics(sys, &fb, tau, &opts)
        }
        FilterMode::ForecastOnly => unreachable!(),
    }
}

fn make_record(sys: &SpectralSystem, st: &FilterState, cfg: &FilterConfig) -> FilterRecord {
    let d = sys.dim();
    let HStats { hbar, cov, .. } = moments::h_stats(sys, &st.inner.ens, false, cfg.deterministic);
    let hbar_m = DVector::from_column_slice(&hbar.as_slice()[..d]);
    let hbar_v = DMatrix::from_row_slice(d, d, &hbar.as_slice()[d..]);
    FilterRecord {
        t: st.inner.t,
        step: st.inner.step,
        stat: st.inner.stat.clone(),
        hbar_m,
        hbar_v,
        tr_h_cov: cov.trace(),
        h_cov: cfg.with_h_cov.then_some(cov),
        psd_events: st.inner.psd_events,
    }
}

/// Run the filter over `[t0, t_end]`, recording diagnostics after each
/// `record_every`-th step (and always after the last).
pub fn run_filter(
    sys: &SpectralSystem,
    obs: Option<&ObservationSeries>,
    cfg: &FilterConfig,
    stat0: StatState,
) -> Result<FilterRun> {
    cfg.validate()?;
    if cfg.mode != FilterMode::ForecastOnly {
        let series = obs.ok_or_else(|| Error::Config("this filter mode requires an observation series".into()))?;
        if series.d != sys.dim() {
            return Err(Error::Config(format!(
                "observation series is for d={} but the system has d={}",
                series.d,
                sys.dim()
            )));
        }
        cfg.check_alignment(series)?;
        if !series.covers(cfg.t0, cfg.t_end) {
            return Err(Error::ObsExhausted { t: series.t_end() });
        }
    }
    let mut st = FilterState::init(sys, stat0, cfg)?;
    let n_steps = cfg.n_steps();
    let mut records = Vec::with_capacity(n_steps / cfg.record_every + 1);
    for i in 0..n_steps {
        st.inner.t = cfg.t0 + i as f64 * cfg.tau;
        filter_step(&mut st, sys, obs, cfg)?;
        st.inner.t = cfg.t0 + (i + 1) as f64 * cfg.tau;
        if (i + 1) % cfg.record_every == 0 || i + 1 == n_steps {
            records.push(make_record(sys, &st, cfg));
        }
    }
    let psd_events = st.inner.psd_events;
    Ok(FilterRun { records, final_state: st.inner, psd_events })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use crate::spectral::{ForcingSpec, NoiseSpec};

    fn cubic_system() -> SpectralSystem {
        SpectralSystem::new(
            1,
            1,
            vec![-2.0],
            vec![0.4],
            ForcingSpec::zero(1),
            NoiseSpec::Constant { sigma: vec![0.5] },
            false,
        )
        .unwrap()
    }

    fn zero_system() -> SpectralSystem {
        SpectralSystem::new(
            1,
            1,
            vec![0.0],
            vec![0.0],
            ForcingSpec::zero(1),
            NoiseSpec::Constant { sigma: vec![0.0] },
            false,
        )
        .unwrap()
    }

    fn constant_obs(d: usize, t0: f64, delta: f64, knots: usize, stat: &StatState) -> ObservationSeries {
        let ys = vec![stat.pack(); knots];
        ObservationSeries::new(d, t0, delta, ys).unwrap()
    }

    #[test]
    fn analysis_increment_matches_straight_line_transcription() {
        // Independent re-implementation of the per-particle analysis terms
        // with materialized gain matrices, sharing the same noise draws.
        let sys = cubic_system();
        let d = 1;
        let hbar_m = DVector::from_element(1, 0.3);
        let hbar_v = DMatrix::from_element(1, 1, 0.1);
        let (gm, gv) = (0.8, 1.7);
        let ctx = GainCtx::new(&sys, hbar_m.clone(), hbar_v.clone(), gm, gv, GainVariant::EulerConsistent).unwrap();
        let z = DVector::from_element(1, 0.9);
        let y_val = StatState::new(DVector::from_element(1, 0.2), DMatrix::from_element(1, 1, 0.5)).unwrap().pack();
        let dy_m = DVector::from_element(1, 0.01);
        let dy_v = DMatrix::from_element(1, 1, -0.02);
        let (t, tau) = (0.7, 1e-2);

        let mut rng_a = rng::particle_rng(5, 0, Channel::Analysis);
        let got = analysis_increment(&ctx, &z, &dy_m, &dy_v, &y_val, t, tau, Some(&mut rng_a)).unwrap();

        // Transcription: a tau + Km/gm^2 {dy_m - (Hm + h_m) tau - gm sqrt(tau) xi}
        //                      + Kv/gv^2 {dy_v - (Hv + h_v) tau - gv sqrt(tau) Xi}.
        let mut rng_b = rng::particle_rng(5, 0, Channel::Analysis);
        let mut xi = vec![0.0; d];
        let mut bigxi = vec![0.0; d * d];
        rng::fill_standard_normal(&mut rng_b, &mut xi);
        rng::fill_symmetric_normal(&mut rng_b, d, &mut bigxi);
        let h = obs_drift(&sys, &y_val, t).unwrap();
        let hm_z = z[0] * z[0] * 0.4; // S(z) = gamma * z^2
        let hv_z = 2.0 * z[0] * hm_z; // V(z) = 2 z S(z)
        let km = 0.5 * z[0] * (hm_z - hbar_m[0]);
        let kv = (z[0] * (hv_z - hbar_v[(0, 0)])) / 3.0;
        let a = ctx.drift(&z)[0];
        let innov_m = dy_m[0] - (hm_z + h[0]) * tau - gm * tau.sqrt() * xi[0];
        let innov_v = dy_v[(0, 0)] - (hv_z + h[1]) * tau - gv * tau.sqrt() * bigxi[0];
        let expect = a * tau + km / (gm * gm) * innov_m + kv / (gv * gv) * innov_v;
        assert_relative_eq!(got[0], expect, epsilon = 1e-14, max_relative = 1e-12);
    }

    #[test]
    fn zero_innovation_and_zero_gain_leaves_only_the_drift() {
        // With the ensemble reference equal to H(z) the gains vanish at z, so
        // the increment is a*tau alone; with dy = (H+h) tau and no
        // perturbation the innovation itself is exactly zero.
        let sys = cubic_system();
        let z = DVector::from_element(1, 1.1);
        let hm_z = 0.4 * z[0] * z[0];
        let hv_z = 2.0 * z[0] * hm_z;
        let ctx = GainCtx::new(
            &sys,
            DVector::from_element(1, hm_z),
            DMatrix::from_element(1, 1, hv_z),
            1.0,
            1.0,
            GainVariant::EulerConsistent,
        )
        .unwrap();
        let y_val = StatState::new(DVector::zeros(1), DMatrix::from_element(1, 1, 0.3)).unwrap().pack();
        let tau = 1e-2;
        let h = obs_drift(&sys, &y_val, 0.0).unwrap();
        let dy_m = DVector::from_element(1, (hm_z + h[0]) * tau);
        let dy_v = DMatrix::from_element(1, 1, (hv_z + h[1]) * tau);
        let got = analysis_increment(&ctx, &z, &dy_m, &dy_v, &y_val, 0.0, tau, None).unwrap();
        let a = ctx.drift(&z)[0];
        assert_relative_eq!(got[0], a * tau, epsilon = 1e-15);
    }

    #[test]
    fn zero_system_with_constant_observations_is_stationary() {
        // Lambda = gamma = Sigma = F = 0: observables vanish identically, so
        // gains and drift are zero and the ensemble cannot move even with
        // perturbation noise switched on.
        let sys = zero_system();
        let stat0 = StatState::new(DVector::zeros(1), DMatrix::from_element(1, 1, 1.0)).unwrap();
        let obs = constant_obs(1, 0.0, 0.1, 12, &stat0);
        let cfg = FilterConfig {
            n: 64,
            tau: 0.01,
            t_end: 0.1,
            seed: 4,
            ..FilterConfig::default()
        };
        let mut st = FilterState::init(&sys, stat0.clone(), &cfg).unwrap();
        let before = st.inner.ens.data().to_vec();
        for i in 0..10 {
            st.inner.t = i as f64 * cfg.tau;
            filter_step(&mut st, &sys, Some(&obs), &cfg).unwrap();
        }
        assert_eq!(st.inner.ens.data(), &before[..]);
        assert_eq!(st.inner.stat.mean[0], 0.0);
    }

    #[test]
    fn ten_step_run_on_the_zero_system_yields_ten_constant_records() {
        // Zero covariance puts every particle exactly at the mean, so the
        // empirical relaxation feedback is exactly zero too and the run is
        // bit-constant.
        let sys = zero_system();
        let stat0 = StatState::new(DVector::from_element(1, 0.7), DMatrix::zeros(1, 1)).unwrap();
        let obs = constant_obs(1, 0.0, 0.1, 3, &stat0);
        let cfg = FilterConfig { n: 32, tau: 0.01, t_end: 0.1, seed: 1, ..FilterConfig::default() };
        let run = run_filter(&sys, Some(&obs), &cfg, stat0).unwrap();
        assert_eq!(run.records.len(), 10);
        for r in &run.records {
            assert_eq!(r.stat.mean[0], 0.7);
            assert_eq!(r.stat.cov[(0, 0)], 0.0);
        }
    }

    #[test]
    fn huge_observation_noise_reduces_a_step_to_the_forecast() {
        // Gains scale as 1/Gamma^2, the perturbation enters as 1/Gamma: at
        // Gamma = 1e8 a full step differs from the pure forecast step by less
        // than 1e-10 per particle while consuming identical dynamics draws.
        let sys = cubic_system();
        let stat0 = StatState::new(DVector::zeros(1), DMatrix::from_element(1, 1, 0.04)).unwrap();
        let obs = constant_obs(1, 0.0, 0.1, 3, &stat0);
        let cfg = FilterConfig {
            n: 256,
            tau: 1e-5,
            t_end: 0.1,
            gamma_m: 1e8,
            gamma_v: 1e8,
            seed: 8,
            ..FilterConfig::default()
        };
        let mut filtered = FilterState::init(&sys, stat0.clone(), &cfg).unwrap();
        filter_step(&mut filtered, &sys, Some(&obs), &cfg).unwrap();

        let mut forecast = ClosureState::init(&sys, stat0, cfg.n, cfg.seed, cfg.pairing, 0.0).unwrap();
        forecast
            .forecast_step(&sys, cfg.tau, &ClosureOpts { epsilon: cfg.epsilon, deterministic: true })
            .unwrap();

        let gap = filtered
            .inner
            .ens
            .data()
            .iter()
            .zip(forecast.ens.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(gap < 1e-10, "max particle gap {gap}");
        assert_relative_eq!(filtered.inner.stat.cov[(0, 0)], forecast.stat.cov[(0, 0)], epsilon = 1e-12);
    }

    #[test]
    fn same_seed_gives_bit_identical_runs() {
        let sys = cubic_system();
        let stat0 = StatState::new(DVector::zeros(1), DMatrix::from_element(1, 1, 0.2)).unwrap();
        let obs = constant_obs(1, 0.0, 0.05, 5, &stat0);
        let cfg = FilterConfig {
            n: 128,
            tau: 1e-3,
            t_end: 0.2,
            gamma_m: 2.0,
            gamma_v: 2.0,
            seed: 21,
            ..FilterConfig::default()
        };
        let a = run_filter(&sys, Some(&obs), &cfg, stat0.clone()).unwrap();
        let b = run_filter(&sys, Some(&obs), &cfg, stat0).unwrap();
        assert_eq!(a.final_state.ens.data(), b.final_state.ens.data());
        let (ra, rb) = (a.records.last().unwrap(), b.records.last().unwrap());
        assert_eq!(ra.stat.cov[(0, 0)].to_bits(), rb.stat.cov[(0, 0)].to_bits());
        assert_eq!(ra.tr_h_cov.to_bits(), rb.tr_h_cov.to_bits());
    }

    #[test]
    fn run_is_rejected_when_observations_run_out_or_misalign() {
        let sys = cubic_system();
        let stat0 = StatState::new(DVector::zeros(1), DMatrix::from_element(1, 1, 0.4)).unwrap();
        let obs = constant_obs(1, 0.0, 0.05, 3, &stat0); // covers [0, 0.1]
        let cfg = FilterConfig { n: 32, tau: 0.01, t_end: 0.5, seed: 0, ..FilterConfig::default() };
        assert!(matches!(run_filter(&sys, Some(&obs), &cfg, stat0.clone()), Err(Error::ObsExhausted { .. })));

        let cfg_bad = FilterConfig { tau: 0.03, t_end: 0.09, ..cfg.clone() };
        assert!(matches!(run_filter(&sys, Some(&obs), &cfg_bad, stat0.clone()), Err(Error::Config(_))));

        let cfg_none = FilterConfig { mode: FilterMode::Full, ..cfg };
        assert!(matches!(run_filter(&sys, None, &cfg_none, stat0), Err(Error::Config(_))));
    }

    #[test]
    fn forecast_only_mode_needs_no_observations_and_matches_the_closure_run() {
        let sys = cubic_system();
        let stat0 = StatState::new(DVector::zeros(1), DMatrix::from_element(1, 1, 0.4)).unwrap();
        let cfg = FilterConfig { n: 128, tau: 0.01, t_end: 0.2, seed: 13, mode: FilterMode::ForecastOnly, ..FilterConfig::default() };
        let run = run_filter(&sys, None, &cfg, stat0.clone()).unwrap();

        let mut plain = ClosureState::init(&sys, stat0, cfg.n, cfg.seed, cfg.pairing, 0.0).unwrap();
        let opts = ClosureOpts { epsilon: cfg.epsilon, deterministic: true };
        for i in 0..20 {
            plain.t = i as f64 * cfg.tau;
            plain.forecast_step(&sys, cfg.tau, &opts).unwrap();
        }
        assert_eq!(run.final_state.ens.data(), plain.ens.data());
        assert_eq!(run.final_state.stat.cov[(0, 0)].to_bits(), plain.stat.cov[(0, 0)].to_bits());
    }

    #[test]
    fn analysis_only_mode_keeps_statistics_frozen_but_moves_observables() {
        // Without the forecast damping the polynomial analysis terms are only
        // conditionally stable, so this runs a short window at weak coupling.
        let sys = cubic_system();
        let stat0 = StatState::new(DVector::from_element(1, 0.5), DMatrix::from_element(1, 1, 0.2)).unwrap();
        // Observations pinned at a different covariance pull the ensemble.
        let target = StatState::new(DVector::from_element(1, 0.5), DMatrix::from_element(1, 1, 0.4)).unwrap();
        let obs = constant_obs(1, 0.0, 0.05, 3, &target);
        let cfg = FilterConfig {
            n: 512,
            tau: 1e-3,
            t_end: 0.05,
            seed: 17,
            mode: FilterMode::AnalysisOnly,
            gamma_m: 3.0,
            gamma_v: 3.0,
            ..FilterConfig::default()
        };
        let run = run_filter(&sys, Some(&obs), &cfg, stat0.clone()).unwrap();
        let last = run.records.last().unwrap();
        assert_eq!(last.stat.mean[0], stat0.mean[0]);
        assert_eq!(last.stat.cov[(0, 0)], stat0.cov[(0, 0)]);
        let first = &run.records[0];
        assert!(
            (last.hbar_m[0] - first.hbar_m[0]).abs() > 1e-6,
            "analysis terms did not move the observable mean"
        );
    }
}
