//! Observation paths of the resolved statistics.
//!
//! An observation series is a uniformly spaced path `y_0.., y_M` of the packed
//! statistics vector `[mean | cov row-major]` (dimension `d + d^2`). Between
//! knots the path is interpolated linearly, so its derivative is piecewise
//! constant on right-open windows `[t_n, t_{n+1})` — the form consumed by the
//! filter, which differences the path over its own step windows.
//!
//! Synthesis supports two modes:
//! * `Direct` — each knot is the truth statistics plus independent noise of
//!   standard deviation `gamma * sqrt(delta)` per channel;
//! * `Sde` — the path solves the observation equation
//!   `dy = [q(t) + h(y)] dt + gamma sqrt(delta) xi` by one Euler step per
//!   knot, with the unresolved drift `q` read from the truth cloud and
//!   `y_0` set to the exact initial statistics.
//!
//! Covariance-block noise is drawn symmetric (independent upper triangle,
//! mirrored), so knots remain valid packed statistics.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, SLOT_OBS};
use crate::spectral::{SpectralSystem, StatState};
use crate::truth::TruthPath;

/// How synthetic observations are generated from a truth run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsMode {
    Direct,
    Sde,
}

/// Uniformly spaced observation path of the packed statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSeries {
    pub d: usize,
    pub t0: f64,
    pub delta: f64,
    pub ys: Vec<DVector<f64>>,
}

impl ObservationSeries {
    pub fn new(d: usize, t0: f64, delta: f64, ys: Vec<DVector<f64>>) -> Result<Self> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::Config(format!("observation spacing must be positive, got {delta}")));
        }
        if ys.len() < 2 {
            return Err(Error::Config(format!("an observation series needs at least 2 knots, got {}", ys.len())));
        }
        let p = d + d * d;
        if let Some(bad) = ys.iter().position(|y| y.len() != p) {
            return Err(Error::Config(format!(
                "observation {bad} has dimension {} but the series is for d={d} (expected {p})",
                ys[bad].len()
            )));
        }
        Ok(ObservationSeries { d, t0, delta, ys })
    }

    /// Packed observation dimension `d + d^2`.
    pub fn obs_dim(&self) -> usize {
        self.d + self.d * self.d
    }

    pub fn n_knots(&self) -> usize {
        self.ys.len()
    }

    pub fn t_end(&self) -> f64 {
        self.t0 + (self.ys.len() - 1) as f64 * self.delta
    }

    pub fn knot(&self, i: usize) -> (f64, &DVector<f64>) {
        (self.t0 + i as f64 * self.delta, &self.ys[i])
    }

    /// Whether the series covers `[a, b]` (with a small grid-relative slack).
    pub fn covers(&self, a: f64, b: f64) -> bool {
        let tol = 1e-9 * self.delta.max(1.0);
        a >= self.t0 - tol && b <= self.t_end() + tol
    }

    /// Window index of `t`: windows are right-open, with a 1e-9 (in window
    /// units) guard so times that round just below a knot land on it.
    fn window(&self, t: f64) -> Result<usize> {
        let u = (t - self.t0) / self.delta;
        let max = (self.ys.len() - 1) as f64;
        if u < -1e-9 || u > max + 1e-9 {
            return Err(Error::OutOfRange { t, t0: self.t0, t1: self.t_end() });
        }
        let n = (u + 1e-9).floor().max(0.0) as usize;
        Ok(n.min(self.ys.len() - 2))
    }

    /// Piecewise-linear value at `t`.
    pub fn value(&self, t: f64) -> Result<DVector<f64>> {
        let n = self.window(t)?;
        let theta = ((t - self.t0) / self.delta - n as f64).clamp(0.0, 1.0);
        Ok(&self.ys[n] * (1.0 - theta) + &self.ys[n + 1] * theta)
    }

    /// Piecewise-constant derivative on the window containing `t`.
    pub fn derivative(&self, t: f64) -> Result<DVector<f64>> {
        let n = self.window(t)?;
        Ok((&self.ys[n + 1] - &self.ys[n]) / self.delta)
    }
}

/// Observation drift `h(y) = (M(y_m) + F(t), L(y_m) R_y + R_y L(y_m)^T + Sigma Sigma^T)`
/// evaluated at a packed statistics vector.
pub fn obs_drift(sys: &SpectralSystem, y: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
    let st = StatState::unpack(y, sys.dim())?;
    let hm = sys.mean_drift(&st.mean) + sys.forcing_at(t);
    let lmat = sys.fluct_operator(&st.mean);
    let mut hv = &lmat * &st.cov;
    hv += hv.transpose();
    hv += sys.noise_cov_at(t);
    Ok(StatState { mean: hm, cov: hv }.pack())
}

/// Synthesize an observation series over the full extent of a truth path.
/// The path's record grid must contain every observation knot.
pub fn synthesize(
    sys: &SpectralSystem,
    path: &TruthPath,
    mode: ObsMode,
    delta: f64,
    gamma_m: f64,
    gamma_v: f64,
    seed: u64,
) -> Result<ObservationSeries> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::Config(format!("observation spacing must be positive, got {delta}")));
    }
    if gamma_m < 0.0 || gamma_v < 0.0 || !gamma_m.is_finite() || !gamma_v.is_finite() {
        return Err(Error::Config(format!(
            "observation noise levels must be nonnegative, got gamma_m={gamma_m} gamma_v={gamma_v}"
        )));
    }
    let d = path.d;
    let t0 = path.t0();
    let m = ((path.t_end() - t0) / delta + 1e-9).floor() as usize;
    if m < 1 {
        return Err(Error::InsufficientPath { needed: t0 + delta, have: path.t_end() });
    }

    let mut rng = rng::reserved_rng(seed, SLOT_OBS);
    let mut mean_noise = vec![0.0; d];
    let mut cov_noise = vec![0.0; d * d];
    let sqrt_delta = delta.sqrt();
    let mut draw_noise = |y: &mut DVector<f64>| {
        rng::fill_standard_normal(&mut rng, &mut mean_noise);
        rng::fill_symmetric_normal(&mut rng, d, &mut cov_noise);
        for k in 0..d {
            y[k] += gamma_m * sqrt_delta * mean_noise[k];
        }
        for i in 0..d * d {
            y[d + i] += gamma_v * sqrt_delta * cov_noise[i];
        }
    };

    let mut ys = Vec::with_capacity(m + 1);
    match mode {
        ObsMode::Direct => {
            for n in 0..=m {
                let rec = path.at_time(t0 + n as f64 * delta)?;
                let mut y = rec.stat.pack();
                draw_noise(&mut y);
                ys.push(y);
            }
        }
        ObsMode::Sde => {
            let mut y = path.at_time(t0)?.stat.pack();
            ys.push(y.clone());
            for n in 0..m {
                let t = t0 + n as f64 * delta;
                let rec = path.at_time(t)?;
                let q = StatState { mean: rec.qm.clone(), cov: rec.qv.clone() }.pack();
                let h = obs_drift(sys, &y, t)?;
                y += (h + q) * delta;
                draw_noise(&mut y);
                ys.push(y.clone());
            }
        }
    }
    ObservationSeries::new(d, t0, delta, ys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use crate::ensemble::InitPairing;
    use crate::spectral::{ForcingSpec, NoiseSpec};
    use crate::truth::{run_truth, TruthConfig};

    fn ou_system() -> SpectralSystem {
        SpectralSystem::new(
            1,
            1,
            vec![-1.0],
            vec![0.0],
            ForcingSpec::Constant { value: vec![0.5] },
            NoiseSpec::Constant { sigma: vec![std::f64::consts::SQRT_2] },
            false,
        )
        .unwrap()
    }

    fn short_truth(t_end: f64, tau: f64, record_every: usize) -> crate::truth::TruthRun {
        let sys = ou_system();
        let stat0 = StatState::new(DVector::from_element(1, 1.0), DMatrix::from_element(1, 1, 0.5)).unwrap();
        let cfg = TruthConfig {
            n: 2048,
            tau,
            t_end,
            record_every,
            seed: 5,
            pairing: InitPairing::Antithetic,
            ..TruthConfig::default()
        };
        run_truth(&sys, stat0, &cfg).unwrap()
    }

    #[test]
    fn direct_noise_has_the_advertised_variance() {
        let run = short_truth(10.0, 1e-2, 5);
        let sys = ou_system();
        let (gm, gv, delta) = (0.3, 0.2, 0.05);
        let series = synthesize(&sys, &run.path, ObsMode::Direct, delta, gm, gv, 99).unwrap();
        let mut dev_m = Vec::new();
        let mut dev_v = Vec::new();
        for i in 0..series.n_knots() {
            let (t, y) = series.knot(i);
            let rec = run.path.at_time(t).unwrap();
            dev_m.push(y[0] - rec.stat.mean[0]);
            dev_v.push(y[1] - rec.stat.cov[(0, 0)]);
        }
        let var = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        let n = dev_m.len() as f64;
        let tol = 4.0 * (2.0 / n).sqrt(); // relative sampling error of a variance estimate
        assert_relative_eq!(var(&dev_m), gm * gm * delta, max_relative = tol);
        assert_relative_eq!(var(&dev_v), gv * gv * delta, max_relative = tol);
    }

    #[test]
    fn covariance_block_noise_is_symmetric() {
        let sys = SpectralSystem::new(
            2,
            2,
            vec![-1.0, 0.0, 0.0, -2.0],
            vec![0.0; 8],
            ForcingSpec::zero(2),
            NoiseSpec::isotropic(2, 1.0),
            false,
        )
        .unwrap();
        let stat0 = StatState::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let cfg = TruthConfig { n: 512, tau: 1e-2, t_end: 0.5, record_every: 5, ..TruthConfig::default() };
        let run = run_truth(&sys, stat0, &cfg).unwrap();
        let series = synthesize(&sys, &run.path, ObsMode::Direct, 0.05, 0.1, 0.4, 3).unwrap();
        for i in 0..series.n_knots() {
            let (_, y) = series.knot(i);
            // Packed covariance block is row-major: entry (k,l) at d + k*d + l.
            assert_eq!(y[2 + 1].to_bits(), y[2 + 2].to_bits(), "knot {i} not symmetric");
        }
    }

    #[test]
    fn sde_mode_without_noise_tracks_the_statistics() {
        // With gamma = 0 the observation path Euler-integrates the same moment
        // equations as the truth, so it stays O(delta) close to it.
        let run = short_truth(2.0, 1e-3, 10);
        let sys = ou_system();
        let series = synthesize(&sys, &run.path, ObsMode::Sde, 0.01, 0.0, 0.0, 1).unwrap();
        let (t_last, y_last) = series.knot(series.n_knots() - 1);
        let rec = run.path.at_time(t_last).unwrap();
        assert_relative_eq!(y_last[0], rec.stat.mean[0], max_relative = 2e-2);
        assert_relative_eq!(y_last[1], rec.stat.cov[(0, 0)], max_relative = 2e-2);
        // The initial knot is exact by construction.
        let (_, y0) = series.knot(0);
        assert_eq!(y0[0].to_bits(), run.path.records[0].stat.mean[0].to_bits());
    }

    #[test]
    fn interpolation_respects_windows_and_bounds() {
        let ys = vec![
            DVector::from_vec(vec![0.0, 1.0]),
            DVector::from_vec(vec![2.0, 1.0]),
            DVector::from_vec(vec![2.0, 5.0]),
        ];
        let s = ObservationSeries::new(1, 1.0, 0.5, ys).unwrap();
        assert_relative_eq!(s.value(1.25).unwrap()[0], 1.0);
        assert_relative_eq!(s.derivative(1.25).unwrap()[0], 4.0);
        // Right-open windows: the middle knot belongs to the second window.
        assert_relative_eq!(s.derivative(1.5).unwrap()[1], 8.0);
        // A shade below a knot (rounding residue) still lands on the knot.
        assert_relative_eq!(s.derivative(1.5 - 1e-12).unwrap()[1], 8.0);
        // The final time is usable and clamps to the last window.
        assert_relative_eq!(s.value(2.0).unwrap()[1], 5.0);
        assert!(matches!(s.value(2.1), Err(Error::OutOfRange { .. })));
        assert!(matches!(s.value(0.6), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn too_short_a_path_is_rejected() {
        let run = short_truth(0.1, 1e-2, 1);
        let sys = ou_system();
        let err = synthesize(&sys, &run.path, ObsMode::Direct, 0.5, 0.1, 0.1, 0).unwrap_err();
        assert!(matches!(err, Error::InsufficientPath { .. }));
    }

    proptest! {
        #[test]
        fn derivative_integrates_back_to_the_knots(
            vals in proptest::collection::vec(-10.0f64..10.0, 3..8),
            delta in 0.01f64..2.0,
            t0 in -5.0f64..5.0,
        ) {
            let ys: Vec<DVector<f64>> = vals.iter().map(|&v| DVector::from_vec(vec![v, -v])).collect();
            let s = ObservationSeries::new(1, t0, delta, ys).unwrap();
            for n in 0..s.n_knots() - 1 {
                let mid = t0 + (n as f64 + 0.5) * delta;
                let lhs = s.value(s.knot(n).0).unwrap() + s.derivative(mid).unwrap() * delta;
                let rhs = &s.ys[n + 1];
                for k in 0..2 {
                    prop_assert!((lhs[k] - rhs[k]).abs() <= 1e-9 * (1.0 + rhs[k].abs()));
                }
            }
        }
    }
}
