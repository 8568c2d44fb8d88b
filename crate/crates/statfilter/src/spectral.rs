//! Quadratic spectral model: coefficients, derived operators, and the
//! statistical state they act on.
//!
//! A system on `R^d` is defined by a linear part `lambda` (d x d), a quadratic
//! interaction tensor `gamma` (d^3, entry `gamma[k][m][n]` couples mode `k` to
//! the product `u_m u_n`), a deterministic forcing `F(t)`, and a noise loading
//! `Sigma(t)` (d x s). Everything else the crate computes — mean drift,
//! fluctuation operator, quadratic feedbacks, observable functions — is a
//! contraction of these coefficients:
//!
//! * mean drift            `M_k(u)    = sum_p lambda[k][p] u_p + sum_{pq} gamma[k][p][q] u_p u_q`
//! * fluctuation operator  `L_kl(u)   = lambda[k][l] + sum_p u_p (gamma[k][p][l] + gamma[k][l][p])`
//! * quadratic coupling    `G_k(M)    = sum_{mn} gamma[k][m][n] M_mn`
//! * symmetric forms       `A_k       = (gamma[k] + gamma[k]^T) / 2`
//! * mean observable       `Hm_k(z)   = z^T A_k z`
//! * covariance observable `Hv_kl(z)  = (z^T A_k z) z_l + z_k (z^T A_l z)`
//!
//! `Hm` is homogeneous of degree 2 and `Hv` of degree 3 in `z`; several
//! downstream identities (gain factorization, closed-form divergences) lean on
//! exactly that, so the implementations here are kept free of any other terms.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported state dimension. Tensors are stored dense (`d^3`
/// entries), which is the right trade below this size.
pub const MAX_DIM: usize = 16;

/// Absolute tolerance for the energy-conservation identity on `gamma`.
pub const ENERGY_TOL: f64 = 1e-12;

/// Deterministic forcing `F(t)`, declarative so definition files can carry it.
#[derive(Clone, Debug, PartialEq)]
pub enum ForcingSpec {
    /// Constant-in-time vector.
    Constant { value: Vec<f64> },
    /// `base + amplitude * sin(2 pi t / period + phase)`, componentwise.
    Sinusoid { base: Vec<f64>, amplitude: Vec<f64>, period: f64, phase: f64 },
    /// Piecewise-constant on right-open segments `[times[i], times[i+1])`;
    /// the last value extends to infinity, the first backwards.
    Piecewise { times: Vec<f64>, values: Vec<Vec<f64>> },
}

impl ForcingSpec {
    /// Zero forcing of dimension `d`.
    pub fn zero(d: usize) -> Self {
        ForcingSpec::Constant { value: vec![0.0; d] }
    }

    fn validate(&self, d: usize) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        match self {
            ForcingSpec::Constant { value } => {
                if value.len() != d {
                    return fail(format!("forcing.value has {} entries, expected d = {}", value.len(), d));
                }
            }
            ForcingSpec::Sinusoid { base, amplitude, period, .. } => {
                if base.len() != d || amplitude.len() != d {
                    return fail(format!(
                        "forcing base/amplitude have {}/{} entries, expected d = {}",
                        base.len(),
                        amplitude.len(),
                        d
                    ));
                }
                if !(*period > 0.0) {
                    return fail(format!("forcing.period must be positive, got {period}"));
                }
            }
            ForcingSpec::Piecewise { times, values } => {
                if times.is_empty() || times.len() != values.len() {
                    return fail(format!(
                        "forcing.times ({}) and forcing.values ({}) must be equal-length and non-empty",
                        times.len(),
                        values.len()
                    ));
                }
                if !times.windows(2).all(|w| w[0] < w[1]) {
                    return fail("forcing.times must be strictly increasing".into());
                }
                if values.iter().any(|v| v.len() != d) {
                    return fail(format!("every forcing.values entry must have d = {d} components"));
                }
            }
        }
        if !self.is_finite() {
            return fail("forcing contains non-finite entries".into());
        }
        Ok(())
    }

    fn is_finite(&self) -> bool {
        match self {
            ForcingSpec::Constant { value } => value.iter().all(|x| x.is_finite()),
            ForcingSpec::Sinusoid { base, amplitude, period, phase } => {
                base.iter().chain(amplitude).all(|x| x.is_finite()) && period.is_finite() && phase.is_finite()
            }
            ForcingSpec::Piecewise { times, values } => {
                times.iter().all(|x| x.is_finite()) && values.iter().flatten().all(|x| x.is_finite())
            }
        }
    }

    /// Evaluate at time `t`.
    pub fn eval(&self, t: f64) -> DVector<f64> {
        match self {
            ForcingSpec::Constant { value } => DVector::from_column_slice(value),
            ForcingSpec::Sinusoid { base, amplitude, period, phase } => {
                let s = (2.0 * std::f64::consts::PI * t / period + phase).sin();
                DVector::from_iterator(base.len(), base.iter().zip(amplitude).map(|(b, a)| b + a * s))
            }
            ForcingSpec::Piecewise { times, values } => {
                // Right-open segments: value i applies on [times[i], times[i+1]).
                let idx = match times.iter().position(|&tk| t < tk) {
                    Some(0) => 0,
                    Some(i) => i - 1,
                    None => times.len() - 1,
                };
                DVector::from_column_slice(&values[idx])
            }
        }
    }
}

/// Noise loading `Sigma(t)`, a `d x s` matrix stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub enum NoiseSpec {
    /// Constant loading.
    Constant { sigma: Vec<f64> },
    /// `sigma(t) = base * (1 + amplitude_scale * sin(2 pi t / period + phase))`.
    Sinusoid { base: Vec<f64>, amplitude_scale: f64, period: f64, phase: f64 },
}

impl NoiseSpec {
    /// Constant isotropic loading `sigma * I` with `s = d`.
    pub fn isotropic(d: usize, sigma: f64) -> Self {
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            m[i * d + i] = sigma;
        }
        NoiseSpec::Constant { sigma: m }
    }

    fn validate(&self, d: usize, s: usize) -> Result<()> {
        let check_len = |v: &Vec<f64>| -> Result<()> {
            if v.len() != d * s {
                return Err(Error::Config(format!(
                    "noise.sigma has {} entries, expected d*s = {}",
                    v.len(),
                    d * s
                )));
            }
            if !v.iter().all(|x| x.is_finite()) {
                return Err(Error::Config("noise.sigma contains non-finite entries".into()));
            }
            Ok(())
        };
        match self {
            NoiseSpec::Constant { sigma } => check_len(sigma),
            NoiseSpec::Sinusoid { base, amplitude_scale, period, phase } => {
                check_len(base)?;
                if !(*period > 0.0) {
                    return Err(Error::Config(format!("noise.period must be positive, got {period}")));
                }
                if !amplitude_scale.is_finite() || !phase.is_finite() {
                    return Err(Error::Config("noise modulation parameters must be finite".into()));
                }
                Ok(())
            }
        }
    }

    /// Evaluate the `d x s` loading at time `t`.
    pub fn eval(&self, d: usize, s: usize, t: f64) -> DMatrix<f64> {
        match self {
            NoiseSpec::Constant { sigma } => DMatrix::from_row_slice(d, s, sigma),
            NoiseSpec::Sinusoid { base, amplitude_scale, period, phase } => {
                let f = 1.0 + amplitude_scale * (2.0 * std::f64::consts::PI * t / period + phase).sin();
                DMatrix::from_row_slice(d, s, base) * f
            }
        }
    }
}

/// A fully validated quadratic spectral system.
#[derive(Clone, Debug)]
pub struct SpectralSystem {
    d: usize,
    s: usize,
    lambda: DMatrix<f64>,
    /// Dense interaction tensor, index `(k*d + m)*d + n`.
    gamma: Vec<f64>,
    forcing: ForcingSpec,
    noise: NoiseSpec,
    energy_conserving: bool,
    /// Cached symmetric forms `A_k` of the observables.
    sym_forms: Vec<DMatrix<f64>>,
}

impl SpectralSystem {
    /// Build and validate a system. `lambda` is `d x d` row-major, `gamma` is
    /// `d^3` with leading (output) index slowest. When `energy_conserving` is
    /// set, the fully symmetrized tensor must vanish so the quadratic part
    /// moves no energy: `sum_k z_k (z^T A_k z) = 0` for all `z`.
    pub fn new(
        d: usize,
        s: usize,
        lambda: Vec<f64>,
        gamma: Vec<f64>,
        forcing: ForcingSpec,
        noise: NoiseSpec,
        energy_conserving: bool,
    ) -> Result<Self> {
        if d == 0 || d > MAX_DIM {
            return Err(Error::Config(format!("d must be in 1..={MAX_DIM}, got {d}")));
        }
        if s == 0 || s > MAX_DIM {
            return Err(Error::Config(format!("s must be in 1..={MAX_DIM}, got {s}")));
        }
        if lambda.len() != d * d {
            return Err(Error::Config(format!("lambda has {} entries, expected d*d = {}", lambda.len(), d * d)));
        }
        if gamma.len() != d * d * d {
            return Err(Error::Config(format!("gamma has {} entries, expected d^3 = {}", gamma.len(), d * d * d)));
        }
        if !lambda.iter().chain(gamma.iter()).all(|x| x.is_finite()) {
            return Err(Error::Config("lambda/gamma contain non-finite entries".into()));
        }
        forcing.validate(d)?;
        noise.validate(d, s)?;

        let sys = SpectralSystem {
            d,
            s,
            lambda: DMatrix::from_row_slice(d, d, &lambda),
            gamma,
            forcing,
            noise,
            energy_conserving,
            sym_forms: Vec::new(),
        };
        let sys = SpectralSystem { sym_forms: sys.build_sym_forms(), ..sys };

        if energy_conserving {
            sys.check_energy_conservation()?;
        }
        Ok(sys)
    }

    fn build_sym_forms(&self) -> Vec<DMatrix<f64>> {
        let d = self.d;
        (0..d)
            .map(|k| {
                DMatrix::from_fn(d, d, |m, n| 0.5 * (self.gamma_at(k, m, n) + self.gamma_at(k, n, m)))
            })
            .collect()
    }

    /// The cyclic sum of the (last-two-index) symmetrized tensor equals half
    /// the full six-permutation symmetrization, so its vanishing is exactly
    /// the energy identity.
    fn check_energy_conservation(&self) -> Result<()> {
        let d = self.d;
        for k in 0..d {
            for m in 0..d {
                for n in 0..d {
                    let c = self.sym_forms[k][(m, n)] + self.sym_forms[m][(n, k)] + self.sym_forms[n][(k, m)];
                    if c.abs() > ENERGY_TOL {
                        return Err(Error::Config(format!(
                            "gamma is not energy-conserving: symmetrized cyclic sum at (k,m,n)=({k},{m},{n}) is {c:e}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Linear part of the drift.
    pub fn linear_part(&self) -> &DMatrix<f64> {
        &self.lambda
    }

    /// State dimension `d`.
    pub fn dim(&self) -> usize {
        self.d
    }

    /// Noise dimension `s`.
    pub fn noise_dim(&self) -> usize {
        self.s
    }

    /// Observation dimension `p = d + d^2` (mean block then packed covariance).
    pub fn obs_dim(&self) -> usize {
        self.d + self.d * self.d
    }

    /// Linear part of the drift.
    pub fn lambda(&self) -> &DMatrix<f64> {
        &self.lambda
    }

    /// Raw tensor entry `gamma[k][m][n]`.
    pub fn gamma_at(&self, k: usize, m: usize, n: usize) -> f64 {
        self.gamma[(k * self.d + m) * self.d + n]
    }

    /// Dense tensor storage (index `(k*d + m)*d + n`).
    pub fn gamma_raw(&self) -> &[f64] {
        &self.gamma
    }

    /// Whether the quadratic part was declared (and verified) energy-conserving.
    pub fn energy_conserving(&self) -> bool {
        self.energy_conserving
    }

    /// Forcing specification.
    pub fn forcing(&self) -> &ForcingSpec {
        &self.forcing
    }

    /// Noise specification.
    pub fn noise(&self) -> &NoiseSpec {
        &self.noise
    }

    /// Forcing vector `F(t)`.
    pub fn forcing_at(&self, t: f64) -> DVector<f64> {
        self.forcing.eval(t)
    }

    /// Noise loading `Sigma(t)`, `d x s`.
    pub fn noise_at(&self, t: f64) -> DMatrix<f64> {
        self.noise.eval(self.d, self.s, t)
    }

    /// Noise covariance `Sigma(t) Sigma(t)^T`, `d x d`.
    pub fn noise_cov_at(&self, t: f64) -> DMatrix<f64> {
        let sig = self.noise_at(t);
        &sig * sig.transpose()
    }

    /// Symmetric form `A_k` of the degree-2 observable.
    pub fn sym_form(&self, k: usize) -> &DMatrix<f64> {
        &self.sym_forms[k]
    }

    /// Mean drift `M(u)` (forcing not included; callers add `F(t)`).
    pub fn mean_drift(&self, u: &DVector<f64>) -> DVector<f64> {
        let mut out = &self.lambda * u;
        for k in 0..self.d {
            out[k] += self.quad_form(k, u.as_slice());
        }
        out
    }

    /// Fluctuation operator `L(u) = lambda + sum_p u_p (gamma[.,p,.] + gamma[.,.,p])`.
    pub fn fluct_operator(&self, u: &DVector<f64>) -> DMatrix<f64> {
        let d = self.d;
        let mut out = self.lambda.clone();
        for k in 0..d {
            for l in 0..d {
                let mut acc = 0.0;
                for p in 0..d {
                    acc += u[p] * (self.gamma_at(k, p, l) + self.gamma_at(k, l, p));
                }
                out[(k, l)] += acc;
            }
        }
        out
    }

    /// Quadratic coupling `G(M)_k = sum_{mn} gamma[k][m][n] M_mn`.
    pub fn quad_coupling(&self, m: &DMatrix<f64>) -> DVector<f64> {
        let d = self.d;
        DVector::from_fn(d, |k, _| {
            let mut acc = 0.0;
            for a in 0..d {
                for b in 0..d {
                    acc += self.gamma_at(k, a, b) * m[(a, b)];
                }
            }
            acc
        })
    }

    /// `z^T A_k z` for a single `k` (equals `sum_{mn} gamma[k][m][n] z_m z_n`).
    fn quad_form(&self, k: usize, z: &[f64]) -> f64 {
        let d = self.d;
        let base = k * d * d;
        let mut acc = 0.0;
        for m in 0..d {
            let zm = z[m];
            let row = base + m * d;
            for n in 0..d {
                acc += self.gamma[row + n] * zm * z[n];
            }
        }
        acc
    }

    /// Degree-2 observable `Hm(z)`, written into `out` (length `d`).
    pub fn obs_mean_into(&self, z: &[f64], out: &mut [f64]) {
        debug_assert_eq!(z.len(), self.d);
        debug_assert_eq!(out.len(), self.d);
        for k in 0..self.d {
            out[k] = self.quad_form(k, z);
        }
    }

    /// Degree-2 observable `Hm(z)` as a vector.
    pub fn obs_mean(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.d);
        self.obs_mean_into(z.as_slice(), out.as_mut_slice());
        out
    }

    /// Degree-3 observable `Hv(z)` given precomputed `hm = Hm(z)`, written
    /// row-major into `out` (length `d^2`): `Hv_kl = hm_k z_l + z_k hm_l`.
    pub fn obs_cov_into(&self, z: &[f64], hm: &[f64], out: &mut [f64]) {
        let d = self.d;
        debug_assert_eq!(out.len(), d * d);
        for k in 0..d {
            for l in 0..d {
                out[k * d + l] = hm[k] * z[l] + z[k] * hm[l];
            }
        }
    }

    /// Degree-3 observable `Hv(z)` as a (symmetric) matrix.
    pub fn obs_cov(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let hm = self.obs_mean(z);
        let d = self.d;
        DMatrix::from_fn(d, d, |k, l| hm[k] * z[l] + z[k] * hm[l])
    }

    /// `(A_k z)_j` for all `k, j`, written into `out` (length `d^2`, index
    /// `k*d + j`). Shared precomputation for gain gradients.
    pub fn sym_form_apply_into(&self, z: &[f64], out: &mut [f64]) {
        let d = self.d;
        debug_assert_eq!(out.len(), d * d);
        for k in 0..d {
            let a = &self.sym_forms[k];
            for j in 0..d {
                let mut acc = 0.0;
                for m in 0..d {
                    acc += a[(j, m)] * z[m];
                }
                out[k * d + j] = acc;
            }
        }
    }
}

/// Mean and covariance of the resolved statistical state.
#[derive(Clone, Debug, PartialEq)]
pub struct StatState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl StatState {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let st = StatState { mean, cov };
        st.validate()?;
        Ok(st)
    }

    /// Dimension `d`.
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Check shapes, finiteness, and symmetry (relative tolerance 1e-9).
    pub fn validate(&self) -> Result<()> {
        let d = self.mean.len();
        if self.cov.nrows() != d || self.cov.ncols() != d {
            return Err(Error::Config(format!(
                "covariance is {}x{}, expected {d}x{d}",
                self.cov.nrows(),
                self.cov.ncols()
            )));
        }
        if !self.mean.iter().all(|x| x.is_finite()) || !self.cov.iter().all(|x| x.is_finite()) {
            return Err(Error::Config("statistical state contains non-finite entries".into()));
        }
        let scale = self.cov.iter().fold(1.0f64, |a, &x| a.max(x.abs()));
        for i in 0..d {
            for j in (i + 1)..d {
                if (self.cov[(i, j)] - self.cov[(j, i)]).abs() > 1e-9 * scale {
                    return Err(Error::Config(format!(
                        "covariance is not symmetric at ({i},{j}): {} vs {}",
                        self.cov[(i, j)],
                        self.cov[(j, i)]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Pack as `[mean | cov row-major]`, the layout shared by observation
    /// vectors and CSV columns.
    pub fn pack(&self) -> DVector<f64> {
        let d = self.mean.len();
        let mut out = DVector::zeros(d + d * d);
        out.rows_mut(0, d).copy_from(&self.mean);
        for i in 0..d {
            for j in 0..d {
                out[d + i * d + j] = self.cov[(i, j)];
            }
        }
        out
    }

    /// Inverse of [`StatState::pack`].
    pub fn unpack(y: &DVector<f64>, d: usize) -> Result<Self> {
        if y.len() != d + d * d {
            return Err(Error::Config(format!(
                "packed state has {} entries, expected d + d^2 = {}",
                y.len(),
                d + d * d
            )));
        }
        let mean = DVector::from_fn(d, |i, _| y[i]);
        let cov = DMatrix::from_fn(d, d, |i, j| y[d + i * d + j]);
        Ok(StatState { mean, cov })
    }

    /// Symmetrize, then clamp negative eigenvalues to zero if any are present.
    /// Returns `true` when clamping actually happened.
    pub fn psd_project(&mut self) -> bool {
        let sym = (&self.cov + self.cov.transpose()) * 0.5;
        self.cov = sym.clone();
        let eig = nalgebra::SymmetricEigen::new(sym);
        if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
            return false;
        }
        let clamped = DVector::from_iterator(self.mean.len(), eig.eigenvalues.iter().map(|&l| l.max(0.0)));
        let q = &eig.eigenvectors;
        self.cov = q * DMatrix::from_diagonal(&clamped) * q.transpose();
        // Re-symmetrize to scrub round-off from the reconstruction.
        self.cov = (&self.cov + self.cov.transpose()) * 0.5;
        true
    }
}

// ---------------------------------------------------------------------------
// System definition files (TOML).
// ---------------------------------------------------------------------------

/// Serialized form of a system definition file.
///
/// ```toml
/// d = 3
/// s = 3
/// lambda = [ ... ]   # d*d, row-major
/// gamma = [ ... ]    # d^3, leading (output) index slowest
/// energy_conserving = true
///
/// [forcing]
/// kind = "constant"
/// value = [0.0, 0.0, 0.0]
///
/// [noise]
/// kind = "constant"
/// sigma = [ ... ]    # d*s, row-major
/// ```
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemFile {
    d: usize,
    s: usize,
    lambda: Vec<f64>,
    gamma: Vec<f64>,
    #[serde(default)]
    energy_conserving: bool,
    forcing: ForcingFile,
    noise: NoiseFile,
}

/// Flat on-disk forcing table: `kind` selects the variant and the remaining
/// keys are checked per kind. Kept flat (no serde enum tagging) so type
/// errors point at the exact key and line instead of the whole table.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ForcingFile {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    value: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    base: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    amplitude: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    period: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    phase: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    times: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    values: Option<Vec<Vec<f64>>>,
}

fn need<T>(x: Option<T>, table: &str, key: &str, kind: &str) -> Result<T> {
    x.ok_or_else(|| Error::Config(format!("{table}.{key} is required when {table}.kind = \"{kind}\"")))
}

impl ForcingFile {
    fn into_spec(self) -> Result<ForcingSpec> {
        match self.kind.as_str() {
            "constant" => Ok(ForcingSpec::Constant { value: need(self.value, "forcing", "value", "constant")? }),
            "sinusoid" => Ok(ForcingSpec::Sinusoid {
                base: need(self.base, "forcing", "base", "sinusoid")?,
                amplitude: need(self.amplitude, "forcing", "amplitude", "sinusoid")?,
                period: need(self.period, "forcing", "period", "sinusoid")?,
                phase: self.phase.unwrap_or(0.0),
            }),
            "piecewise" => Ok(ForcingSpec::Piecewise {
                times: need(self.times, "forcing", "times", "piecewise")?,
                values: need(self.values, "forcing", "values", "piecewise")?,
            }),
            other => Err(Error::Config(format!(
                "unknown forcing.kind \"{other}\" (expected constant, sinusoid, or piecewise)"
            ))),
        }
    }

    fn from_spec(spec: &ForcingSpec) -> Self {
        let empty = ForcingFile {
            kind: String::new(),
            value: None,
            base: None,
            amplitude: None,
            period: None,
            phase: None,
            times: None,
            values: None,
        };
        match spec {
            ForcingSpec::Constant { value } => {
                ForcingFile { kind: "constant".into(), value: Some(value.clone()), ..empty }
            }
            ForcingSpec::Sinusoid { base, amplitude, period, phase } => ForcingFile {
                kind: "sinusoid".into(),
                base: Some(base.clone()),
                amplitude: Some(amplitude.clone()),
                period: Some(*period),
                phase: Some(*phase),
                ..empty
            },
            ForcingSpec::Piecewise { times, values } => ForcingFile {
                kind: "piecewise".into(),
                times: Some(times.clone()),
                values: Some(values.clone()),
                ..empty
            },
        }
    }
}

/// Flat on-disk noise table; see [`ForcingFile`] for why it is not an enum.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NoiseFile {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    base: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    amplitude_scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    period: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    phase: Option<f64>,
}

impl NoiseFile {
    fn into_spec(self) -> Result<NoiseSpec> {
        match self.kind.as_str() {
            "constant" => Ok(NoiseSpec::Constant { sigma: need(self.sigma, "noise", "sigma", "constant")? }),
            "sinusoid" => Ok(NoiseSpec::Sinusoid {
                base: need(self.base, "noise", "base", "sinusoid")?,
                amplitude_scale: need(self.amplitude_scale, "noise", "amplitude_scale", "sinusoid")?,
                period: need(self.period, "noise", "period", "sinusoid")?,
                phase: self.phase.unwrap_or(0.0),
            }),
            other => Err(Error::Config(format!(
                "unknown noise.kind \"{other}\" (expected constant or sinusoid)"
            ))),
        }
    }

    fn from_spec(spec: &NoiseSpec) -> Self {
        let empty =
            NoiseFile { kind: String::new(), sigma: None, base: None, amplitude_scale: None, period: None, phase: None };
        match spec {
            NoiseSpec::Constant { sigma } => NoiseFile { kind: "constant".into(), sigma: Some(sigma.clone()), ..empty },
            NoiseSpec::Sinusoid { base, amplitude_scale, period, phase } => NoiseFile {
                kind: "sinusoid".into(),
                base: Some(base.clone()),
                amplitude_scale: Some(*amplitude_scale),
                period: Some(*period),
                phase: Some(*phase),
                ..empty
            },
        }
    }
}

/// Deserialize TOML text into any schema type, reporting failures with the
/// offending key path and line. `origin` names the source in errors.
pub(crate) fn parse_toml<T: serde::de::DeserializeOwned>(text: &str, origin: &str) -> Result<T> {
    let de = toml::de::Deserializer::new(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let line = e
            .inner()
            .span()
            .map(|sp| text[..sp.start.min(text.len())].matches('\n').count() + 1);
        let at = match line {
            Some(l) => format!(" (key `{path}`, line {l})"),
            None => format!(" (key `{path}`)"),
        };
        Error::Parse { path: origin.to_string(), detail: format!("{}{}", e.inner().message(), at) }
    })
}

/// Parse a system from TOML text. `origin` names the source in errors.
pub fn parse_system(text: &str, origin: &str) -> Result<SpectralSystem> {
    let file: SystemFile = parse_toml(text, origin)?;
    SpectralSystem::new(
        file.d,
        file.s,
        file.lambda,
        file.gamma,
        file.forcing.into_spec()?,
        file.noise.into_spec()?,
        file.energy_conserving,
    )
}

/// Load a system definition from a TOML file.
pub fn load_system(path: &std::path::Path) -> Result<SpectralSystem> {
    let text = std::fs::read_to_string(path)?;
    parse_system(&text, &path.display().to_string())
}

/// Serialize a system back to TOML (inverse of [`load_system`] up to float
/// formatting).
pub fn system_to_toml(sys: &SpectralSystem) -> String {
    let file = SystemFile {
        d: sys.d,
        s: sys.s,
        lambda: sys.lambda.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect(),
        gamma: sys.gamma.clone(),
        energy_conserving: sys.energy_conserving,
        forcing: ForcingFile::from_spec(&sys.forcing),
        noise: NoiseFile::from_spec(&sys.noise),
    };
    toml::to_string(&file).expect("system serialization cannot fail")
}

/// Write a system definition file.
pub fn save_system(sys: &SpectralSystem, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, system_to_toml(sys))?;
    Ok(())
}
