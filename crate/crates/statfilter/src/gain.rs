//! Nonlinear ensemble gains for mean and covariance observations.
//!
//! For a particle `z`, write `S_k(z) = z^T A_k z` (the quadratic observables,
//! degree 2) and `V_kl(z) = S_k z_l + z_k S_l` (the covariance observables,
//! degree 3). Given channel references `hbar_m = E[S]` and `hbar_v = E[V]`,
//! the unscaled gains are
//!
//! * mean channel:      `Km_{j,k} = 1/2 z_j (S_k - hbar_m_k)`
//! * covariance channel, `EulerConsistent` (default):
//!                      `Kv_{j,kl} = 1/3 z_j (V_kl - hbar_v_kl)`
//! * covariance channel, `Printed`:
//!                      `Kv_{j,kl} = 1/3 (z_j V_kl - hbar_v_kl)`
//!
//! The full gain divides by the squared channel noise level. The
//! Euler-consistent form satisfies the exact factorization
//! `sum_j K_{j,a} dH_b/dz_j = (H_a - hbar_a) H_b` within each channel — a
//! consequence of the observables being homogeneous of degrees 2 and 3 — and
//! that identity is what makes the gain divergence and the Ito drift
//! correction available in closed form. The `Printed` variant centers the
//! whole product rather than the observable; it breaks the factorization and
//! is kept for comparison runs.
//!
//! All kernels run on particle slices with caller-owned scratch so the filter
//! loop does no allocation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::SpectralSystem;

/// Which covariance-channel gain to use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainVariant {
    /// Center the observable before multiplying by `z_j`; keeps the
    /// factorization identity exact.
    #[default]
    EulerConsistent,
    /// Center the whole product; simpler on paper, no exact identity.
    Printed,
}

/// Per-particle scratch for the gain kernels.
pub struct GainBuffers {
    /// `S_k(z)`, length d.
    pub s: Vec<f64>,
    /// `A_k z` stacked as `k*d + j`, length d^2.
    pub akz: Vec<f64>,
    /// `V_kl(z)` row-major, length d^2.
    pub v: Vec<f64>,
    /// Row sums of `A_k z`, length d (only the `Printed` drift needs them).
    pub w: Vec<f64>,
}

impl GainBuffers {
    pub fn new(d: usize) -> Self {
        GainBuffers { s: vec![0.0; d], akz: vec![0.0; d * d], v: vec![0.0; d * d], w: vec![0.0; d] }
    }
}

/// Gain evaluation context: system, channel references, and noise levels.
pub struct GainCtx<'a> {
    pub sys: &'a SpectralSystem,
    /// Reference mean-channel observable average, length d.
    pub hbar_m: DVector<f64>,
    /// Reference covariance-channel observable average, d x d.
    pub hbar_v: DMatrix<f64>,
    pub gamma_m: f64,
    pub gamma_v: f64,
    pub variant: GainVariant,
}

impl<'a> GainCtx<'a> {
    pub fn new(
        sys: &'a SpectralSystem,
        hbar_m: DVector<f64>,
        hbar_v: DMatrix<f64>,
        gamma_m: f64,
        gamma_v: f64,
        variant: GainVariant,
    ) -> Result<Self> {
        let d = sys.dim();
        if hbar_m.len() != d || hbar_v.shape() != (d, d) {
            return Err(Error::Config(format!(
                "gain references have shapes {} and {:?}, system dimension is {d}",
                hbar_m.len(),
                hbar_v.shape()
            )));
        }
        if !(gamma_m > 0.0) || !(gamma_v > 0.0) || !gamma_m.is_finite() || !gamma_v.is_finite() {
            return Err(Error::Config(format!(
                "channel noise levels must be positive and finite, got gamma_m={gamma_m} gamma_v={gamma_v}"
            )));
        }
        Ok(GainCtx { sys, hbar_m, hbar_v, gamma_m, gamma_v, variant })
    }

    /// Fill the scratch observables at `z`. Every other kernel assumes this
    /// ran first for the same particle.
    pub fn prepare(&self, z: &[f64], buf: &mut GainBuffers) {
        let d = self.sys.dim();
        self.sys.obs_mean_into(z, &mut buf.s);
        self.sys.sym_form_apply_into(z, &mut buf.akz);
        for k in 0..d {
            for l in 0..d {
                buf.v[k * d + l] = buf.s[k] * z[l] + z[k] * buf.s[l];
            }
            buf.w[k] = buf.akz[k * d..(k + 1) * d].iter().sum();
        }
    }

    /// Unscaled mean-channel gain, `out[j*d + k] = Km_{j,k}`.
    pub fn gain_mean_into(&self, z: &[f64], buf: &GainBuffers, out: &mut [f64]) {
        let d = self.sys.dim();
        for j in 0..d {
            for k in 0..d {
                out[j * d + k] = 0.5 * z[j] * (buf.s[k] - self.hbar_m[k]);
            }
        }
    }

    /// Unscaled covariance-channel gain, `out[j*d*d + k*d + l] = Kv_{j,kl}`.
    pub fn gain_cov_into(&self, z: &[f64], buf: &GainBuffers, out: &mut [f64]) {
        let d = self.sys.dim();
        for j in 0..d {
            for k in 0..d {
                for l in 0..d {
                    let beta = k * d + l;
                    out[j * d * d + beta] = match self.variant {
                        GainVariant::EulerConsistent => z[j] * (buf.v[beta] - self.hbar_v[(k, l)]) / 3.0,
                        GainVariant::Printed => (z[j] * buf.v[beta] - self.hbar_v[(k, l)]) / 3.0,
                    };
                }
            }
        }
    }

    /// Divergence over the particle index of each unscaled gain column:
    /// `out_m[k] = sum_j dKm_{j,k}/dz_j`, `out_v[beta] = sum_j dKv_{j,beta}/dz_j`.
    pub fn divergence_into(&self, z: &[f64], buf: &GainBuffers, out_m: &mut [f64], out_v: &mut [f64]) {
        let d = self.sys.dim();
        let df = d as f64;
        let _ = z;
        for k in 0..d {
            let sp = buf.s[k] - self.hbar_m[k];
            out_m[k] = 0.5 * (df * sp + 2.0 * buf.s[k]);
        }
        for k in 0..d {
            for l in 0..d {
                let beta = k * d + l;
                let vv = buf.v[beta];
                out_v[beta] = match self.variant {
                    GainVariant::EulerConsistent => (df * (vv - self.hbar_v[(k, l)]) + 3.0 * vv) / 3.0,
                    GainVariant::Printed => (df + 3.0) * vv / 3.0,
                };
            }
        }
    }

    /// Ito drift correction of the gain field,
    /// `a_i = sum_c gamma_c^{-2} sum_{j,alpha} (dK^c_{i,alpha}/dz_j) K^c_{j,alpha}`,
    /// in closed form (the homogeneity of the observables collapses the
    /// contraction). Cost O(d^2) after `prepare`.
    pub fn drift_into(&self, z: &[f64], buf: &GainBuffers, out: &mut [f64]) {
        let d = self.sys.dim();
        let inv_gm2 = 1.0 / (self.gamma_m * self.gamma_m);
        let inv_gv2 = 1.0 / (self.gamma_v * self.gamma_v);

        // Mean channel: radial. sum_k (S'^2 + 2 S S') with S' = S - hbar.
        let mut rho = 0.0;
        for k in 0..d {
            let sp = buf.s[k] - self.hbar_m[k];
            rho += 0.25 * inv_gm2 * (sp * sp + 2.0 * buf.s[k] * sp);
        }

        match self.variant {
            GainVariant::EulerConsistent => {
                // Also radial: sum_beta (V'^2 + 3 V V') / 9.
                for k in 0..d {
                    for l in 0..d {
                        let vv = buf.v[k * d + l];
                        let vp = vv - self.hbar_v[(k, l)];
                        rho += inv_gv2 * (vp * vp + 3.0 * vv * vp) / 9.0;
                    }
                }
                for i in 0..d {
                    out[i] = rho * z[i];
                }
            }
            GainVariant::Printed => {
                // a_i = rho_m z_i + gamma_v^{-2}/9 sum_beta
                //       [4 z_i V^2 - V hbar_v - z_i hbar_v G_beta],
                // with G_kl = sum_j dV_kl/dz_j = 2 w_k z_l + 2 w_l z_k + S_k + S_l.
                let mut radial = 0.0;
                let mut uniform = 0.0;
                for k in 0..d {
                    for l in 0..d {
                        let vv = buf.v[k * d + l];
                        let hb = self.hbar_v[(k, l)];
                        let g = 2.0 * buf.w[k] * z[l] + 2.0 * buf.w[l] * z[k] + buf.s[k] + buf.s[l];
                        radial += 4.0 * vv * vv - hb * g;
                        uniform -= vv * hb;
                    }
                }
                radial *= inv_gv2 / 9.0;
                uniform *= inv_gv2 / 9.0;
                for i in 0..d {
                    out[i] = (rho + radial) * z[i] + uniform;
                }
            }
        }
    }

    /// Apply the scaled gains to channel innovations:
    /// `out_j = gamma_m^{-2} sum_k Km_{j,k} im_k + gamma_v^{-2} sum_beta Kv_{j,beta} iv_beta`.
    /// The contraction collapses to inner products against the observables,
    /// so the cost is O(d^2) rather than O(d^3).
    pub fn apply_gain_into(&self, z: &[f64], buf: &GainBuffers, innov_m: &[f64], innov_v: &[f64], out: &mut [f64]) {
        let d = self.sys.dim();
        let inv_gm2 = 1.0 / (self.gamma_m * self.gamma_m);
        let inv_gv2 = 1.0 / (self.gamma_v * self.gamma_v);

        let mut dot_m = 0.0;
        for k in 0..d {
            dot_m += (buf.s[k] - self.hbar_m[k]) * innov_m[k];
        }
        let mut dot_v = 0.0;
        let mut dot_hbar = 0.0;
        for k in 0..d {
            for l in 0..d {
                let beta = k * d + l;
                match self.variant {
                    GainVariant::EulerConsistent => dot_v += (buf.v[beta] - self.hbar_v[(k, l)]) * innov_v[beta],
                    GainVariant::Printed => {
                        dot_v += buf.v[beta] * innov_v[beta];
                        dot_hbar += self.hbar_v[(k, l)] * innov_v[beta];
                    }
                }
            }
        }
        for j in 0..d {
            out[j] = 0.5 * inv_gm2 * z[j] * dot_m + inv_gv2 * (z[j] * dot_v - dot_hbar) / 3.0;
        }
    }

    // ---- dense wrappers (tests, examples, diagnostics) ----

    pub fn gain_mean(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let d = self.sys.dim();
        let mut buf = GainBuffers::new(d);
        self.prepare(z.as_slice(), &mut buf);
        let mut out = vec![0.0; d * d];
        self.gain_mean_into(z.as_slice(), &buf, &mut out);
        DMatrix::from_row_slice(d, d, &out)
    }

    pub fn gain_cov(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let d = self.sys.dim();
        let mut buf = GainBuffers::new(d);
        self.prepare(z.as_slice(), &mut buf);
        let mut out = vec![0.0; d * d * d];
        self.gain_cov_into(z.as_slice(), &buf, &mut out);
        DMatrix::from_row_slice(d, d * d, &out)
    }

    pub fn divergence(&self, z: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let d = self.sys.dim();
        let mut buf = GainBuffers::new(d);
        self.prepare(z.as_slice(), &mut buf);
        let mut out_m = vec![0.0; d];
        let mut out_v = vec![0.0; d * d];
        self.divergence_into(z.as_slice(), &buf, &mut out_m, &mut out_v);
        (DVector::from_vec(out_m), DVector::from_vec(out_v))
    }

    pub fn drift(&self, z: &DVector<f64>) -> DVector<f64> {
        let d = self.sys.dim();
        let mut buf = GainBuffers::new(d);
        self.prepare(z.as_slice(), &mut buf);
        let mut out = vec![0.0; d];
        self.drift_into(z.as_slice(), &buf, &mut out);
        DVector::from_vec(out)
    }
}

/// Both observable channels stacked at a point: `[Hm | Hv (row-major)]`,
/// length `d + d^2`.
pub fn observable_stack(sys: &SpectralSystem, z: &[f64]) -> DVector<f64> {
    let d = sys.dim();
    let mut buf = GainBuffers::new(d);
    sys.obs_mean_into(z, &mut buf.s);
    sys.sym_form_apply_into(z, &mut buf.akz);
    sys.obs_cov_into(z, &buf.s, &mut buf.v);
    let mut out = DVector::zeros(d + d * d);
    out.rows_mut(0, d).copy_from_slice(&buf.s);
    out.rows_mut(d, d * d).copy_from_slice(&buf.v);
    out
}

/// Exact gradient of the stacked observable: entry `(beta, j)` is
/// `d H_beta / d z_j`, with rows `0..d` the mean channel (`2 (A_beta z)_j`)
/// and the rest the row-major covariance channel.
pub fn observable_gradient(sys: &SpectralSystem, z: &[f64]) -> DMatrix<f64> {
    let d = sys.dim();
    let mut s = vec![0.0; d];
    let mut akz = vec![0.0; d * d];
    sys.obs_mean_into(z, &mut s);
    sys.sym_form_apply_into(z, &mut akz);
    DMatrix::from_fn(d + d * d, d, |beta, j| {
        if beta < d {
            2.0 * akz[beta * d + j]
        } else {
            let (k, l) = ((beta - d) / d, (beta - d) % d);
            2.0 * akz[k * d + j] * z[l]
                + if l == j { s[k] } else { 0.0 }
                + 2.0 * akz[l * d + j] * z[k]
                + if k == j { s[l] } else { 0.0 }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use crate::spectral::{ForcingSpec, NoiseSpec};

    /// d=1 system with a single quadratic coefficient equal to 1.
    fn scalar_system() -> SpectralSystem {
        SpectralSystem::new(
            1,
            1,
            vec![-1.0],
            vec![1.0],
            ForcingSpec::zero(1),
            NoiseSpec::isotropic(1, 1.0),
            false,
        )
        .unwrap()
    }

    fn random_system(d: usize) -> SpectralSystem {
        // Small random coefficients keep the observables well scaled.
        let mut state = 0x853c49e6748fea9bu64 ^ (0x9e37 + d as u64);
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let lambda: Vec<f64> = (0..d * d).map(|_| next()).collect();
        let gamma: Vec<f64> = (0..d * d * d).map(|_| 0.6 * next()).collect();
        SpectralSystem::new(d, d, lambda, gamma, ForcingSpec::zero(d), NoiseSpec::isotropic(d, 0.5), false)
            .unwrap()
    }

    fn random_ctx(sys: &SpectralSystem, variant: GainVariant, salt: u64) -> GainCtx<'_> {
        let d = sys.dim();
        let mut state = 0x243f6a8885a308d3u64.wrapping_add(salt);
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let hbar_m = DVector::from_fn(d, |_, _| next());
        let mut hbar_v = DMatrix::from_fn(d, d, |_, _| next());
        hbar_v = (&hbar_v + hbar_v.transpose()) * 0.5;
        GainCtx::new(sys, hbar_m, hbar_v, 0.7, 1.3, variant).unwrap()
    }

    fn random_point(d: usize, salt: u64) -> DVector<f64> {
        let mut state = 0xb5297a4d3f84d5b5u64.wrapping_add(salt);
        DVector::from_fn(d, |_, _| {
            state = state.wrapping_mul(2862933555777941757).wrapping_add(3037000493);
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
    }

    #[test]
    fn scalar_gain_values_match_hand_computation() {
        let sys = scalar_system();
        // S(z) = z^2, V(z) = 2 z^3.
        let ctx = GainCtx::new(&sys, DVector::zeros(1), DMatrix::zeros(1, 1), 1.0, 1.0, GainVariant::EulerConsistent)
            .unwrap();
        assert_relative_eq!(ctx.gain_mean(&DVector::from_element(1, 2.0))[(0, 0)], 4.0);
        assert_relative_eq!(ctx.gain_cov(&DVector::from_element(1, 1.0))[(0, 0)], 2.0 / 3.0);

        let ctx1 = GainCtx::new(
            &sys,
            DVector::from_element(1, 1.0),
            DMatrix::zeros(1, 1),
            1.0,
            1.0,
            GainVariant::EulerConsistent,
        )
        .unwrap();
        assert_relative_eq!(ctx1.gain_mean(&DVector::from_element(1, 2.0))[(0, 0)], 3.0);
        // Divergence of the mean gain: 1/2 (d S' + 2 S).
        let (dm0, _) = ctx1.divergence(&DVector::zeros(1));
        assert_relative_eq!(dm0[0], -0.5);
        let ctx0 = GainCtx::new(&sys, DVector::zeros(1), DMatrix::zeros(1, 1), 1.0, 1.0, GainVariant::EulerConsistent)
            .unwrap();
        let (dm1, _) = ctx0.divergence(&DVector::from_element(1, 1.0));
        assert_relative_eq!(dm1[0], 1.5);
    }

    #[test]
    fn variants_agree_when_the_reference_is_zero() {
        let sys = random_system(3);
        let z = random_point(3, 4);
        let a = GainCtx::new(&sys, DVector::zeros(3), DMatrix::zeros(3, 3), 1.0, 1.0, GainVariant::EulerConsistent)
            .unwrap()
            .gain_cov(&z);
        let b = GainCtx::new(&sys, DVector::zeros(3), DMatrix::zeros(3, 3), 1.0, 1.0, GainVariant::Printed)
            .unwrap()
            .gain_cov(&z);
        assert_relative_eq!(a, b, epsilon = 1e-14);
    }

    /// Numeric gradient of an observable column.
    fn fd_grad(f: &dyn Fn(&DVector<f64>) -> f64, z: &DVector<f64>, j: usize) -> f64 {
        let h = 1e-6 * (1.0 + z[j].abs());
        let mut zp = z.clone();
        let mut zm = z.clone();
        zp[j] += h;
        zm[j] -= h;
        (f(&zp) - f(&zm)) / (2.0 * h)
    }

    #[test]
    fn euler_consistent_gain_satisfies_the_factorization_identity() {
        for d in 1..=4usize {
            let sys = random_system(d);
            let ctx = random_ctx(&sys, GainVariant::EulerConsistent, d as u64);
            let z = random_point(d, 31 + d as u64);
            let mut buf = GainBuffers::new(d);
            ctx.prepare(z.as_slice(), &mut buf);
            let km = ctx.gain_mean(&z);
            let kv = ctx.gain_cov(&z);

            // Mean channel: sum_j Km_{j,k} dS_kappa/dz_j = (S_k - hbar_k) S_kappa.
            for k in 0..d {
                for kappa in 0..d {
                    let mut lhs = 0.0;
                    for j in 0..d {
                        lhs += km[(j, k)] * 2.0 * buf.akz[kappa * d + j];
                    }
                    let rhs = (buf.s[k] - ctx.hbar_m[k]) * buf.s[kappa];
                    assert_relative_eq!(lhs, rhs, epsilon = 1e-12, max_relative = 1e-12);
                }
            }
            // Covariance channel against an exact gradient of V.
            for beta in 0..d * d {
                for gamma_idx in 0..d * d {
                    let (k, l) = (gamma_idx / d, gamma_idx % d);
                    let mut lhs = 0.0;
                    for j in 0..d {
                        let dv = 2.0 * buf.akz[k * d + j] * z[l]
                            + if l == j { buf.s[k] } else { 0.0 }
                            + 2.0 * buf.akz[l * d + j] * z[k]
                            + if k == j { buf.s[l] } else { 0.0 };
                        lhs += kv[(j, beta)] * dv;
                    }
                    let rhs = (buf.v[beta] - ctx.hbar_v[(beta / d, beta % d)]) * buf.v[gamma_idx];
                    assert_relative_eq!(lhs, rhs, epsilon = 1e-12, max_relative = 1e-10);
                }
            }
        }
    }

    #[test]
    fn printed_variant_breaks_the_factorization_identity() {
        let sys = scalar_system();
        let ctx = GainCtx::new(
            &sys,
            DVector::zeros(1),
            DMatrix::from_element(1, 1, 0.8),
            1.0,
            1.0,
            GainVariant::Printed,
        )
        .unwrap();
        let z = DVector::from_element(1, 1.3);
        let kv = ctx.gain_cov(&z)[(0, 0)];
        // dV/dz = 6 z^2; lhs = Kv * 6 z^2, rhs = (V - hbar) V.
        let v = 2.0 * z[0].powi(3);
        let lhs = kv * 6.0 * z[0] * z[0];
        let rhs = (v - 0.8) * v;
        assert!((lhs - rhs).abs() > 1e-3, "printed variant unexpectedly satisfied the identity");
    }

    #[test]
    fn divergence_matches_finite_differences() {
        for &variant in &[GainVariant::EulerConsistent, GainVariant::Printed] {
            for d in 1..=3usize {
                let sys = random_system(d);
                let ctx = random_ctx(&sys, variant, 7 + d as u64);
                let z = random_point(d, 100 + d as u64);
                let (dm, dv) = ctx.divergence(&z);
                for k in 0..d {
                    let mut fd = 0.0;
                    for j in 0..d {
                        fd += fd_grad(
                            &|p: &DVector<f64>| ctx.gain_mean(p)[(j, k)],
                            &z,
                            j,
                        );
                    }
                    assert_relative_eq!(dm[k], fd, epsilon = 1e-6, max_relative = 1e-5);
                }
                for beta in 0..d * d {
                    let mut fd = 0.0;
                    for j in 0..d {
                        fd += fd_grad(&|p: &DVector<f64>| ctx.gain_cov(p)[(j, beta)], &z, j);
                    }
                    assert_relative_eq!(dv[beta], fd, epsilon = 1e-6, max_relative = 1e-5);
                }
            }
        }
    }

    #[test]
    fn drift_matches_finite_difference_assembly() {
        // 100 random points per variant, spread over d = 1..3.
        for &variant in &[GainVariant::EulerConsistent, GainVariant::Printed] {
            for point in 0..100u64 {
                let d = 1 + (point % 3) as usize;
                let sys = random_system(d);
                let ctx = random_ctx(&sys, variant, 55 + point);
                let z = random_point(d, 200 + point);
                let km = ctx.gain_mean(&z);
                let kv = ctx.gain_cov(&z);
                let inv_gm2 = 1.0 / (ctx.gamma_m * ctx.gamma_m);
                let inv_gv2 = 1.0 / (ctx.gamma_v * ctx.gamma_v);
                let mut expect = vec![0.0; d];
                for i in 0..d {
                    for j in 0..d {
                        for k in 0..d {
                            let dk = fd_grad(&|p: &DVector<f64>| ctx.gain_mean(p)[(i, k)], &z, j);
                            expect[i] += inv_gm2 * dk * km[(j, k)];
                        }
                        for beta in 0..d * d {
                            let dk = fd_grad(&|p: &DVector<f64>| ctx.gain_cov(p)[(i, beta)], &z, j);
                            expect[i] += inv_gv2 * dk * kv[(j, beta)];
                        }
                    }
                }
                let a = ctx.drift(&z);
                for i in 0..d {
                    assert_relative_eq!(a[i], expect[i], epsilon = 1e-5, max_relative = 1e-5);
                }
            }
        }
    }

    #[test]
    fn drift_vanishes_at_the_origin() {
        // Frozen regression: every gain column is zero or constant-gradient
        // at z = 0, so the assembled drift is exactly zero for both variants.
        for &variant in &[GainVariant::EulerConsistent, GainVariant::Printed] {
            for d in 1..=3usize {
                let sys = random_system(d);
                let ctx = random_ctx(&sys, variant, 500 + d as u64);
                let a = ctx.drift(&DVector::zeros(d));
                for i in 0..d {
                    assert_eq!(a[i], 0.0, "variant {variant:?} d={d}");
                }
            }
        }
    }

    #[test]
    fn mean_gain_average_matches_raw_moment_expression() {
        // E_N[Km] computed through the kernel equals
        // 1/2 (E_N[z Hm(z)^T] - E_N[z] hbar^T) computed from raw moments.
        let d = 3;
        let sys = random_system(d);
        let n = 500;
        let zs: Vec<DVector<f64>> = (0..n).map(|i| random_point(d, 900 + i as u64)).collect();
        // Ensemble-consistent reference.
        let mut hbar = DVector::zeros(d);
        for z in &zs {
            hbar += sys.obs_mean(z);
        }
        hbar /= n as f64;
        let ctx = GainCtx::new(&sys, hbar.clone(), DMatrix::zeros(d, d), 1.0, 1.0, GainVariant::EulerConsistent)
            .unwrap();

        let mut kernel_avg = DMatrix::zeros(d, d);
        let mut raw_first = DMatrix::zeros(d, d);
        let mut z_avg = DVector::zeros(d);
        for z in &zs {
            kernel_avg += ctx.gain_mean(z);
            raw_first += z * sys.obs_mean(z).transpose();
            z_avg += z;
        }
        kernel_avg /= n as f64;
        raw_first /= n as f64;
        z_avg /= n as f64;
        let raw = (raw_first - z_avg * hbar.transpose()) * 0.5;
        assert_relative_eq!(kernel_avg, raw, epsilon = 1e-12);
    }

    #[test]
    fn ensemble_average_of_gain_gradient_matches_observable_covariance() {
        // Necessary-condition check E_N[Ktilde^T grad H] ~ C^H_N at N = 1e4,
        // with the reference hbar taken from the exact Gaussian moments (so
        // the match is statistical, not an algebraic identity): for a
        // centered Gaussian, E[Hm_k] = tr(A_k Cov) and E[Hv] = 0.
        use rand::SeedableRng;
        let d = 2;
        let p = d + d * d;
        let sys = random_system(d);
        let n = 10_000usize;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let cov = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]);
        let b = crate::ensemble::psd_sqrt(&cov).unwrap();
        let mut hbar_m = DVector::zeros(d);
        for k in 0..d {
            hbar_m[k] = (sys.sym_form(k) * &cov).trace();
        }
        let ctx = GainCtx::new(&sys, hbar_m, DMatrix::zeros(d, d), 1.0, 1.0, GainVariant::EulerConsistent).unwrap();

        let mut ens = crate::ensemble::Ensemble::zeros(d, n);
        let mut xi = vec![0.0; d];
        for i in 0..n {
            crate::rng::fill_standard_normal(&mut rng, &mut xi);
            let x = &b * DVector::from_column_slice(&xi);
            ens.particle_mut(i).copy_from_slice(x.as_slice());
        }

        // E_N[Ktilde^T grad H] via the kernels and exact gradients.
        let mut buf = GainBuffers::new(d);
        let mut acc = DMatrix::zeros(p, p);
        let mut km = vec![0.0; d * d];
        let mut kv = vec![0.0; d * d * d];
        for i in 0..n {
            let z = ens.particle(i);
            ctx.prepare(z, &mut buf);
            ctx.gain_mean_into(z, &buf, &mut km);
            ctx.gain_cov_into(z, &buf, &mut kv);
            for j in 0..d {
                for beta in 0..p {
                    let kt = if beta < d { km[j * d + beta] } else { kv[j * d * d + (beta - d)] };
                    for gam in 0..p {
                        let grad = if gam < d {
                            2.0 * buf.akz[gam * d + j]
                        } else {
                            let (k, l) = ((gam - d) / d, (gam - d) % d);
                            2.0 * buf.akz[k * d + j] * z[l]
                                + if l == j { buf.s[k] } else { 0.0 }
                                + 2.0 * buf.akz[l * d + j] * z[k]
                                + if k == j { buf.s[l] } else { 0.0 }
                        };
                        acc[(beta, gam)] += kt * grad;
                    }
                }
            }
        }
        acc /= n as f64;

        let hs = crate::moments::h_stats(&sys, &ens, false, true);
        let tol = 5.0 / (n as f64).sqrt();
        let scale = 1.0 + hs.cov.amax();
        let gap = (&acc - &hs.cov).amax();
        assert!(gap <= tol * scale, "gap {gap} exceeds {tol} * {scale}");
        // And the gap is genuinely statistical, not an exact identity.
        assert!(gap > 1e-10, "comparison unexpectedly exact: gap {gap}");
    }

    #[test]
    fn applying_the_gain_matches_the_materialized_matrices() {
        for &variant in &[GainVariant::EulerConsistent, GainVariant::Printed] {
            let d = 3;
            let sys = random_system(d);
            let ctx = random_ctx(&sys, variant, 9);
            let z = random_point(d, 77);
            let im = random_point(d, 78);
            let iv_vec = random_point(d * d, 79);
            // Symmetrize the covariance innovation like the filter does.
            let mut iv = vec![0.0; d * d];
            for k in 0..d {
                for l in 0..d {
                    iv[k * d + l] = 0.5 * (iv_vec[k * d + l] + iv_vec[l * d + k]);
                }
            }
            let mut buf = GainBuffers::new(d);
            ctx.prepare(z.as_slice(), &mut buf);
            let mut fast = vec![0.0; d];
            ctx.apply_gain_into(z.as_slice(), &buf, im.as_slice(), &iv, &mut fast);

            let km = ctx.gain_mean(&z);
            let kv = ctx.gain_cov(&z);
            for j in 0..d {
                let mut slow = 0.0;
                for k in 0..d {
                    slow += km[(j, k)] * im[k] / (ctx.gamma_m * ctx.gamma_m);
                }
                for beta in 0..d * d {
                    slow += kv[(j, beta)] * iv[beta] / (ctx.gamma_v * ctx.gamma_v);
                }
                assert_relative_eq!(fast[j], slow, epsilon = 1e-13, max_relative = 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn drift_is_radial_for_the_euler_consistent_variant(
            seed in 0u64..500,
            scale in 0.1f64..2.0,
        ) {
            let sys = random_system(2);
            let ctx = random_ctx(&sys, GainVariant::EulerConsistent, seed);
            let z = random_point(2, seed) * scale;
            let a = ctx.drift(&z);
            // a is parallel to z: the cross product vanishes.
            let cross = a[0] * z[1] - a[1] * z[0];
            let mag = a.norm() * z.norm();
            prop_assert!(cross.abs() <= 1e-10 * (1.0 + mag));
        }
    }
}
