//! d=1 grid-based reference solver: nonlinear Fokker-Planck transport of the
//! fluctuation density, the grid-discretized Kalman-Bucy filter for
//! mean/covariance observations, and the multiplicative analysis-only density
//! update. Used as the ground truth the particle filter is checked against.
//!
//! Everything here is d=1 by design: the covariance kernel is an `M x M`
//! matrix whose operator action carries one factor of the cell width per
//! integral, and a d=2 analogue would need an `M^2 x M^2` kernel. Transport
//! uses a conservative finite-volume scheme (exponential-fitted fluxes that
//! limit to upwind advection and central diffusion, zero-flux boundaries)
//! expressed as a tridiagonal generator so the same matrix drives the
//! density step and the kernel Lyapunov terms.

use nalgebra::DMatrix;

use crate::closure::BLOWUP;
use crate::error::{Error, Result};
use crate::filter::AnalysisTerms;
use crate::spectral::{SpectralSystem, StatState};

/// Uniform cell-centered grid on `[z_min, z_max]`.
#[derive(Debug, Clone)]
pub struct Grid1D {
    pub z_min: f64,
    pub z_max: f64,
    pub m: usize,
    /// Cell width `(z_max - z_min) / m`.
    pub h: f64,
    centers: Vec<f64>,
}

impl Grid1D {
    pub fn new(z_min: f64, z_max: f64, m: usize) -> Result<Self> {
        if !(z_min.is_finite() && z_max.is_finite() && z_max > z_min) {
            return Err(Error::Config(format!("grid bounds [{z_min}, {z_max}] are not a finite interval")));
        }
        if m < 32 {
            return Err(Error::Config(format!("grid needs at least 32 cells, got {m}")));
        }
        let h = (z_max - z_min) / m as f64;
        let centers = (0..m).map(|i| z_min + (i as f64 + 0.5) * h).collect();
        Ok(Grid1D { z_min, z_max, m, h, centers })
    }

    /// Grid spanning eight standard deviations either side of `center`, wide
    /// enough that a Gaussian of that scale has negligible boundary mass.
    pub fn centered(center: f64, std: f64, m: usize) -> Result<Self> {
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::Config(format!("grid scale must be positive, got {std}")));
        }
        Grid1D::new(center - 8.0 * std, center + 8.0 * std, m)
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }
}

/// Probability density sampled at cell centers; `sum(rho) * h = 1`.
///
/// Nonnegativity is enforced at construction and preserved by
/// [`fp_step`] under its stability bound. The Kalman-Bucy estimate update is
/// a signed-field correction, so densities coming out of [`kb_filter_step`]
/// may dip slightly negative — their moment projections are what the oracle
/// is consulted for.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    pub rho: Vec<f64>,
}

impl GridDensity {
    /// Validate nonnegativity and normalize to unit mass.
    pub fn new(grid: &Grid1D, mut rho: Vec<f64>) -> Result<Self> {
        if rho.len() != grid.m {
            return Err(Error::Config(format!("density has {} cells, grid has {}", rho.len(), grid.m)));
        }
        if !rho.iter().all(|x| x.is_finite() && *x >= 0.0) {
            return Err(Error::Config("density values must be finite and nonnegative".into()));
        }
        let mass: f64 = rho.iter().sum::<f64>() * grid.h;
        if !(mass > 0.0) {
            return Err(Error::Config("density has zero mass".into()));
        }
        for x in &mut rho {
            *x /= mass;
        }
        Ok(GridDensity { rho })
    }

    /// Discretized Gaussian, renormalized on the grid.
    pub fn gaussian(grid: &Grid1D, mean: f64, var: f64) -> Result<Self> {
        if !(var > 0.0) || !var.is_finite() {
            return Err(Error::Config(format!("Gaussian variance must be positive, got {var}")));
        }
        let rho = grid.centers().iter().map(|&z| (-(z - mean).powi(2) / (2.0 * var)).exp()).collect();
        GridDensity::new(grid, rho)
    }

    pub fn mass(&self, grid: &Grid1D) -> f64 {
        self.rho.iter().sum::<f64>() * grid.h
    }
}

/// Tridiagonal action of the discretized transport generator: conservative
/// upwind advection plus central diffusion with zero-flux boundaries. Column
/// sums vanish by construction, so one explicit Euler step conserves mass to
/// rounding.
#[derive(Debug, Clone)]
pub struct Tridiag {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Tridiag {
    /// `out = A x`.
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        let m = self.diag.len();
        debug_assert_eq!(x.len(), m);
        debug_assert_eq!(out.len(), m);
        for i in 0..m {
            let mut v = self.diag[i] * x[i];
            if i > 0 {
                v += self.lower[i - 1] * x[i - 1];
            }
            if i + 1 < m {
                v += self.upper[i] * x[i + 1];
            }
            out[i] = v;
        }
    }

    /// Largest stable explicit Euler step: off-diagonal entries are
    /// nonnegative, so nonnegativity (and boundedness) holds exactly when
    /// `1 + dt * diag_i >= 0` for every cell.
    pub fn max_step(&self) -> f64 {
        let rate = self.diag.iter().fold(0.0f64, |a, &x| a.max(-x));
        if rate > 0.0 {
            1.0 / rate
        } else {
            f64::INFINITY
        }
    }
}

/// Fluctuation drift at `z` given resolved statistics `(mean, cov)`:
/// the linearized operator times `z` plus the centered quadratic term.
fn drift_at(sys: &SpectralSystem, lin: f64, quad: f64, gamma_r: f64, z: f64) -> f64 {
    let _ = sys;
    lin * z + quad * z * z - gamma_r
}

fn transport_coefficients(sys: &SpectralSystem, stat: &StatState, t: f64) -> (f64, f64, f64, f64) {
    let lin = sys.fluct_operator(&stat.mean)[(0, 0)];
    let quad = sys.sym_form(0)[(0, 0)];
    let gamma_r = quad * stat.cov[(0, 0)];
    let diff = 0.5 * sys.noise_cov_at(t)[(0, 0)];
    (lin, quad, gamma_r, diff)
}

/// `x / (e^x - 1)`, the weight of the exponential-fitted flux. Nonnegative
/// everywhere; series branch avoids the 0/0 at the origin.
fn bernoulli(x: f64) -> f64 {
    if x.abs() < 1e-5 {
        1.0 - 0.5 * x + x * x / 12.0
    } else {
        x / x.exp_m1()
    }
}

/// Build the transport generator for the current resolved statistics. Face
/// velocities are evaluated at cell interfaces; the two boundary fluxes are
/// zero.
///
/// Fluxes are exponential-fitted: `F = (D/h)[B(-Pe) rho_i - B(Pe) rho_{i+1}]`
/// with `Pe = v h / D` and `B(x) = x/(e^x - 1)`. This reduces to central
/// diffusion at `v = 0` and to upwind advection as `D -> 0` (that limit is
/// taken explicitly when the diffusion vanishes), and it reproduces local
/// equilibria `rho_{i+1}/rho_i = exp(v h / D)` exactly — plain first-order
/// upwinding would pollute stationary densities with `O(|v| h)` artificial
/// diffusion, far beyond the accuracy this oracle is consulted for.
pub fn fp_generator(sys: &SpectralSystem, grid: &Grid1D, stat: &StatState, t: f64) -> Tridiag {
    let m = grid.m;
    let h = grid.h;
    let (lin, quad, gamma_r, diff) = transport_coefficients(sys, stat, t);
    let mut lower = vec![0.0; m - 1];
    let mut diag = vec![0.0; m];
    let mut upper = vec![0.0; m - 1];
    for f in 0..m - 1 {
        // Interface between cells f and f+1; a = outflow weight of the left
        // cell, b = outflow weight of the right cell (both nonnegative).
        let z_face = grid.z_min + (f as f64 + 1.0) * h;
        let v = drift_at(sys, lin, quad, gamma_r, z_face);
        let (a, b) = if diff > 0.0 {
            let pe = v * h / diff;
            ((diff / h) * bernoulli(-pe) / h, (diff / h) * bernoulli(pe) / h)
        } else {
            (v.max(0.0) / h, -v.min(0.0) / h)
        };
        diag[f] -= a;
        upper[f] += b;
        lower[f] += a;
        diag[f + 1] -= b;
    }
    Tridiag { lower, diag, upper }
}

/// One conservative finite-volume step of the nonlinear Fokker-Planck
/// transport. Rejects steps beyond the generator's positivity bound.
pub fn fp_step(
    sys: &SpectralSystem,
    grid: &Grid1D,
    rho: &GridDensity,
    stat: &StatState,
    t: f64,
    dt: f64,
) -> Result<GridDensity> {
    let gen = fp_generator(sys, grid, stat, t);
    let dt_max = gen.max_step();
    if dt > dt_max {
        return Err(Error::CflViolation { dt, dt_max });
    }
    let mut rate = vec![0.0; grid.m];
    gen.apply(&rho.rho, &mut rate);
    let rho_new = rho.rho.iter().zip(&rate).map(|(&r, &dr)| r + dt * dr).collect();
    Ok(GridDensity { rho: rho_new })
}

/// Observable values at the cell centers: `(Hm, Hv)` as grid vectors.
pub fn observable_grid(sys: &SpectralSystem, grid: &Grid1D) -> (Vec<f64>, Vec<f64>) {
    let m = grid.m;
    let mut hm = vec![0.0; m];
    let mut hv = vec![0.0; m];
    let mut hm_cell = [0.0];
    let mut hv_cell = [0.0];
    for (i, &z) in grid.centers().iter().enumerate() {
        let cell = [z];
        sys.obs_mean_into(&cell, &mut hm_cell);
        sys.obs_cov_into(&cell, &hm_cell, &mut hv_cell);
        hm[i] = hm_cell[0];
        hv[i] = hv_cell[0];
    }
    (hm, hv)
}

/// Midpoint-rule moments of a grid density: state moments, observable means,
/// observable covariance, and the largest third central observable moment
/// (the size of the terms the Kalman-Bucy projection neglects).
#[derive(Debug, Clone)]
pub struct GridMoments {
    pub mean: f64,
    pub var: f64,
    pub hbar_m: f64,
    pub hbar_v: f64,
    /// 2x2 covariance of `(Hm, Hv)` under the density.
    pub c_h: DMatrix<f64>,
    /// `max_abc |E[(H_a - hbar_a)(H_b - hbar_b)(H_c - hbar_c)]|`.
    pub q_h: f64,
}

pub fn grid_moments(sys: &SpectralSystem, grid: &Grid1D, rho: &GridDensity) -> GridMoments {
    let h = grid.h;
    let (hm, hv) = observable_grid(sys, grid);
    let mut mean = 0.0;
    let mut hbar_m = 0.0;
    let mut hbar_v = 0.0;
    for i in 0..grid.m {
        let w = rho.rho[i] * h;
        mean += w * grid.centers()[i];
        hbar_m += w * hm[i];
        hbar_v += w * hv[i];
    }
    let mut var = 0.0;
    let mut c_h = DMatrix::zeros(2, 2);
    let mut q_h = 0.0f64;
    let mut third = [0.0f64; 8];
    for i in 0..grid.m {
        let w = rho.rho[i] * h;
        let dz = grid.centers()[i] - mean;
        var += w * dz * dz;
        let dh = [hm[i] - hbar_m, hv[i] - hbar_v];
        for a in 0..2 {
            for b in 0..2 {
                c_h[(a, b)] += w * dh[a] * dh[b];
                for c in 0..2 {
                    third[(a * 2 + b) * 2 + c] += w * dh[a] * dh[b] * dh[c];
                }
            }
        }
    }
    for x in third {
        q_h = q_h.max(x.abs());
    }
    GridMoments { mean, var, hbar_m, hbar_v, c_h, q_h }
}

/// Covariance kernel of the Kalman-Bucy density filter, stored as the dense
/// symmetric matrix `C` with operator action `(C f)(z_i) = sum_j C_ij f_j h`.
#[derive(Debug, Clone)]
pub struct GridCovKernel {
    pub c: DMatrix<f64>,
    /// Asymmetry `max|C - C^T|` measured on the last update before it was
    /// symmetrized away.
    pub last_asymmetry: f64,
}

impl GridCovKernel {
    pub fn zeros(m: usize) -> Self {
        GridCovKernel { c: DMatrix::zeros(m, m), last_asymmetry: 0.0 }
    }

    /// Projected observable covariance `P_ab = h^2 h_a^T C h_b` over the two
    /// channels `(Hm, Hv)`.
    pub fn projection(&self, sys: &SpectralSystem, grid: &Grid1D) -> DMatrix<f64> {
        let (hm, hv) = observable_grid(sys, grid);
        let h2 = grid.h * grid.h;
        let obs = [hm, hv];
        DMatrix::from_fn(2, 2, |a, b| {
            let mut acc = 0.0;
            for i in 0..grid.m {
                let mut row = 0.0;
                for j in 0..grid.m {
                    row += self.c[(i, j)] * obs[b][j];
                }
                acc += obs[a][i] * row;
            }
            acc * h2
        })
    }

    fn symmetrize(&mut self) {
        let mut asym = 0.0f64;
        let m = self.c.nrows();
        for i in 0..m {
            for j in i + 1..m {
                let a = self.c[(i, j)];
                let b = self.c[(j, i)];
                asym = asym.max((a - b).abs());
                let avg = 0.5 * (a + b);
                self.c[(i, j)] = avg;
                self.c[(j, i)] = avg;
            }
        }
        self.last_asymmetry = asym;
    }
}

/// Rank-two initial kernel whose observable projection reproduces the
/// density's own observable covariance exactly: with centered observables
/// `Ht` and `G` their covariance under `rho`,
/// `C0(z, z') = rho(z) Ht(z)^T G^+ Ht(z') rho(z')`,
/// so `H C0 H^* = G G^+ G = G`. Rows integrate to zero (the observables are
/// centered), which keeps the filter's gain term mass-neutral.
pub fn initial_kernel(sys: &SpectralSystem, grid: &Grid1D, rho: &GridDensity) -> GridCovKernel {
    let m = grid.m;
    let (hm, hv) = observable_grid(sys, grid);
    let mom = grid_moments(sys, grid, rho);
    // Pseudo-inverse of the 2x2 observable covariance.
    let eig = nalgebra::SymmetricEigen::new(mom.c_h.clone());
    let scale = eig.eigenvalues.amax();
    let mut pinv = DMatrix::zeros(2, 2);
    if scale > 0.0 {
        for k in 0..2 {
            let lam = eig.eigenvalues[k];
            if lam > 1e-12 * scale {
                let v = eig.eigenvectors.column(k);
                pinv += DMatrix::from_fn(2, 2, |a, b| v[a] * v[b] / lam);
            }
        }
    }
    let centered: Vec<[f64; 2]> = (0..m).map(|i| [hm[i] - mom.hbar_m, hv[i] - mom.hbar_v]).collect();
    let c = DMatrix::from_fn(m, m, |i, j| {
        let mut q = 0.0;
        for a in 0..2 {
            for b in 0..2 {
                q += centered[i][a] * pinv[(a, b)] * centered[j][b];
            }
        }
        rho.rho[i] * q * rho.rho[j]
    });
    GridCovKernel { c, last_asymmetry: 0.0 }
}

fn check_finite(values: impl Iterator<Item = f64>, what: &str, step: usize, t: f64) -> Result<()> {
    let mut max = 0.0f64;
    for x in values {
        if !x.is_finite() {
            return Err(Error::NonFinite { what: what.into(), step, t });
        }
        max = max.max(x.abs());
    }
    if max > BLOWUP {
        return Err(Error::NonFinite { what: what.into(), step, t });
    }
    Ok(())
}

/// One explicit Euler step of the grid Kalman-Bucy filter: transport of the
/// estimate and Lyapunov evolution of the kernel (skipped when
/// `with_transport` is false, the analysis-only configuration), the gain
/// correction of the estimate driven by the innovations, and the Riccati
/// contraction of the kernel. All right-hand sides use step-start values.
///
/// The kernel step is guarded by `dt * tr(H C H^* Gamma^-2) <= 1/2`; beyond
/// that the explicit Riccati update overshoots.
#[allow(clippy::too_many_arguments)]
pub fn kb_filter_step(
    sys: &SpectralSystem,
    grid: &Grid1D,
    rho: &GridDensity,
    kernel: &GridCovKernel,
    stat: &StatState,
    gamma_m: f64,
    gamma_v: f64,
    terms: &AnalysisTerms,
    t: f64,
    dt: f64,
    step: usize,
    with_transport: bool,
) -> Result<(GridDensity, GridCovKernel)> {
    if !(gamma_m > 0.0 && gamma_v > 0.0) {
        return Err(Error::Config(format!("observation noise levels must be positive, got ({gamma_m}, {gamma_v})")));
    }
    let m = grid.m;
    let h = grid.h;
    let inv_gm2 = 1.0 / (gamma_m * gamma_m);
    let inv_gv2 = 1.0 / (gamma_v * gamma_v);
    let (hm, hv) = observable_grid(sys, grid);

    // Step-start references and innovations.
    let mut hbar_m = 0.0;
    let mut hbar_v = 0.0;
    for i in 0..m {
        let w = rho.rho[i] * h;
        hbar_m += w * hm[i];
        hbar_v += w * hv[i];
    }
    let innov_m = terms.dy_m[0] - (hbar_m + terms.h_m[0]) * dt;
    let innov_v = terms.dy_v[0] - (hbar_v + terms.h_v[0]) * dt;

    // Kernel action on the observables: u_c = C h_c h.
    let mut u_m = vec![0.0; m];
    let mut u_v = vec![0.0; m];
    for i in 0..m {
        let mut am = 0.0;
        let mut av = 0.0;
        for j in 0..m {
            am += kernel.c[(i, j)] * hm[j];
            av += kernel.c[(i, j)] * hv[j];
        }
        u_m[i] = am * h;
        u_v[i] = av * h;
    }

    // Riccati contraction rate = trace of the projected kernel over noise.
    let proj_mm: f64 = (0..m).map(|i| hm[i] * u_m[i]).sum::<f64>() * h;
    let proj_vv: f64 = (0..m).map(|i| hv[i] * u_v[i]).sum::<f64>() * h;
    let rate = inv_gm2 * proj_mm + inv_gv2 * proj_vv;
    if rate > 0.0 && dt * rate > 0.5 {
        return Err(Error::CflViolation { dt, dt_max: 0.5 / rate });
    }

    let mut rho_new = rho.rho.clone();
    let mut c_new = kernel.c.clone();

    if with_transport {
        let gen = fp_generator(sys, grid, stat, t);
        let dt_max = gen.max_step();
        if dt > dt_max {
            return Err(Error::CflViolation { dt, dt_max });
        }
        let mut rate_rho = vec![0.0; m];
        gen.apply(&rho.rho, &mut rate_rho);
        for i in 0..m {
            rho_new[i] += dt * rate_rho[i];
        }
        // Lyapunov term A C + (A C)^T, applying the generator column-wise.
        let mut ac = DMatrix::zeros(m, m);
        let mut col_in = vec![0.0; m];
        let mut col_out = vec![0.0; m];
        for j in 0..m {
            for i in 0..m {
                col_in[i] = kernel.c[(i, j)];
            }
            gen.apply(&col_in, &mut col_out);
            for i in 0..m {
                ac[(i, j)] = col_out[i];
            }
        }
        for i in 0..m {
            for j in 0..m {
                c_new[(i, j)] += dt * (ac[(i, j)] + ac[(j, i)]);
            }
        }
    }

    // Gain correction of the estimate.
    for i in 0..m {
        rho_new[i] += inv_gm2 * u_m[i] * innov_m + inv_gv2 * u_v[i] * innov_v;
    }

    // Riccati contraction of the kernel.
    for i in 0..m {
        for j in 0..m {
            c_new[(i, j)] -= dt * (inv_gm2 * u_m[i] * u_m[j] + inv_gv2 * u_v[i] * u_v[j]);
        }
    }

    check_finite(rho_new.iter().copied(), "grid density estimate", step, t)?;
    check_finite(c_new.iter().copied(), "covariance kernel", step, t)?;

    let mut kernel_new = GridCovKernel { c: c_new, last_asymmetry: 0.0 };
    kernel_new.symmetrize();
    Ok((GridDensity { rho: rho_new }, kernel_new))
}

/// Multiplicative analysis-only density update: each cell is reweighted by
/// `1 + sum_c Gamma_c^-2 (H_c(z) - hbar_c) innov_c`, then the density is
/// renormalized (the continuous update conserves mass; the discrete one only
/// to second order in `dt`). Steps large enough to drive any cell negative
/// are rejected.
pub fn ks_analysis_step(
    sys: &SpectralSystem,
    grid: &Grid1D,
    rho: &GridDensity,
    gamma_m: f64,
    gamma_v: f64,
    terms: &AnalysisTerms,
    dt: f64,
) -> Result<GridDensity> {
    if !(gamma_m > 0.0 && gamma_v > 0.0) {
        return Err(Error::Config(format!("observation noise levels must be positive, got ({gamma_m}, {gamma_v})")));
    }
    let m = grid.m;
    let h = grid.h;
    let inv_gm2 = 1.0 / (gamma_m * gamma_m);
    let inv_gv2 = 1.0 / (gamma_v * gamma_v);
    let (hm, hv) = observable_grid(sys, grid);
    let mut hbar_m = 0.0;
    let mut hbar_v = 0.0;
    for i in 0..m {
        let w = rho.rho[i] * h;
        hbar_m += w * hm[i];
        hbar_v += w * hv[i];
    }
    let innov_m = terms.dy_m[0] - (hbar_m + terms.h_m[0]) * dt;
    let innov_v = terms.dy_v[0] - (hbar_v + terms.h_v[0]) * dt;

    let mut worst = 0.0f64;
    let mut rho_new = vec![0.0; m];
    for i in 0..m {
        let w = inv_gm2 * (hm[i] - hbar_m) * innov_m + inv_gv2 * (hv[i] - hbar_v) * innov_v;
        worst = worst.max(-w);
        rho_new[i] = rho.rho[i] * (1.0 + w);
    }
    if worst >= 1.0 {
        // The reweighting factor scales linearly with dt through the
        // innovation, so dt/worst is the largest nonnegative step.
        return Err(Error::NegativeDensity { dt, dt_max: dt / worst });
    }
    let mass: f64 = rho_new.iter().sum::<f64>() * h;
    if (mass - 1.0).abs() > 1e-15 {
        for x in &mut rho_new {
            *x /= mass;
        }
    }
    Ok(GridDensity { rho: rho_new })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{ForcingSpec, NoiseSpec};
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    fn scalar_system(lambda: f64, gamma: f64, sigma: f64) -> SpectralSystem {
        SpectralSystem::new(
            1,
            1,
            vec![lambda],
            vec![gamma],
            ForcingSpec::zero(1),
            NoiseSpec::isotropic(1, sigma),
            false,
        )
        .unwrap()
    }

    fn rest_stat(cov: f64) -> StatState {
        StatState { mean: DVector::zeros(1), cov: nalgebra::DMatrix::from_element(1, 1, cov) }
    }

    fn zero_terms() -> AnalysisTerms {
        AnalysisTerms { dy_m: vec![0.0], dy_v: vec![0.0], h_m: vec![0.0], h_v: vec![0.0] }
    }

    #[test]
    fn zero_coefficients_leave_the_density_unchanged() {
        let sys = scalar_system(0.0, 0.0, 0.0);
        let grid = Grid1D::new(-4.0, 4.0, 64).unwrap();
        let rho = GridDensity::gaussian(&grid, 0.3, 0.5).unwrap();
        let out = fp_step(&sys, &grid, &rho, &rest_stat(1.0), 0.0, 0.1).unwrap();
        assert_eq!(out.rho, rho.rho);
    }

    #[test]
    fn transport_conserves_mass_and_relaxes_to_the_ou_stationary_variance() {
        let sys = scalar_system(-1.0, 0.0, std::f64::consts::SQRT_2);
        let grid = Grid1D::centered(0.0, 1.0, 256).unwrap();
        let mut rho = GridDensity::gaussian(&grid, 0.8, 0.25).unwrap();
        let stat = rest_stat(1.0);
        let dt = 5e-4;
        for step in 0..16_000 {
            rho = fp_step(&sys, &grid, &rho, &stat, step as f64 * dt, dt).unwrap();
        }
        assert!((rho.mass(&grid) - 1.0).abs() < 1e-12, "mass {}", rho.mass(&grid));
        assert!(rho.rho.iter().all(|&x| x >= 0.0));
        let mom = grid_moments(&sys, &grid, &rho);
        assert!(mom.mean.abs() < 1e-3, "mean {}", mom.mean);
        assert!((mom.var - 1.0).abs() < 1e-3, "var {}", mom.var);
    }

    #[test]
    fn pure_diffusion_grows_the_variance_linearly() {
        let sigma = 0.6;
        let sys = scalar_system(0.0, 0.0, sigma);
        let grid = Grid1D::new(-6.0, 6.0, 256).unwrap();
        let mut rho = GridDensity::gaussian(&grid, 0.0, 0.01).unwrap();
        let var0 = grid_moments(&sys, &grid, &rho).var;
        let stat = rest_stat(1.0);
        let dt = 5e-4;
        let t_end = 0.5;
        let steps = (t_end / dt) as usize;
        for step in 0..steps {
            rho = fp_step(&sys, &grid, &rho, &stat, step as f64 * dt, dt).unwrap();
        }
        let var = grid_moments(&sys, &grid, &rho).var;
        assert_relative_eq!(var - var0, sigma * sigma * t_end, max_relative = 5e-3);
    }

    #[test]
    fn oversized_transport_step_is_rejected() {
        let sys = scalar_system(-1.0, 0.0, std::f64::consts::SQRT_2);
        let grid = Grid1D::centered(0.0, 1.0, 256).unwrap();
        let rho = GridDensity::gaussian(&grid, 0.0, 1.0).unwrap();
        let err = fp_step(&sys, &grid, &rho, &rest_stat(1.0), 0.0, 1.0).unwrap_err();
        match err {
            Error::CflViolation { dt, dt_max } => {
                assert_eq!(dt, 1.0);
                assert!(dt_max > 0.0 && dt_max < 1.0, "dt_max {dt_max}");
            }
            other => panic!("expected CflViolation, got {other}"),
        }
    }

    #[test]
    fn uniform_and_point_mass_moments_match_closed_forms() {
        let sys = scalar_system(-1.0, 0.4, 0.5);
        let grid = Grid1D::new(-1.0, 1.0, 64).unwrap();
        let uniform = GridDensity::new(&grid, vec![1.0; 64]).unwrap();
        let mom = grid_moments(&sys, &grid, &uniform);
        assert!(mom.mean.abs() < 1e-12, "mean {}", mom.mean);
        // Midpoint quadrature of z^2 on a uniform grid has O(h^2) bias.
        assert_relative_eq!(mom.var, 1.0 / 3.0, epsilon = 1e-3);

        let mut hot = vec![0.0; 64];
        hot[40] = 1.0;
        let point = GridDensity::new(&grid, hot).unwrap();
        let z0 = grid.centers()[40];
        let mom = grid_moments(&sys, &grid, &point);
        assert_relative_eq!(mom.hbar_m, 0.4 * z0 * z0, epsilon = 1e-14);
        assert_relative_eq!(mom.hbar_v, 2.0 * 0.4 * z0 * z0 * z0, epsilon = 1e-14);
        assert!(mom.c_h.amax() < 1e-20);
    }

    #[test]
    fn initial_kernel_projection_reproduces_the_observable_covariance() {
        let sys = scalar_system(-2.0, 0.4, 0.5);
        let grid = Grid1D::centered(0.0, 0.6, 128).unwrap();
        let rho = GridDensity::gaussian(&grid, 0.0, 0.36).unwrap();
        let kernel = initial_kernel(&sys, &grid, &rho);
        let mom = grid_moments(&sys, &grid, &rho);
        let proj = kernel.projection(&sys, &grid);
        assert_relative_eq!(proj, mom.c_h, epsilon = 1e-10);
        // Symmetric, and mass-neutral row sums so the gain conserves mass.
        assert_relative_eq!(kernel.c.clone(), kernel.c.transpose(), epsilon = 1e-12);
        let h = grid.h;
        for j in 0..grid.m {
            let row: f64 = (0..grid.m).map(|i| kernel.c[(i, j)]).sum::<f64>() * h;
            assert!(row.abs() < 1e-9 * kernel.c.amax().max(1.0), "row sum {row}");
        }
    }

    #[test]
    fn huge_observation_noise_reduces_to_transport_with_lyapunov_kernel() {
        let sys = scalar_system(-2.0, 0.4, 0.5);
        let grid = Grid1D::centered(0.0, 0.6, 64).unwrap();
        let rho = GridDensity::gaussian(&grid, 0.0, 0.36).unwrap();
        let kernel = initial_kernel(&sys, &grid, &rho);
        let stat = rest_stat(0.36);
        let dt = 2e-4;
        let (rho_kb, kernel_kb) = kb_filter_step(
            &sys, &grid, &rho, &kernel, &stat, 1e8, 1e8, &zero_terms(), 0.0, dt, 0, true,
        )
        .unwrap();

        let rho_fp = fp_step(&sys, &grid, &rho, &stat, 0.0, dt).unwrap();
        let gap = rho_kb.rho.iter().zip(&rho_fp.rho).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
        assert!(gap < 1e-10, "density gap {gap}");

        // Kernel should match the pure Lyapunov update.
        let gen = fp_generator(&sys, &grid, &stat, 0.0);
        let mut ac = DMatrix::zeros(grid.m, grid.m);
        let mut col = vec![0.0; grid.m];
        let mut out = vec![0.0; grid.m];
        for j in 0..grid.m {
            for i in 0..grid.m {
                col[i] = kernel.c[(i, j)];
            }
            gen.apply(&col, &mut out);
            for i in 0..grid.m {
                ac[(i, j)] = out[i];
            }
        }
        let expected = &kernel.c + (&ac + ac.transpose()) * dt;
        let gap = (&kernel_kb.c - &expected).amax();
        assert!(gap < 1e-10, "kernel gap {gap}");
        assert!(kernel_kb.last_asymmetry < 1e-12);
    }

    #[test]
    fn riccati_projection_follows_the_scalar_closed_form() {
        // With transport off and the covariance channel made negligible, the
        // projected scalar p = h^2 hm^T C hm obeys p' = -p^2 / Gamma^2, so
        // p(t) = p0 / (1 + p0 t / Gamma^2).
        let sys = scalar_system(0.0, 0.4, 0.0);
        let grid = Grid1D::centered(0.0, 0.6, 64).unwrap();
        let rho = GridDensity::gaussian(&grid, 0.0, 0.36).unwrap();
        let (hm, _) = observable_grid(&sys, &grid);
        let norm4: f64 = hm.iter().map(|x| x * x).sum::<f64>().powi(2);
        let c0 = 1.0 / (grid.h * grid.h * norm4);
        let mut kernel = GridCovKernel {
            c: DMatrix::from_fn(grid.m, grid.m, |i, j| c0 * hm[i] * hm[j]),
            last_asymmetry: 0.0,
        };
        let mut rho_hat = rho.clone();
        let stat = rest_stat(0.36);
        let gamma = 1.0;
        let dt = 1e-4;
        let steps = 2000;
        for step in 0..steps {
            let (r, k) = kb_filter_step(
                &sys, &grid, &rho_hat, &kernel, &stat, gamma, 1e9, &zero_terms(),
                step as f64 * dt, dt, step, false,
            )
            .unwrap();
            rho_hat = r;
            kernel = k;
        }
        let t = steps as f64 * dt;
        let p = kernel.projection(&sys, &grid)[(0, 0)];
        let expected = 1.0 / (1.0 + t);
        assert_relative_eq!(p, expected, epsilon = 1e-3);
    }

    #[test]
    fn analysis_reweighting_with_zero_innovation_is_the_identity() {
        let sys = scalar_system(-2.0, 0.4, 0.5);
        let grid = Grid1D::centered(0.0, 0.6, 64).unwrap();
        let rho = GridDensity::gaussian(&grid, 0.0, 0.36).unwrap();
        let mom = grid_moments(&sys, &grid, &rho);
        let dt = 1e-3;
        let terms = AnalysisTerms {
            dy_m: vec![mom.hbar_m * dt],
            dy_v: vec![mom.hbar_v * dt],
            h_m: vec![0.0],
            h_v: vec![0.0],
        };
        let out = ks_analysis_step(&sys, &grid, &rho, 1.0, 1.0, &terms, dt).unwrap();
        assert_eq!(out.rho, rho.rho);
    }

    #[test]
    fn analysis_reweighting_keeps_unit_mass_and_rejects_negative_factors() {
        let sys = scalar_system(-2.0, 0.4, 0.5);
        let grid = Grid1D::centered(0.0, 0.6, 64).unwrap();
        let rho = GridDensity::gaussian(&grid, 0.1, 0.36).unwrap();
        let dt = 1e-3;
        let terms = AnalysisTerms { dy_m: vec![0.3 * dt], dy_v: vec![-0.1 * dt], h_m: vec![0.0], h_v: vec![0.0] };
        let out = ks_analysis_step(&sys, &grid, &rho, 0.8, 0.8, &terms, dt).unwrap();
        assert!((out.mass(&grid) - 1.0).abs() < 1e-12);
        assert!(out.rho != rho.rho, "innovation should move the density");

        // A huge innovation drives tail cells negative.
        let wild = AnalysisTerms { dy_m: vec![50.0], dy_v: vec![0.0], h_m: vec![0.0], h_v: vec![0.0] };
        let err = ks_analysis_step(&sys, &grid, &rho, 0.8, 0.8, &wild, dt).unwrap_err();
        match err {
            Error::NegativeDensity { dt: got, dt_max } => {
                assert_eq!(got, dt);
                assert!(dt_max > 0.0 && dt_max < dt);
            }
            other => panic!("expected NegativeDensity, got {other}"),
        }
    }

    #[test]
    fn kb_and_ks_observable_tracks_agree_in_the_analysis_only_setting() {
        // Same observation stream into both analysis-only updates; their
        // projected observable means should track each other to the accuracy
        // the neglected third moments allow. The third-moment size q_h is
        // asserted small enough to make the frozen tolerance meaningful.
        let sys = scalar_system(-2.0, 0.4, 0.5);
        let grid = Grid1D::centered(0.0, 0.6, 128).unwrap();
        let rho0 = GridDensity::gaussian(&grid, 0.0, 0.36).unwrap();
        let mut rho_ks = rho0.clone();
        let mut rho_kb = rho0.clone();
        let mut kernel = initial_kernel(&sys, &grid, &rho0);
        let gamma = 2.0;
        let dt = 1e-3;
        let mut sup_gap = 0.0f64;
        let mut max_qh = 0.0f64;
        for step in 0..200 {
            // Constant synthetic observation drift pulling the mean channel.
            let terms = AnalysisTerms { dy_m: vec![0.3 * dt], dy_v: vec![0.05 * dt], h_m: vec![0.0], h_v: vec![0.0] };
            rho_ks = ks_analysis_step(&sys, &grid, &rho_ks, gamma, gamma, &terms, dt).unwrap();
            let (r, k) = kb_filter_step(
                &sys, &grid, &rho_kb, &kernel, &rest_stat(0.36), gamma, gamma, &terms,
                step as f64 * dt, dt, step, false,
            )
            .unwrap();
            rho_kb = r;
            kernel = k;
            let mom_ks = grid_moments(&sys, &grid, &rho_ks);
            let mom_kb = grid_moments(&sys, &grid, &rho_kb);
            sup_gap = sup_gap.max((mom_ks.hbar_m - mom_kb.hbar_m).abs());
            max_qh = max_qh.max(mom_ks.q_h);
        }
        assert!(max_qh < 0.5, "third central observable moment {max_qh}");
        assert!(sup_gap < 5e-3, "sup |Hm gap| {sup_gap} (q_h {max_qh})");
    }
}
