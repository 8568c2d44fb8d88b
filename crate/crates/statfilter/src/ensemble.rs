//! Particle ensemble storage and Gaussian initialization.
//!
//! Particles are kept in one flat buffer (particle-major), which keeps the
//! per-step loops cache-friendly and lets rayon hand out disjoint blocks of
//! whole particles. Initialization can draw antithetic pairs `(x, -x)` about
//! the mean so the empirical ensemble mean equals the requested mean exactly
//! at `t = 0`.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{self, Channel};

/// A cloud of `n` particles in `R^d`.
#[derive(Clone, Debug)]
pub struct Ensemble {
    d: usize,
    data: Vec<f64>,
}

impl Ensemble {
    /// All-zeros ensemble.
    pub fn zeros(d: usize, n: usize) -> Self {
        Ensemble { d, data: vec![0.0; d * n] }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn particle_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.d..(i + 1) * self.d]
    }

    /// Iterate particles in index order.
    pub fn particles(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.d)
    }

    /// Raw buffer (particle-major).
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Raw mutable buffer (particle-major).
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Largest absolute component over the whole cloud.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |a, &x| a.max(x.abs()))
    }
}

/// Symmetric PSD square root via eigendecomposition (tolerates zero modes,
/// unlike a Cholesky factor).
pub fn psd_sqrt(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = cov.nrows();
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, &l| a.max(l.abs()));
    let mut roots = DVector::zeros(d);
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        if l < -1e-10 * scale.max(1.0) {
            return Err(Error::Config(format!("initial covariance has negative eigenvalue {l:e}")));
        }
        roots[i] = l.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// How initial samples are paired.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPairing {
    /// Independent draws.
    Iid,
    /// Antithetic pairs `mean +/- B xi`; requires an even particle count and
    /// makes the empirical mean exact at initialization.
    Antithetic,
}

/// Draw an ensemble from `N(mean, cov)`. Each particle's draw comes from its
/// own dynamics stream, so initialization is reproducible particle-by-particle
/// regardless of thread count. Antithetic pairs `(2i, 2i+1)` share the draw
/// of particle `2i`.
pub fn init_gaussian(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    n: usize,
    seed: u64,
    pairing: InitPairing,
) -> Result<Ensemble> {
    let d = mean.len();
    if cov.nrows() != d || cov.ncols() != d {
        return Err(Error::Config(format!("covariance is {}x{}, expected {d}x{d}", cov.nrows(), cov.ncols())));
    }
    if n < 2 {
        return Err(Error::Config(format!("ensemble needs at least 2 particles, got {n}")));
    }
    if pairing == InitPairing::Antithetic && n % 2 != 0 {
        return Err(Error::Config(format!("antithetic initialization needs an even particle count, got {n}")));
    }
    let b = psd_sqrt(cov)?;
    let mut ens = Ensemble::zeros(d, n);
    let mut xi = DVector::zeros(d);
    let gaussian = |rng: &mut ChaCha8Rng, xi: &mut DVector<f64>| -> DVector<f64> {
        rng::fill_standard_normal(rng, xi.as_mut_slice());
        &b * &*xi
    };
    match pairing {
        InitPairing::Iid => {
            for i in 0..n {
                let mut rng = rng::particle_rng(seed, i as u64, Channel::Dynamics);
                let x = gaussian(&mut rng, &mut xi);
                for c in 0..d {
                    ens.particle_mut(i)[c] = mean[c] + x[c];
                }
            }
        }
        InitPairing::Antithetic => {
            for pair in 0..n / 2 {
                let i = 2 * pair;
                let mut rng = rng::particle_rng(seed, i as u64, Channel::Dynamics);
                let x = gaussian(&mut rng, &mut xi);
                for c in 0..d {
                    ens.particle_mut(i)[c] = mean[c] + x[c];
                    ens.particle_mut(i + 1)[c] = mean[c] - x[c];
                }
            }
        }
    }
    Ok(ens)
}
