//! Numerical laboratory for a coupled stochastic-statistical closure of
//! quadratic spectral systems and an ensemble statistical filter that
//! assimilates aggregate mean and covariance observations.
//!
//! The model splits a turbulent state into a resolved statistical mean and
//! covariance plus an ensemble of mean-zero fluctuation particles. Particles
//! feel the mean-conditional linear dynamics; the statistics feel ensemble
//! feedbacks of the quadratic interaction observables. Filtering perturbs
//! the same particles with McKean-Vlasov-type gains built from those
//! observables, so the assimilated statistics stay consistent with the
//! forecast closure.
//!
//! Module map:
//!
//! * [`spectral`] — quadratic system definitions, observables, statistics.
//! * [`ensemble`], [`rng`], [`moments`] — particle clouds, reproducible
//!   noise streams, thread-count-invariant reductions.
//! * [`closure`], [`truth`] — coupled forecast stepping and truth runs.
//! * [`obs`] — synthetic aggregate observations on uniform grids.
//! * [`gain`], [`filter`] — observable gains/drift and the filter loop.
//! * [`fp1d`] — d=1 grid reference: Fokker-Planck transport plus a
//!   Kalman-Bucy covariance-kernel filter.
//! * [`io`] — CSV/NDJSON series and run manifests.
//! * [`lab`] — builtin systems, twin experiments, convergence sweeps.

pub mod closure;
pub mod ensemble;
pub mod error;
pub mod filter;
pub mod fp1d;
pub mod gain;
pub mod io;
pub mod lab;
pub mod moments;
pub mod obs;
pub mod rng;
pub mod spectral;
pub mod truth;

pub use error::{Error, Result};
