//! Ensemble moment reductions.
//!
//! All statistics the dynamics feed on (means, covariances, observable
//! moments) are computed with a fixed-shape pairwise summation tree: leaves
//! of a fixed size are folded sequentially in index order and merged up a
//! binary tree whose shape depends only on the particle count. Subtrees above
//! a cutoff run on rayon, but the tree — and therefore every rounding — is
//! identical for any worker count. The `deterministic = false` escape hatch
//! trades that guarantee for rayon's unordered reduction.
//!
//! Covariances use divisor `N` (not `N - 1`): the same normalization the
//! coupled statistical equations assume for their ensemble feedback terms.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::ensemble::Ensemble;
use crate::spectral::{SpectralSystem, StatState};

/// Sequential fold block size (fixed: part of the summation tree's shape).
const LEAF: usize = 512;
/// Minimum range length that is split across rayon workers.
const PAR_CUTOFF: usize = 2048;

/// Fold items `range` into accumulators along a fixed pairwise tree.
pub fn pairwise_reduce<A, I, F, M>(len: usize, deterministic: bool, init: &I, fold: &F, merge: &M) -> A
where
    A: Send,
    I: Fn() -> A + Sync,
    F: Fn(&mut A, usize) + Sync,
    M: Fn(&mut A, A) + Sync,
{
    if deterministic {
        reduce_range(0..len, init, fold, merge)
    } else {
        (0..len)
            .into_par_iter()
            .fold(init, |mut acc, i| {
                fold(&mut acc, i);
                acc
            })
            .reduce(init, |mut a, b| {
                merge(&mut a, b);
                a
            })
    }
}

fn reduce_range<A, I, F, M>(range: std::ops::Range<usize>, init: &I, fold: &F, merge: &M) -> A
where
    A: Send,
    I: Fn() -> A + Sync,
    F: Fn(&mut A, usize) + Sync,
    M: Fn(&mut A, A) + Sync,
{
    let len = range.end - range.start;
    if len <= LEAF {
        let mut acc = init();
        for i in range {
            fold(&mut acc, i);
        }
        return acc;
    }
    let mid = range.start + len / 2;
    let (mut left, right) = if len >= PAR_CUTOFF {
        rayon::join(
            || reduce_range(range.start..mid, init, fold, merge),
            || reduce_range(mid..range.end, init, fold, merge),
        )
    } else {
        (
            reduce_range(range.start..mid, init, fold, merge),
            reduce_range(mid..range.end, init, fold, merge),
        )
    };
    merge(&mut left, right);
    left
}

fn merge_vecs(a: &mut Vec<f64>, b: Vec<f64>) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// Empirical mean and covariance (divisor `N`), two-pass.
pub fn mean_cov(ens: &Ensemble, deterministic: bool) -> StatState {
    let d = ens.dim();
    let n = ens.len();
    let inv = 1.0 / n as f64;

    let sums = pairwise_reduce(
        n,
        deterministic,
        &|| vec![0.0; d],
        &|acc: &mut Vec<f64>, i| {
            for (a, z) in acc.iter_mut().zip(ens.particle(i)) {
                *a += z;
            }
        },
        &merge_vecs,
    );
    let mean = DVector::from_iterator(d, sums.iter().map(|s| s * inv));

    let m = mean.clone();
    let cov_sums = pairwise_reduce(
        n,
        deterministic,
        &|| vec![0.0; d * d],
        &|acc: &mut Vec<f64>, i| {
            let z = ens.particle(i);
            for a in 0..d {
                let za = z[a] - m[a];
                for b in 0..d {
                    acc[a * d + b] += za * (z[b] - m[b]);
                }
            }
        },
        &merge_vecs,
    );
    let cov = DMatrix::from_fn(d, d, |a, b| cov_sums[a * d + b] * inv);
    StatState { mean, cov }
}

/// The three ensemble moments the coupled statistical equations consume each
/// step: `qm = E_N[Hm(Z)]`, `qv = E_N[Hv(Z)]`, `zz = E_N[Z Z^T]`.
#[derive(Clone, Debug)]
pub struct Feedbacks {
    pub qm: DVector<f64>,
    pub qv: DMatrix<f64>,
    pub zz: DMatrix<f64>,
}

struct FeedbackAcc {
    /// `[qm (d) | qv (d^2) | zz (d^2)]` running sums.
    sums: Vec<f64>,
    /// Scratch for `Hm(z)`; excluded from merges.
    hm: Vec<f64>,
}

/// Ensemble feedbacks in a single deterministic pass.
pub fn feedbacks(sys: &SpectralSystem, ens: &Ensemble, deterministic: bool) -> Feedbacks {
    let d = sys.dim();
    let n = ens.len();
    let inv = 1.0 / n as f64;
    let acc = pairwise_reduce(
        n,
        deterministic,
        &|| FeedbackAcc { sums: vec![0.0; d + 2 * d * d], hm: vec![0.0; d] },
        &|acc: &mut FeedbackAcc, i| {
            let z = ens.particle(i);
            sys.obs_mean_into(z, &mut acc.hm);
            let (qm, rest) = acc.sums.split_at_mut(d);
            let (qv, zz) = rest.split_at_mut(d * d);
            for k in 0..d {
                qm[k] += acc.hm[k];
            }
            for k in 0..d {
                let (hk, zk) = (acc.hm[k], z[k]);
                for l in 0..d {
                    qv[k * d + l] += hk * z[l] + zk * acc.hm[l];
                    zz[k * d + l] += zk * z[l];
                }
            }
        },
        &|a: &mut FeedbackAcc, b: FeedbackAcc| merge_vecs(&mut a.sums, b.sums),
    );
    let qm = DVector::from_iterator(d, acc.sums[..d].iter().map(|s| s * inv));
    let qv = DMatrix::from_fn(d, d, |k, l| acc.sums[d + k * d + l] * inv);
    let zz = DMatrix::from_fn(d, d, |k, l| acc.sums[d + d * d + k * d + l] * inv);
    Feedbacks { qm, qv, zz }
}

/// Centered moment tensor of order 3 or 4 (dense, `d^order` entries indexed
/// with the last index fastest).
pub fn higher_moments(ens: &Ensemble, mean: &DVector<f64>, order: usize, deterministic: bool) -> Vec<f64> {
    assert!(order == 3 || order == 4, "only orders 3 and 4 are supported");
    let d = ens.dim();
    let n = ens.len();
    let inv = 1.0 / n as f64;
    let size = d.pow(order as u32);
    let m = mean.clone();
    let sums = pairwise_reduce(
        n,
        deterministic,
        &|| vec![0.0; size],
        &|acc: &mut Vec<f64>, i| {
            let z = ens.particle(i);
            let c: Vec<f64> = (0..d).map(|a| z[a] - m[a]).collect();
            if order == 3 {
                let mut idx = 0;
                for a in 0..d {
                    for b in 0..d {
                        let ab = c[a] * c[b];
                        for e in 0..d {
                            acc[idx] += ab * c[e];
                            idx += 1;
                        }
                    }
                }
            } else {
                let mut idx = 0;
                for a in 0..d {
                    for b in 0..d {
                        let ab = c[a] * c[b];
                        for e in 0..d {
                            let abe = ab * c[e];
                            for f in 0..d {
                                acc[idx] += abe * c[f];
                                idx += 1;
                            }
                        }
                    }
                }
            }
        },
        &merge_vecs,
    );
    sums.into_iter().map(|s| s * inv).collect()
}

/// Marginal skewness and kurtosis per component (kurtosis is the raw fourth
/// standardized moment: 3 for a Gaussian). Degenerate components with zero
/// variance report zero skewness and kurtosis.
pub fn marginal_shape(ens: &Ensemble, st: &StatState, deterministic: bool) -> (DVector<f64>, DVector<f64>) {
    let d = ens.dim();
    let n = ens.len();
    let inv = 1.0 / n as f64;
    let m = st.mean.clone();
    let sums = pairwise_reduce(
        n,
        deterministic,
        &|| vec![0.0; 2 * d],
        &|acc: &mut Vec<f64>, i| {
            let z = ens.particle(i);
            for a in 0..d {
                let c = z[a] - m[a];
                let c2 = c * c;
                acc[a] += c2 * c;
                acc[d + a] += c2 * c2;
            }
        },
        &merge_vecs,
    );
    let mut skew = DVector::zeros(d);
    let mut kurt = DVector::zeros(d);
    for a in 0..d {
        let var = st.cov[(a, a)];
        if var > 0.0 {
            skew[a] = sums[a] * inv / var.powf(1.5);
            kurt[a] = sums[d + a] * inv / (var * var);
        }
    }
    (skew, kurt)
}

/// Centered empirical moment tensor of the given order (3 or 4), flattened
/// with the last index fastest (`d^order` entries):
/// `T[i...j] = E_N[(z_i - m_i) ... (z_j - m_j)]`.
pub fn central_moment_tensor(
    ens: &Ensemble,
    st: &StatState,
    order: usize,
    deterministic: bool,
) -> crate::error::Result<Vec<f64>> {
    if order != 3 && order != 4 {
        return Err(crate::error::Error::Config(format!("moment tensor order must be 3 or 4, got {order}")));
    }
    let d = ens.dim();
    let n = ens.len();
    let inv = 1.0 / n as f64;
    let m = st.mean.clone();
    let len = d.pow(order as u32);
    let sums = pairwise_reduce(
        n,
        deterministic,
        &|| vec![0.0; len + d],
        &|acc: &mut Vec<f64>, i| {
            let z = ens.particle(i);
            let (tensor, c) = acc.split_at_mut(len);
            for a in 0..d {
                c[a] = z[a] - m[a];
            }
            match order {
                3 => {
                    for a in 0..d {
                        for b in 0..d {
                            let ab = c[a] * c[b];
                            let row = (a * d + b) * d;
                            for e in 0..d {
                                tensor[row + e] += ab * c[e];
                            }
                        }
                    }
                }
                _ => {
                    for a in 0..d {
                        for b in 0..d {
                            let ab = c[a] * c[b];
                            for e in 0..d {
                                let abe = ab * c[e];
                                let row = ((a * d + b) * d + e) * d;
                                for f in 0..d {
                                    tensor[row + f] += abe * c[f];
                                }
                            }
                        }
                    }
                }
            }
        },
        &merge_vecs,
    );
    Ok(sums[..len].iter().map(|s| s * inv).collect())
}

/// Moments of the stacked observable `H(z) = [Hm(z) | Hv(z) row-major]`
/// (dimension `p = d + d^2`): ensemble mean, central covariance, and
/// optionally the central third-moment tensor (`p^3`, last index fastest).
#[derive(Clone, Debug)]
pub struct HStats {
    pub hbar: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub third: Option<Vec<f64>>,
}

struct HAcc {
    sums: Vec<f64>,
    hm: Vec<f64>,
    h: Vec<f64>,
}

fn fill_h(sys: &SpectralSystem, z: &[f64], hm: &mut [f64], h: &mut [f64]) {
    let d = sys.dim();
    sys.obs_mean_into(z, hm);
    h[..d].copy_from_slice(hm);
    sys.obs_cov_into(z, hm, &mut h[d..]);
}

/// Observable moments over the ensemble.
pub fn h_stats(sys: &SpectralSystem, ens: &Ensemble, with_third: bool, deterministic: bool) -> HStats {
    let d = sys.dim();
    let p = sys.obs_dim();
    let n = ens.len();
    let inv = 1.0 / n as f64;

    let acc = pairwise_reduce(
        n,
        deterministic,
        &|| HAcc { sums: vec![0.0; p], hm: vec![0.0; d], h: vec![0.0; p] },
        &|acc: &mut HAcc, i| {
            fill_h(sys, ens.particle(i), &mut acc.hm, &mut acc.h);
            for (s, v) in acc.sums.iter_mut().zip(&acc.h) {
                *s += v;
            }
        },
        &|a: &mut HAcc, b: HAcc| merge_vecs(&mut a.sums, b.sums),
    );
    let hbar = DVector::from_iterator(p, acc.sums.iter().map(|s| s * inv));

    let hb = hbar.clone();
    let block = if with_third { p * p + p * p * p } else { p * p };
    let acc = pairwise_reduce(
        n,
        deterministic,
        &|| HAcc { sums: vec![0.0; block], hm: vec![0.0; d], h: vec![0.0; p] },
        &|acc: &mut HAcc, i| {
            fill_h(sys, ens.particle(i), &mut acc.hm, &mut acc.h);
            for a in 0..p {
                acc.h[a] -= hb[a];
            }
            for a in 0..p {
                let ha = acc.h[a];
                for b in 0..p {
                    acc.sums[a * p + b] += ha * acc.h[b];
                }
            }
            if with_third {
                let base = p * p;
                let mut idx = base;
                for a in 0..p {
                    for b in 0..p {
                        let ab = acc.h[a] * acc.h[b];
                        for e in 0..p {
                            acc.sums[idx] += ab * acc.h[e];
                            idx += 1;
                        }
                    }
                }
            }
        },
        &|a: &mut HAcc, b: HAcc| merge_vecs(&mut a.sums, b.sums),
    );
    let cov = DMatrix::from_fn(p, p, |a, b| acc.sums[a * p + b] * inv);
    let third = with_third.then(|| acc.sums[p * p..].iter().map(|s| s * inv).collect());
    HStats { hbar, cov, third }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{init_gaussian, InitPairing};
    use crate::spectral::{ForcingSpec, NoiseSpec, SpectralSystem};
    use approx::assert_relative_eq;

    fn small_ensemble() -> Ensemble {
        let mut ens = Ensemble::zeros(2, 4);
        let pts = [[1.0, 2.0], [-1.0, 0.5], [0.25, -2.0], [3.0, 0.0]];
        for (i, p) in pts.iter().enumerate() {
            ens.particle_mut(i).copy_from_slice(p);
        }
        ens
    }

    /// Straight two-pass reference, no tree.
    fn naive_mean_cov(ens: &Ensemble) -> StatState {
        let (d, n) = (ens.dim(), ens.len());
        let mut mean = DVector::zeros(d);
        for p in ens.particles() {
            for a in 0..d {
                mean[a] += p[a];
            }
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for p in ens.particles() {
            for a in 0..d {
                for b in 0..d {
                    cov[(a, b)] += (p[a] - mean[a]) * (p[b] - mean[b]);
                }
            }
        }
        cov /= n as f64;
        StatState { mean, cov }
    }

    #[test]
    fn mean_cov_matches_naive_two_pass() {
        let ens = small_ensemble();
        let st = mean_cov(&ens, true);
        let nv = naive_mean_cov(&ens);
        assert_relative_eq!(st.mean, nv.mean, epsilon = 1e-15);
        assert_relative_eq!(st.cov, nv.cov, epsilon = 1e-15);
    }

    #[test]
    fn tree_reduction_is_thread_count_invariant() {
        // Same tree on a single-thread pool and on the default pool.
        let mean = DVector::zeros(3);
        let cov = DMatrix::identity(3, 3);
        let ens = init_gaussian(&mean, &cov, 10_000, 3, InitPairing::Iid).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let st1 = pool.install(|| mean_cov(&ens, true));
        let st2 = mean_cov(&ens, true);
        assert_eq!(st1.mean.as_slice(), st2.mean.as_slice());
        assert_eq!(st1.cov.as_slice(), st2.cov.as_slice());
    }

    #[test]
    fn feedbacks_match_direct_loops() {
        let sys = SpectralSystem::new(
            2,
            1,
            vec![0.0; 4],
            vec![0.3, -0.1, 0.7, 0.2, 0.05, 0.4, -0.6, 0.9],
            ForcingSpec::zero(2),
            NoiseSpec::Constant { sigma: vec![1.0, 0.0] },
            false,
        )
        .unwrap();
        let ens = small_ensemble();
        let fb = feedbacks(&sys, &ens, true);
        let n = ens.len() as f64;
        let mut qm = DVector::zeros(2);
        let mut qv = DMatrix::zeros(2, 2);
        let mut zz = DMatrix::zeros(2, 2);
        for p in ens.particles() {
            let z = DVector::from_column_slice(p);
            qm += sys.obs_mean(&z);
            qv += sys.obs_cov(&z);
            zz += &z * z.transpose();
        }
        assert_relative_eq!(fb.qm, qm / n, epsilon = 1e-14);
        assert_relative_eq!(fb.qv, qv / n, epsilon = 1e-14);
        assert_relative_eq!(fb.zz, zz / n, epsilon = 1e-14);
    }

    #[test]
    fn gaussian_cloud_has_kurtosis_three() {
        let mean = DVector::from_column_slice(&[0.0]);
        let cov = DMatrix::from_element(1, 1, 2.0);
        let n = 100_000;
        let ens = init_gaussian(&mean, &cov, n, 17, InitPairing::Iid).unwrap();
        let st = mean_cov(&ens, true);
        let (skew, kurt) = marginal_shape(&ens, &st, true);
        // Standard errors: sqrt(6/N) for skewness, sqrt(24/N) for kurtosis.
        let se_skew = (6.0 / n as f64).sqrt();
        let se_kurt = (24.0 / n as f64).sqrt();
        assert!(skew[0].abs() < 5.0 * se_skew, "skew {} exceeds 5 se {}", skew[0], se_skew);
        assert!((kurt[0] - 3.0).abs() < 5.0 * se_kurt, "kurt {} exceeds 5 se {}", kurt[0], se_kurt);
    }

    #[test]
    fn higher_moment_tensor_matches_marginals() {
        let mean = DVector::zeros(2);
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
        let ens = init_gaussian(&mean, &cov, 4096, 23, InitPairing::Iid).unwrap();
        let st = mean_cov(&ens, true);
        let t3 = higher_moments(&ens, &st.mean, 3, true);
        let t4 = higher_moments(&ens, &st.mean, 4, true);
        let (skew, kurt) = marginal_shape(&ens, &st, true);
        for a in 0..2 {
            let var = st.cov[(a, a)];
            let diag3 = t3[a * 4 + a * 2 + a];
            let diag4 = t4[a * 8 + a * 4 + a * 2 + a];
            assert_relative_eq!(diag3 / var.powf(1.5), skew[a], epsilon = 1e-12);
            assert_relative_eq!(diag4 / (var * var), kurt[a], epsilon = 1e-12);
        }
    }

    #[test]
    fn h_stats_cov_is_psd_and_consistent_with_feedbacks() {
        let sys = SpectralSystem::new(
            1,
            1,
            vec![-1.0],
            vec![0.8],
            ForcingSpec::zero(1),
            NoiseSpec::Constant { sigma: vec![1.0] },
            false,
        )
        .unwrap();
        let mean = DVector::zeros(1);
        let cov = DMatrix::from_element(1, 1, 1.0);
        let ens = init_gaussian(&mean, &cov, 2048, 5, InitPairing::Antithetic).unwrap();
        let hs = h_stats(&sys, &ens, true, true);
        let fb = feedbacks(&sys, &ens, true);
        // The H-mean blocks are exactly the feedbacks.
        assert_relative_eq!(hs.hbar[0], fb.qm[0], epsilon = 1e-13);
        assert_relative_eq!(hs.hbar[1], fb.qv[(0, 0)], epsilon = 1e-13);
        let eig = nalgebra::SymmetricEigen::new(hs.cov.clone());
        let lmax = eig.eigenvalues.iter().fold(0.0f64, |a, &l| a.max(l.abs()));
        assert!(eig.eigenvalues.iter().all(|&l| l > -1e-12 * lmax));
        // Third central moment sanity: symmetric under index permutations.
        let t = hs.third.unwrap();
        let p = 2;
        for a in 0..p {
            for b in 0..p {
                for c in 0..p {
                    let x = t[(a * p + b) * p + c];
                    let y = t[(b * p + c) * p + a];
                    assert_relative_eq!(x, y, epsilon = 1e-10, max_relative = 1e-10);
                }
            }
        }
    }

    #[test]
    fn central_moment_tensor_trivial_clouds() {
        // Symmetric two-point cloud {+1, -1}: every odd moment vanishes.
        let mut ens = Ensemble::zeros(1, 2);
        ens.particle_mut(0)[0] = 1.0;
        ens.particle_mut(1)[0] = -1.0;
        let st = mean_cov(&ens, true);
        let t3 = central_moment_tensor(&ens, &st, 3, true).unwrap();
        assert_eq!(t3.len(), 1);
        assert!(t3[0].abs() < 1e-15);
        let t4 = central_moment_tensor(&ens, &st, 4, true).unwrap();
        assert_relative_eq!(t4[0], 1.0, epsilon = 1e-15);

        // Constant cloud: all centered moments are zero.
        let mut ens = Ensemble::zeros(2, 4);
        for i in 0..4 {
            ens.particle_mut(i).copy_from_slice(&[0.7, -1.3]);
        }
        let st = mean_cov(&ens, true);
        for order in [3, 4] {
            let t = central_moment_tensor(&ens, &st, order, true).unwrap();
            assert!(t.iter().all(|x| x.abs() < 1e-15));
        }

        assert!(central_moment_tensor(&ens, &st, 5, true).is_err());
    }

    #[test]
    fn central_moment_tensor_matches_naive_loop_and_marginal_shape() {
        let mean = DVector::from_column_slice(&[0.3, -0.5, 1.1]);
        let cov = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.2, 0.8, -0.1, 0.0, -0.1, 0.5]);
        let ens = init_gaussian(&mean, &cov, 600, 17, InitPairing::Iid).unwrap();
        let st = mean_cov(&ens, true);
        let d = 3;
        let t3 = central_moment_tensor(&ens, &st, 3, true).unwrap();
        let t4 = central_moment_tensor(&ens, &st, 4, true).unwrap();

        // Naive reference: accumulate one entry at a time.
        let naive = |idx: &[usize]| -> f64 {
            let mut acc = 0.0;
            for p in ens.particles() {
                let mut term = 1.0;
                for &i in idx {
                    term *= p[i] - st.mean[i];
                }
                acc += term;
            }
            acc / ens.len() as f64
        };
        for a in 0..d {
            for b in 0..d {
                for c in 0..d {
                    assert_relative_eq!(t3[(a * d + b) * d + c], naive(&[a, b, c]), epsilon = 1e-12, max_relative = 1e-9);
                    for e in 0..d {
                        assert_relative_eq!(
                            t4[((a * d + b) * d + c) * d + e],
                            naive(&[a, b, c, e]),
                            epsilon = 1e-12,
                            max_relative = 1e-9
                        );
                    }
                }
            }
        }

        // Diagonal entries reproduce the marginal skewness/kurtosis.
        let (skew, kurt) = marginal_shape(&ens, &st, true);
        for a in 0..d {
            let var = st.cov[(a, a)];
            assert_relative_eq!(t3[(a * d + a) * d + a] / var.powf(1.5), skew[a], max_relative = 1e-9);
            assert_relative_eq!(t4[((a * d + a) * d + a) * d + a] / (var * var), kurt[a], max_relative = 1e-9);
        }
    }
}
