//! Variance components by sample splitting.
//!
//! With `beta` fitted on one half of the clusters and residuals `r_i` taken
//! on the other half, the noise variance is the pooled residual variance
//! outside the column span of each `Z^i`, and `eta` solves a weighted
//! least-squares match of `r_i r_i^T` to `Z^i Psi_eta Z^i^T + sigma2 I`.
//! Cross-fitting swaps the halves and averages.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{QlmmError, Result};
use crate::lasso::{lasso_fit, LassoOptions};
use crate::model::{Basis, Cluster, ClusteredDataset};
use crate::proxy::{build_whitener, transform_dataset, ClusterFactor};

const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub first: Vec<usize>,
    pub second: Vec<usize>,
    pub seed: u64,
}

impl SplitPlan {
    pub fn swapped(&self) -> Self {
        Self {
            first: self.second.clone(),
            second: self.first.clone(),
            seed: self.seed,
        }
    }
}

/// One direction of the split: `beta` from `beta_fold`, moments on `est_fold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionalEstimate {
    pub est_fold: Vec<usize>,
    pub sigma2_e: f64,
    pub eta: Vec<f64>,
    pub residual_dof: f64,
    pub normal_eq_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarCompFit {
    pub sigma2_e_hat: f64,
    pub eta_hat: Vec<f64>,
    /// Row-major `q x q`, equal to `sum_j eta_hat_j G_j`.
    pub psi_hat: Vec<Vec<f64>>,
    /// Nearest PSD matrix to `psi_hat`, when requested.
    pub psi_hat_psd: Option<Vec<Vec<f64>>>,
    /// Set when the averaged noise variance was negative and clamped to 0.
    pub sigma2_clamped: bool,
    /// `None` for [`SplitMode::FullSample`].
    pub split: Option<SplitPlan>,
    pub mode: SplitMode,
    pub directions: Vec<DirectionalEstimate>,
    pub design_min_eig: f64,
    pub design_condition: f64,
}

impl VarCompFit {
    pub fn psi_matrix(&self) -> DMatrix<f64> {
        let q = self.psi_hat.len();
        DMatrix::from_fn(q, q, |r, c| self.psi_hat[r][c])
    }
}

/// How `beta` and the moment residuals share the clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Both directions of a random half split, averaged.
    #[default]
    CrossFit,
    /// `beta` on the second half, moments on the first.
    SingleSplit,
    /// `beta` and moments on all clusters.
    FullSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarCompOptions {
    pub seed: u64,
    pub mode: SplitMode,
    /// Fit used for `beta` on the held-in half.
    pub lasso: LassoOptions,
    pub project_psd: bool,
    /// Minimum eigenvalue of `D_G` below which the basis counts as dependent.
    pub basis_tol: f64,
}

impl Default for VarCompOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: SplitMode::CrossFit,
            lasso: LassoOptions::default(),
            project_psd: false,
            basis_tol: 1e-10,
        }
    }
}

/// Uniformly random balanced split of the clusters into two halves.
pub fn split_clusters(dataset: &ClusteredDataset, seed: u64) -> Result<SplitPlan> {
    let n = dataset.n_clusters();
    if n < 2 {
        return Err(QlmmError::InvalidArgument(format!(
            "sample splitting needs at least 2 clusters, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut first = order[..n / 2].to_vec();
    let mut second = order[n / 2..].to_vec();
    first.sort_unstable();
    second.sort_unstable();
    Ok(SplitPlan {
        first,
        second,
        seed,
    })
}

/// Orthonormal basis of the column span of `z`, by SVD with a relative
/// rank cutoff.
pub fn column_space(z: &DMatrix<f64>) -> DMatrix<f64> {
    let m = z.nrows();
    if z.ncols() == 0 || z.iter().all(|v| *v == 0.0) {
        return DMatrix::zeros(m, 0);
    }
    let svd = z.clone().svd(true, false);
    let u = svd.u.expect("svd computed with u");
    let smax = svd.singular_values.max();
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&k| svd.singular_values[k] > RANK_TOL * smax)
        .collect();
    DMatrix::from_fn(m, keep.len(), |r, c| u[(r, keep[c])])
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionResiduals {
    pub r: DVector<f64>,
    pub pperp_r: DVector<f64>,
    pub rank: usize,
}

pub fn projection_residuals(cluster: &Cluster, beta: &[f64]) -> ProjectionResiduals {
    let r = cluster.y() - cluster.x() * DVector::from_column_slice(beta);
    let u = column_space(cluster.z());
    let pperp_r = &r - &u * u.tr_mul(&r);
    ProjectionResiduals {
        r,
        pperp_r,
        rank: u.ncols(),
    }
}

fn residuals(clusters: &[&Cluster], beta: &[f64]) -> Vec<DVector<f64>> {
    let b = DVector::from_column_slice(beta);
    clusters.iter().map(|c| c.y() - c.x() * &b).collect()
}

fn outer(r: &DVector<f64>) -> DMatrix<f64> {
    r * r.transpose()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sigma2Estimate {
    pub sigma2_e: f64,
    /// `sum_i (m_i - rank Z^i)`.
    pub dof: f64,
}

/// Noise variance from per-cluster second moments `S_i`:
/// `sum_i Tr(P_i S_i) / sum_i Tr(P_i)` with `P_i` the projector onto the
/// orthogonal complement of `span(Z^i)`.
pub fn sigma2_from_moments(zs: &[&DMatrix<f64>], moments: &[DMatrix<f64>]) -> Result<Sigma2Estimate> {
    let mut num = 0.0;
    let mut dof = 0usize;
    for (z, s) in zs.iter().zip(moments) {
        let u = column_space(z);
        let m = z.nrows();
        let rank = u.ncols();
        if rank == m {
            continue;
        }
        // Tr(P S) = Tr(S) - Tr(U^T S U)
        num += s.trace() - (u.tr_mul(s) * &u).trace();
        dof += m - rank;
    }
    if dof == 0 {
        return Err(QlmmError::NoResidualDof(
            "every cluster has m_i <= rank(Z^i); the noise variance needs clusters larger than q"
                .into(),
        ));
    }
    Ok(Sigma2Estimate {
        sigma2_e: num / dof as f64,
        dof: dof as f64,
    })
}

/// Noise variance on `dataset` with residuals from `beta`.
pub fn sigma2_estimate(dataset: &ClusteredDataset, beta: &[f64]) -> Result<Sigma2Estimate> {
    let clusters: Vec<&Cluster> = dataset.clusters().iter().collect();
    let zs: Vec<&DMatrix<f64>> = clusters.iter().map(|c| c.z()).collect();
    let moments: Vec<DMatrix<f64>> = residuals(&clusters, beta).iter().map(outer).collect();
    sigma2_from_moments(&zs, &moments)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignGram {
    pub matrix: DMatrix<f64>,
    pub min_eig: f64,
    pub condition: f64,
}

/// `D_jk = Tr(G_j G_k)`, rejecting numerically dependent bases.
pub fn design_gram(basis: &Basis, tol: f64) -> Result<DesignGram> {
    let d = basis.len();
    let g = basis.matrices();
    let matrix = DMatrix::from_fn(d, d, |j, k| g[j].dot(&g[k]));
    let eig = SymmetricEigen::new(matrix.clone());
    let min_eig = eig.eigenvalues.min();
    let max_eig = eig.eigenvalues.max();
    if !(min_eig > tol * max_eig.max(1.0)) {
        return Err(QlmmError::Singular(format!(
            "basis matrices are linearly dependent: smallest eigenvalue of Tr(G_j G_k) is {min_eig:e}"
        )));
    }
    Ok(DesignGram {
        condition: max_eig / min_eig,
        matrix,
        min_eig,
    })
}

pub fn psi_from_eta(eta: &[f64], basis: &Basis) -> Result<DMatrix<f64>> {
    if eta.len() != basis.len() {
        return Err(QlmmError::DimensionMismatch(format!(
            "eta has length {}, basis has {} matrices",
            eta.len(),
            basis.len()
        )));
    }
    let q = basis.q();
    let mut psi = DMatrix::zeros(q, q);
    for (e, g) in eta.iter().zip(basis.matrices()) {
        psi += g * *e;
    }
    Ok(psi)
}

/// Least-squares coordinates of a symmetric matrix in the span of `basis`.
pub fn project_onto_basis(psi: &DMatrix<f64>, basis: &Basis) -> Result<Vec<f64>> {
    let dg = design_gram(basis, 1e-12)?;
    let rhs = DVector::from_iterator(basis.len(), basis.matrices().iter().map(|g| g.dot(psi)));
    let sol = dg
        .matrix
        .cholesky()
        .ok_or_else(|| QlmmError::Singular("basis Gram not positive definite".into()))?
        .solve(&rhs);
    Ok(sol.iter().copied().collect())
}

/// Normal equations `A eta = b` of the weighted moment-matching problem.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaSystem {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// Assembles `A_jk = sum_i Tr(G_j K_i G_k K_i)` and
/// `b_j = sum_i Tr(G_j H_i) - sigma2 Tr(G_j L_i)` with `K = Z^T W Z`,
/// `L = Z^T W^2 Z`, `H = Z^T W S W Z` and `W = Sigma_a^{-1}`.
pub fn eta_system(
    zs: &[&DMatrix<f64>],
    factors: &[ClusterFactor],
    moments: &[DMatrix<f64>],
    sigma2: f64,
    basis: &Basis,
) -> EtaSystem {
    let d = basis.len();
    let g = basis.matrices();
    let mut a = DMatrix::zeros(d, d);
    let mut b = DVector::zeros(d);
    for ((z, f), s) in zs.iter().zip(factors).zip(moments) {
        let wz = f.apply_power(z, -1.0);
        let k = z.tr_mul(&wz);
        let l = wz.tr_mul(&wz);
        let h = {
            let sw = s * &wz;
            wz.tr_mul(&sw)
        };
        let gk: Vec<DMatrix<f64>> = g.iter().map(|gj| gj * &k).collect();
        for j in 0..d {
            for kk in j..d {
                // Tr(G_j K G_k K) = <(G_j K)^T, G_k K>
                let v = gk[j].transpose().dot(&gk[kk]);
                a[(j, kk)] += v;
                if kk != j {
                    a[(kk, j)] += v;
                }
            }
            b[j] += g[j].dot(&h) - sigma2 * g[j].dot(&l);
        }
    }
    EtaSystem { a, b }
}

/// Solves the normal equations, naming the deficient direction if `A` is
/// singular.
pub fn solve_eta(system: &EtaSystem) -> Result<Vec<f64>> {
    let eig = SymmetricEigen::new(system.a.clone());
    let (imin, min) = eig.eigenvalues.argmin();
    let max = eig.eigenvalues.amax();
    if !(min > 1e-12 * max) || max == 0.0 {
        let dir: Vec<String> = eig
            .eigenvectors
            .column(imin)
            .iter()
            .map(|v| format!("{v:.4}"))
            .collect();
        return Err(QlmmError::Singular(format!(
            "variance-component normal equations are singular along basis combination ({})",
            dir.join(", ")
        )));
    }
    let mut sol = DVector::zeros(system.b.len());
    for k in 0..eig.eigenvalues.len() {
        let v = eig.eigenvectors.column(k);
        sol += v * (v.dot(&system.b) / eig.eigenvalues[k]);
    }
    Ok(sol.iter().copied().collect())
}

/// `sum_i || W^{1/2} (S_i - Z Psi_eta Z^T - sigma2 I) W^{1/2} ||_F^2`,
/// evaluated densely.
pub fn eta_objective(
    zs: &[&DMatrix<f64>],
    factors: &[ClusterFactor],
    moments: &[DMatrix<f64>],
    sigma2: f64,
    basis: &Basis,
    eta: &[f64],
) -> Result<f64> {
    let psi = psi_from_eta(eta, basis)?;
    let mut total = 0.0;
    for ((z, f), s) in zs.iter().zip(factors).zip(moments) {
        let m = z.nrows();
        let dev = s - *z * &psi * z.transpose() - DMatrix::identity(m, m) * sigma2;
        let wdev = f.apply_power(&dev, -1.0);
        // ||W^{1/2} M W^{1/2}||_F^2 = Tr(W M W M)
        total += wdev.transpose().dot(&wdev);
    }
    Ok(total)
}

fn nearest_psd(psi: &DMatrix<f64>) -> DMatrix<f64> {
    if psi.is_empty() {
        return psi.clone();
    }
    let eig = SymmetricEigen::new(psi.clone());
    let d = eig.eigenvalues.map(|e| e.max(0.0));
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| m.row(r).iter().copied().collect())
        .collect()
}

fn direction(
    dataset: &ClusteredDataset,
    a: f64,
    basis: &Basis,
    est_fold: &[usize],
    beta_fold: &[usize],
    lasso: &LassoOptions,
) -> Result<DirectionalEstimate> {
    let train = transform_dataset(&dataset.subset(beta_fold), a)?;
    let fit = lasso_fit(&train, lasso)?;
    let est = dataset.subset(est_fold);
    let clusters: Vec<&Cluster> = est.clusters().iter().collect();
    let zs: Vec<&DMatrix<f64>> = clusters.iter().map(|c| c.z()).collect();
    let moments: Vec<DMatrix<f64>> = residuals(&clusters, &fit.beta).iter().map(outer).collect();
    let s2 = sigma2_from_moments(&zs, &moments)?;
    let whitener = build_whitener(&est, a)?;
    let system = eta_system(&zs, whitener.factors(), &moments, s2.sigma2_e, basis);
    let eta = solve_eta(&system)?;
    let resid = (&system.a * DVector::from_column_slice(&eta) - &system.b).norm();
    Ok(DirectionalEstimate {
        est_fold: est_fold.to_vec(),
        sigma2_e: s2.sigma2_e,
        eta,
        residual_dof: s2.dof,
        normal_eq_residual: resid,
    })
}

/// Split, estimate in one or both directions, and average.
pub fn cross_fit_varcomp(
    dataset: &ClusteredDataset,
    a: f64,
    basis: &Basis,
    options: &VarCompOptions,
) -> Result<VarCompFit> {
    if basis.q() != dataset.q() {
        return Err(QlmmError::DimensionMismatch(format!(
            "basis is {0}x{0}, data has q = {1}",
            basis.q(),
            dataset.q()
        )));
    }
    let dg = design_gram(basis, options.basis_tol)?;
    let (split, directions) = match options.mode {
        SplitMode::FullSample => {
            let all: Vec<usize> = (0..dataset.n_clusters()).collect();
            (None, vec![direction(dataset, a, basis, &all, &all, &options.lasso)?])
        }
        mode => {
            let split = split_clusters(dataset, options.seed)?;
            let mut dirs = vec![direction(dataset, a, basis, &split.first, &split.second, &options.lasso)?];
            if mode == SplitMode::CrossFit {
                dirs.push(direction(dataset, a, basis, &split.second, &split.first, &options.lasso)?);
            }
            (Some(split), dirs)
        }
    };
    let k = directions.len() as f64;
    let sigma2: f64 = directions.iter().map(|d| d.sigma2_e).sum::<f64>() / k;
    let eta: Vec<f64> = (0..basis.len())
        .map(|j| directions.iter().map(|d| d.eta[j]).sum::<f64>() / k)
        .collect();
    let sigma2_clamped = sigma2 < 0.0;
    let psi = psi_from_eta(&eta, basis)?;
    Ok(VarCompFit {
        sigma2_e_hat: sigma2.max(0.0),
        psi_hat: rows(&psi),
        psi_hat_psd: options.project_psd.then(|| rows(&nearest_psd(&psi))),
        eta_hat: eta,
        sigma2_clamped,
        split,
        mode: options.mode,
        directions,
        design_min_eig: dg.min_eig,
        design_condition: dg.condition,
    })
}
