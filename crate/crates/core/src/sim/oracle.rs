//! Brute-force dense references for small problems.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{QlmmError, Result};
use crate::lasso::cd::soft_threshold;
use crate::model::ClusteredDataset;

pub const MAX_DENSE_OBS: usize = 2000;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseOracle {
    pub beta: Vec<f64>,
    pub t_a: f64,
    pub y_a: DVector<f64>,
    pub x_a: DMatrix<f64>,
    /// Full block-diagonal `Sigma_a`.
    pub sigma_a: DMatrix<f64>,
    pub sizes: Vec<usize>,
}

/// Proximal gradient with momentum restarts for
/// `(1/(2t)) ||y - X b||^2 + sum_j pen_j |b_j|`.
pub fn fista_lasso(x: &DMatrix<f64>, y: &DVector<f64>, t: f64, penalty: &[f64], max_iter: usize, tol: f64) -> Vec<f64> {
    let p = x.ncols();
    let gram = x.tr_mul(x) / t;
    let xty = x.tr_mul(y) / t;
    let lip = SymmetricEigen::new(gram.clone()).eigenvalues.max().max(f64::MIN_POSITIVE);
    let step = 1.0 / lip;
    let mut b = DVector::zeros(p);
    let mut z = b.clone();
    let mut tk = 1.0f64;
    for _ in 0..max_iter {
        let grad = &gram * &z - &xty;
        let next = DVector::from_fn(p, |j, _| soft_threshold(z[j] - step * grad[j], step * penalty[j]));
        let delta = &next - &b;
        if (&z - &next).dot(&delta) > 0.0 {
            tk = 1.0;
            z = next.clone();
        } else {
            let tn = 0.5 * (1.0 + (1.0 + 4.0 * tk * tk).sqrt());
            z = &next + &delta * ((tk - 1.0) / tn);
            tk = tn;
        }
        let change = delta.amax();
        b = next;
        if change <= tol * b.amax().max(1.0) {
            break;
        }
    }
    b.iter().copied().collect()
}

/// Dense block-diagonal whitening by a full eigendecomposition, then an
/// unstandardized Lasso at penalty `lambda` by proximal gradient.
pub fn dense_oracle_pipeline(dataset: &ClusteredDataset, a: f64, lambda: f64) -> Result<DenseOracle> {
    let n_obs = dataset.total_obs();
    if n_obs > MAX_DENSE_OBS {
        return Err(QlmmError::InvalidArgument(format!(
            "dense reference limited to {MAX_DENSE_OBS} observations, got {n_obs}"
        )));
    }
    let p = dataset.p();
    let mut sigma = DMatrix::zeros(n_obs, n_obs);
    let mut y = DVector::zeros(n_obs);
    let mut x = DMatrix::zeros(n_obs, p);
    let mut sizes = Vec::new();
    let mut off = 0;
    for c in dataset.clusters() {
        let m = c.size();
        let block = c.z() * c.z().transpose() * a + DMatrix::identity(m, m);
        sigma.view_mut((off, off), (m, m)).copy_from(&block);
        y.rows_mut(off, m).copy_from(c.y());
        x.view_mut((off, 0), (m, p)).copy_from(c.x());
        sizes.push(m);
        off += m;
    }
    let eig = SymmetricEigen::new(sigma.clone());
    if eig.eigenvalues.min() <= 0.0 {
        return Err(QlmmError::Numerical("dense covariance is not positive definite".into()));
    }
    let t_a = eig.eigenvalues.iter().map(|e| 1.0 / e).sum();
    let d = eig.eigenvalues.map(|e| e.powf(-0.5));
    let inv_sqrt = &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose();
    let y_a = &inv_sqrt * y;
    let x_a = &inv_sqrt * x;
    let beta = fista_lasso(&x_a, &y_a, t_a, &vec![lambda; p], 2_000_000, 1e-15);
    Ok(DenseOracle {
        beta,
        t_a,
        y_a,
        x_a,
        sigma_a: sigma,
        sizes,
    })
}

/// Debiased estimate and cluster-robust variance for coordinate `j`, given
/// an initial `beta` and nodewise coefficients `gamma` (entry `j` ignored).
pub fn dense_debias(oracle: &DenseOracle, beta: &[f64], j: usize, gamma: &[f64]) -> (f64, f64) {
    let x = &oracle.x_a;
    let r = &oracle.y_a - x * DVector::from_column_slice(beta);
    let mut g = DVector::from_column_slice(gamma);
    g[j] = 0.0;
    let w = x.column(j) - x * g;
    let den = w.dot(&x.column(j));
    let mut off = 0;
    let mut v = 0.0;
    for &m in &oracle.sizes {
        let t = w.rows(off, m).dot(&r.rows(off, m));
        v += t * t;
        off += m;
    }
    (beta[j] + w.dot(&r) / den, v / (den * den))
}
