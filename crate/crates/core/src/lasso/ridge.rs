//! Ridge-based adaptive penalty weights for the weighted Lasso.
//!
//! The ridge fit uses the kernel form `beta = X^T (X X^T + T mu I)^{-1} y`,
//! so the linear algebra is `N x N` even when `p` is in the thousands.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::cv_fold_assignment;
use crate::error::{QlmmError, Result};
use crate::model::ClusteredDataset;
use crate::proxy::{transform_dataset, TransformedDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeOptions {
    pub folds: usize,
    pub seed: u64,
}

impl Default for RidgeOptions {
    fn default() -> Self {
        Self { folds: 5, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeWeights {
    pub weights: Vec<f64>,
    pub beta_ridge: Vec<f64>,
    pub mu: f64,
    /// `(mu, held-out SSE)` per grid point.
    pub criteria: Vec<(f64, f64)>,
}

/// `p * (1/|b_j|) / sum_k (1/|b_k|)`, with `|b_j|` floored at machine epsilon.
pub fn normalized_inverse_weights(beta: &[f64]) -> Vec<f64> {
    let inv: Vec<f64> = beta.iter().map(|b| 1.0 / b.abs().max(f64::EPSILON)).collect();
    let total: f64 = inv.iter().sum();
    let p = beta.len() as f64;
    inv.iter().map(|v| p * v / total).collect()
}

struct Kernel {
    eig: SymmetricEigen<f64, nalgebra::Dyn>,
    /// `V^T y`
    vty: DVector<f64>,
}

fn kernel(t: &TransformedDataset) -> Kernel {
    let n_obs = t.total_obs();
    let mut k = DMatrix::zeros(n_obs, n_obs);
    let mut y = DVector::zeros(n_obs);
    let offsets: Vec<usize> = t
        .blocks()
        .iter()
        .scan(0, |acc, b| {
            let o = *acc;
            *acc += b.y.len();
            Some(o)
        })
        .collect();
    for (i, bi) in t.blocks().iter().enumerate() {
        y.rows_mut(offsets[i], bi.y.len()).copy_from(&bi.y);
        for (l, bl) in t.blocks().iter().enumerate().skip(i) {
            let blk = &bi.x * bl.x.transpose();
            k.view_mut((offsets[i], offsets[l]), (bi.y.len(), bl.y.len()))
                .copy_from(&blk);
            if l != i {
                k.view_mut((offsets[l], offsets[i]), (bl.y.len(), bi.y.len()))
                    .copy_from(&blk.transpose());
            }
        }
    }
    let eig = SymmetricEigen::new(k);
    let vty = eig.eigenvectors.tr_mul(&y);
    Kernel { eig, vty }
}

fn ridge_beta(t: &TransformedDataset, ker: &Kernel, mu: f64) -> Vec<f64> {
    let shift = t.effective_sample_size() * mu;
    let scaled = DVector::from_fn(ker.vty.len(), |k, _| {
        ker.vty[k] / (ker.eig.eigenvalues[k].max(0.0) + shift)
    });
    let alpha = &ker.eig.eigenvectors * scaled;
    let mut beta = DVector::zeros(t.p());
    let mut off = 0;
    for b in t.blocks() {
        let m = b.y.len();
        beta.gemv_tr(1.0, &b.x, &alpha.rows(off, m), 1.0);
        off += m;
    }
    beta.data.into()
}

/// Ridge fit on the whitened data with a cluster-level CV choice of the
/// ridge penalty, turned into normalized inverse-magnitude Lasso weights.
pub fn ridge_weights(
    dataset: &ClusteredDataset,
    a: f64,
    mu_grid: &[f64],
    options: &RidgeOptions,
) -> Result<RidgeWeights> {
    if mu_grid.is_empty() || mu_grid.iter().any(|m| !(*m > 0.0)) {
        return Err(QlmmError::InvalidArgument(
            "ridge penalty grid must be nonempty and positive".into(),
        ));
    }
    let full = transform_dataset(dataset, a)?;
    let n = dataset.n_clusters();
    let mut criteria: Vec<(f64, f64)> = mu_grid.iter().map(|m| (*m, 0.0)).collect();
    if n >= 2 && mu_grid.len() > 1 {
        let folds = options.folds.clamp(2, n);
        let labels = cv_fold_assignment(n, folds, options.seed);
        for fold in 0..folds {
            let train: Vec<usize> = (0..n).filter(|&i| labels[i] != fold).collect();
            let sub = full.subset(&train);
            let ker = kernel(&sub);
            for (mu, crit) in criteria.iter_mut() {
                let beta = DVector::from_vec(ridge_beta(&sub, &ker, *mu));
                for i in (0..n).filter(|&i| labels[i] == fold) {
                    let c = dataset.cluster(i);
                    *crit += (c.y() - c.x() * &beta).norm_squared();
                }
            }
        }
    }
    let mut best = criteria[0];
    for &(mu, v) in &criteria[1..] {
        if v < best.1 {
            best = (mu, v);
        }
    }
    let ker = kernel(&full);
    let beta_ridge = ridge_beta(&full, &ker, best.0);
    Ok(RidgeWeights {
        weights: normalized_inverse_weights(&beta_ridge),
        beta_ridge,
        mu: best.0,
        criteria,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Cluster;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weight_normalization_examples() {
        let w = normalized_inverse_weights(&[1.0, 0.5, 0.25]);
        assert_relative_eq!(w[0], 3.0 / 7.0, epsilon = 1e-15);
        assert_relative_eq!(w[1], 6.0 / 7.0, epsilon = 1e-15);
        assert_relative_eq!(w[2], 12.0 / 7.0, epsilon = 1e-15);
        assert_eq!(normalized_inverse_weights(&[0.3; 4]), vec![1.0; 4]);
        let w = normalized_inverse_weights(&[0.0, 1.0, -2.0]);
        assert!(w.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert_relative_eq!(w.iter().sum::<f64>(), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn kernel_ridge_matches_primal_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let clusters: Vec<_> = (0..6)
            .map(|i| {
                Cluster::new(
                    i.to_string(),
                    DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0)),
                    DMatrix::from_fn(3, 8, |_, _| rng.random_range(-1.0..1.0)),
                    DMatrix::from_fn(3, 1, |_, _| rng.random_range(-1.0..1.0)),
                )
            })
            .collect();
        let ds = ClusteredDataset::new(clusters, 8, 1).unwrap();
        let t = transform_dataset(&ds, 1.5).unwrap();
        let mu = 0.3;
        let got = ridge_beta(&t, &kernel(&t), mu);
        let mut xtx = DMatrix::zeros(8, 8);
        let mut xty = DVector::zeros(8);
        for b in t.blocks() {
            xtx += b.x.tr_mul(&b.x);
            xty += b.x.tr_mul(&b.y);
        }
        xtx += DMatrix::identity(8, 8) * (t.effective_sample_size() * mu);
        let primal = xtx.lu().solve(&xty).unwrap();
        for j in 0..8 {
            assert_relative_eq!(got[j], primal[j], epsilon = 1e-10);
        }

        let rw = ridge_weights(&ds, 1.5, &[0.01, 0.1, 1.0], &RidgeOptions::default()).unwrap();
        assert_relative_eq!(rw.weights.iter().sum::<f64>(), 8.0, epsilon = 1e-10);
        assert!(rw.weights.iter().all(|w| *w > 0.0));
    }
}
