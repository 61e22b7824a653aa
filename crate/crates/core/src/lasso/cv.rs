use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{lasso_fit, FixedEffectsFit, LassoOptions};
use crate::error::{QlmmError, Result};
use crate::model::ClusteredDataset;
use crate::proxy::transform_dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOptions {
    pub folds: usize,
    pub seed: u64,
    pub lasso: LassoOptions,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            folds: 5,
            seed: 0,
            lasso: LassoOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub a_star: f64,
    /// `(a, sum of held-out squared residuals)` in grid order.
    pub criteria: Vec<(f64, f64)>,
    /// `(a, fold)` pairs skipped because the training fold had no
    /// effective sample size.
    pub skipped: Vec<(f64, usize)>,
    /// Largest solver KKT violation over all fold fits.
    pub max_kkt: f64,
}

/// Fold label of every cluster: a seeded shuffle dealt round-robin, so fold
/// sizes differ by at most one.
pub fn cv_fold_assignment(n_clusters: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_clusters).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut labels = vec![0; n_clusters];
    for (rank, &i) in order.iter().enumerate() {
        labels[i] = rank % folds;
    }
    labels
}

fn held_out_sse(dataset: &ClusteredDataset, indices: &[usize], fit: &FixedEffectsFit) -> f64 {
    let beta = DVector::from_column_slice(&fit.beta);
    indices
        .iter()
        .map(|&i| {
            let c = dataset.cluster(i);
            (c.y() - c.x() * &beta).norm_squared()
        })
        .sum()
}

/// K-fold cross-validation over clusters for the proxy constant `a`.
///
/// Each grid point is scored by the total held-out squared prediction error
/// on the raw (unwhitened) data. Ties go to the smaller `a`.
pub fn cross_validate_a(
    dataset: &ClusteredDataset,
    a_grid: &[f64],
    options: &CvOptions,
) -> Result<CvResult> {
    if a_grid.is_empty() {
        return Err(QlmmError::InvalidArgument("a grid is empty".into()));
    }
    if a_grid.len() == 1 {
        if !(a_grid[0] >= 0.0) {
            return Err(QlmmError::InvalidArgument(format!(
                "proxy constant must be nonnegative, got {}",
                a_grid[0]
            )));
        }
        return Ok(CvResult {
            a_star: a_grid[0],
            criteria: vec![(a_grid[0], f64::NAN)],
            skipped: Vec::new(),
            max_kkt: 0.0,
        });
    }
    let n = dataset.n_clusters();
    let folds = options.folds.clamp(2, n.max(2));
    if n < 2 {
        return Err(QlmmError::InvalidArgument(
            "cross-validation needs at least two clusters".into(),
        ));
    }
    let labels = cv_fold_assignment(n, folds, options.seed);
    let mut criteria = Vec::with_capacity(a_grid.len());
    let mut skipped = Vec::new();
    let mut max_kkt = 0.0f64;
    for &a in a_grid {
        let full = transform_dataset(dataset, a)?;
        let mut total = 0.0;
        for fold in 0..folds {
            let train: Vec<usize> = (0..n).filter(|&i| labels[i] != fold).collect();
            let test: Vec<usize> = (0..n).filter(|&i| labels[i] == fold).collect();
            let sub = full.subset(&train);
            if !(sub.effective_sample_size() > 0.0) {
                log::warn!("skipping fold {fold} at a = {a}: zero effective sample size");
                skipped.push((a, fold));
                continue;
            }
            let fit = lasso_fit(&sub, &options.lasso)?;
            max_kkt = max_kkt.max(fit.kkt_violation);
            total += held_out_sse(dataset, &test, &fit);
        }
        criteria.push((a, total));
    }
    let mut best = criteria[0];
    for &(a, v) in &criteria[1..] {
        if v < best.1 || (v == best.1 && a < best.0) {
            best = (a, v);
        }
    }
    Ok(CvResult {
        a_star: best.0,
        criteria,
        skipped,
        max_kkt,
    })
}
