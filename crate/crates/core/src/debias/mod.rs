//! Coordinate-wise debiased estimation and inference on whitened data.
//!
//! For a target coordinate `j`, a nodewise Lasso of `(X_a)_j` on the other
//! columns gives the correction score `w_j`. The one-step estimate is
//!
//! ```text
//! beta_db_j = beta_j + w_j^T (y_a - X_a beta) / (w_j^T (X_a)_j)
//! ```
//!
//! and its variance is estimated from cluster-level score contributions,
//! so the within-cluster dependence never has to be modeled.

mod fdr;
mod nodewise;

pub use fdr::bh_fdr;
pub use nodewise::{nodewise_fit, nodewise_fit_cached, CorrectionScore, NodewiseCache, NodewiseOptions};

use std::collections::BTreeMap;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

use crate::error::{QlmmError, Result};
use crate::lasso::{lasso_fit, FixedEffectsFit, GramCache, LassoOptions};
use crate::model::ClusteredDataset;
use crate::proxy::{transform_dataset, TransformedDataset};

/// Which data the debiasing step runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DebiasMode {
    /// Initial fit, nodewise scores and residuals all on the `a`-whitened data.
    #[default]
    Whitened,
    /// Initial fit at `a`, then debias on the raw data (`a = 0`).
    A0Robust,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRecord {
    pub j: usize,
    pub beta_hat: f64,
    pub beta_db: f64,
    pub v_hat: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub z: f64,
    pub p_value: f64,
    pub alpha: f64,
    pub lambda_j: f64,
    /// Set when `v_hat == 0`: the interval has zero width.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZTest {
    pub z: f64,
    pub p_value: f64,
}

/// `y_a^i - X_a^i beta` for every cluster.
pub fn residual_blocks(transformed: &TransformedDataset, beta: &[f64]) -> Vec<DVector<f64>> {
    let support: Vec<usize> = (0..beta.len()).filter(|&k| beta[k] != 0.0).collect();
    transformed
        .blocks()
        .iter()
        .map(|b| {
            let mut r = b.y.clone();
            for &k in &support {
                r.axpy(-beta[k], &b.x.column(k), 1.0);
            }
            r
        })
        .collect()
}

/// Per-cluster score contributions `(w_j^i)^T r_i`.
fn score_terms(score: &CorrectionScore, residuals: &[DVector<f64>]) -> Vec<f64> {
    score.w.iter().zip(residuals).map(|(w, r)| w.dot(r)).collect()
}

fn check_score(score: &CorrectionScore, transformed: &TransformedDataset) -> Result<()> {
    if score.w.len() != transformed.n_clusters() {
        return Err(QlmmError::DimensionMismatch(format!(
            "score has {} blocks, data has {} clusters",
            score.w.len(),
            transformed.n_clusters()
        )));
    }
    if score.denominator == 0.0 {
        return Err(QlmmError::NotIdentifiable {
            coordinate: score.j,
            reason: "zero score denominator".into(),
        });
    }
    Ok(())
}

pub fn debias_coordinate(
    transformed: &TransformedDataset,
    fit: &FixedEffectsFit,
    score: &CorrectionScore,
) -> Result<f64> {
    check_score(score, transformed)?;
    let residuals = residual_blocks(transformed, &fit.beta);
    let num: f64 = score_terms(score, &residuals).iter().sum();
    Ok(fit.beta[score.j] + num / score.denominator)
}

/// Sum over clusters of squared score contributions over the squared
/// denominator.
pub fn empirical_variance(
    transformed: &TransformedDataset,
    fit: &FixedEffectsFit,
    score: &CorrectionScore,
) -> Result<f64> {
    check_score(score, transformed)?;
    let residuals = residual_blocks(transformed, &fit.beta);
    Ok(variance_from_terms(&score_terms(score, &residuals), score.denominator))
}

fn variance_from_terms(terms: &[f64], denominator: f64) -> f64 {
    terms.iter().map(|t| t * t).sum::<f64>() / (denominator * denominator)
}

pub fn normal_quantile(prob: f64) -> f64 {
    Normal::standard().inverse_cdf(prob)
}

pub fn confidence_interval(beta_db: f64, v_hat: f64, alpha: f64) -> Result<Interval> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(QlmmError::InvalidArgument(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    if !(v_hat >= 0.0) {
        return Err(QlmmError::InvalidArgument(format!(
            "variance must be nonnegative, got {v_hat}"
        )));
    }
    let degenerate = v_hat == 0.0;
    if degenerate {
        log::warn!("zero estimated variance: confidence interval has zero width");
    }
    let half = normal_quantile(1.0 - alpha / 2.0) * v_hat.sqrt();
    Ok(Interval {
        lo: beta_db - half,
        hi: beta_db + half,
        degenerate,
    })
}

/// Two-sided z-test of `beta = null_value`.
pub fn z_test(beta_db: f64, v_hat: f64, null_value: f64) -> Result<ZTest> {
    if !(v_hat > 0.0) {
        return Err(QlmmError::InvalidArgument(format!(
            "z-test needs a positive variance, got {v_hat}"
        )));
    }
    let z = (beta_db - null_value) / v_hat.sqrt();
    // 2 (1 - Phi(|z|)) = erfc(|z| / sqrt 2)
    let p_value = erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0);
    Ok(ZTest { z, p_value })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceOptions {
    pub alpha: f64,
    pub null_value: f64,
    pub mode: DebiasMode,
    pub lasso: LassoOptions,
    pub nodewise: NodewiseOptions,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            null_value: 0.0,
            mode: DebiasMode::Whitened,
            lasso: LassoOptions::default(),
            nodewise: NodewiseOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceOutput {
    pub fit: FixedEffectsFit,
    pub records: Vec<InferenceRecord>,
    /// Coordinates that could not be debiased, with the reason.
    pub failures: BTreeMap<usize, String>,
}

fn record_for(
    score: &CorrectionScore,
    beta_hat: f64,
    residuals: &[DVector<f64>],
    options: &InferenceOptions,
) -> Result<InferenceRecord> {
    let terms = score_terms(score, residuals);
    let beta_db = beta_hat + terms.iter().sum::<f64>() / score.denominator;
    let v_hat = variance_from_terms(&terms, score.denominator);
    let ci = confidence_interval(beta_db, v_hat, options.alpha)?;
    let test = if ci.degenerate {
        let diff = beta_db - options.null_value;
        if diff == 0.0 {
            ZTest { z: 0.0, p_value: 1.0 }
        } else {
            ZTest {
                z: diff.signum() * f64::INFINITY,
                p_value: 0.0,
            }
        }
    } else {
        z_test(beta_db, v_hat, options.null_value)?
    };
    Ok(InferenceRecord {
        j: score.j,
        beta_hat,
        beta_db,
        v_hat,
        ci_lo: ci.lo,
        ci_hi: ci.hi,
        z: test.z,
        p_value: test.p_value,
        alpha: options.alpha,
        lambda_j: score.lambda_j,
        degenerate: ci.degenerate,
    })
}

/// Debiased records for `targets` given an initial fit and the data the
/// correction runs on.
pub fn debias_targets(
    debias_data: &TransformedDataset,
    fit: &FixedEffectsFit,
    targets: &[usize],
    options: &InferenceOptions,
    cache: Option<(&NodewiseCache, u64)>,
) -> (Vec<InferenceRecord>, BTreeMap<usize, String>) {
    let residuals = residual_blocks(debias_data, &fit.beta);
    let chunk = targets.len().div_ceil(rayon::current_num_threads().max(1)).max(1);
    let results: Vec<(usize, Result<InferenceRecord>)> = targets
        .par_chunks(chunk)
        .flat_map_iter(|chunk| {
            let mut gram = GramCache::new(debias_data.blocks(), debias_data.p());
            chunk
                .iter()
                .map(|&j| {
                    let score = match cache {
                        Some((c, key)) => c.get_or_fit(key, debias_data, &mut gram, j, &options.nodewise),
                        None => nodewise_fit_cached(debias_data, &mut gram, j, &options.nodewise),
                    };
                    let rec = score.and_then(|s| record_for(&s, fit.beta[j], &residuals, options));
                    (j, rec)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let mut records = Vec::new();
    let mut failures = BTreeMap::new();
    for (j, r) in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => {
                failures.insert(j, e.to_string());
            }
        }
    }
    (records, failures)
}

/// Full pipeline: whiten, fit, and debias each target coordinate.
pub fn infer_coordinates(
    dataset: &ClusteredDataset,
    a: f64,
    targets: &[usize],
    options: &InferenceOptions,
    cache: Option<&NodewiseCache>,
) -> Result<InferenceOutput> {
    if let Some(j) = targets.iter().find(|j| **j >= dataset.p()) {
        return Err(QlmmError::InvalidArgument(format!(
            "target coordinate {j} out of range for p = {}",
            dataset.p()
        )));
    }
    let transformed = transform_dataset(dataset, a)?;
    let fit = lasso_fit(&transformed, &options.lasso)?;
    if targets.is_empty() {
        return Ok(InferenceOutput {
            fit,
            records: Vec::new(),
            failures: BTreeMap::new(),
        });
    }
    let (debias_data, debias_a) = match options.mode {
        DebiasMode::Whitened => (transformed, a),
        DebiasMode::A0Robust => (transform_dataset(dataset, 0.0)?, 0.0),
    };
    let key = cache.map(|c| (c, NodewiseCache::key(dataset, debias_a)));
    let (records, failures) = debias_targets(&debias_data, &fit, targets, options, key);
    Ok(InferenceOutput {
        fit,
        records,
        failures,
    })
}
