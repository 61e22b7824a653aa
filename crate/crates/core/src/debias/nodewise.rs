use std::collections::HashMap;
use std::sync::Mutex;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{QlmmError, Result};
use crate::lasso::cd::CdSettings;
use crate::lasso::{default_lambda, GramCache, LambdaNormalizer, Regression, ScaledLassoSettings};
use crate::model::ClusteredDataset;
use crate::proxy::{TransformedDataset, WhitenedBlock};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodewiseOptions {
    /// Fixed nodewise penalty; `None` picks `sigma_x sqrt(2 log p / n)`
    /// with `sigma_x` from a scaled Lasso of the target column.
    pub lambda: Option<f64>,
    pub normalizer: LambdaNormalizer,
    pub standardize: bool,
    /// Columns left unpenalized in every nodewise regression.
    pub unpenalized: Vec<usize>,
    pub scaled: ScaledLassoSettings,
    pub max_sweeps: usize,
    pub tol: f64,
    pub kkt_tol: f64,
}

impl Default for NodewiseOptions {
    fn default() -> Self {
        Self {
            lambda: None,
            normalizer: LambdaNormalizer::TotalObs,
            standardize: true,
            unpenalized: Vec::new(),
            scaled: ScaledLassoSettings::default(),
            max_sweeps: 100_000,
            tol: 1e-7,
            kkt_tol: 1e-8,
        }
    }
}

/// Correction score for one coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionScore {
    pub j: usize,
    /// Nodewise coefficients on the other columns, in column order.
    pub kappa: Vec<f64>,
    /// Per-cluster score vectors `(X_a)_j - (X_a)_{-j} kappa`.
    pub w: Vec<DVector<f64>>,
    /// `sum_i (w^i)^T (X_a^i)_j`.
    pub denominator: f64,
    pub lambda_j: f64,
    pub sigma_x: Option<f64>,
}

pub fn nodewise_fit(
    transformed: &TransformedDataset,
    j: usize,
    lambda_j: Option<f64>,
    options: &NodewiseOptions,
) -> Result<CorrectionScore> {
    let mut gram = GramCache::new(transformed.blocks(), transformed.p());
    let opts = NodewiseOptions {
        lambda: lambda_j.or(options.lambda),
        ..options.clone()
    };
    nodewise_fit_cached(transformed, &mut gram, j, &opts)
}

/// Nodewise Lasso of column `j` reusing a Gram cache over the same blocks.
pub fn nodewise_fit_cached(
    transformed: &TransformedDataset,
    gram: &mut GramCache<'_>,
    j: usize,
    options: &NodewiseOptions,
) -> Result<CorrectionScore> {
    let p = transformed.p();
    if j >= p {
        return Err(QlmmError::InvalidArgument(format!(
            "coordinate {j} out of range for p = {p}"
        )));
    }
    if let Some(l) = options.lambda {
        if !(l > 0.0) || !l.is_finite() {
            return Err(QlmmError::InvalidArgument(format!(
                "nodewise lambda must be positive, got {l}"
            )));
        }
    }
    let t = transformed.effective_sample_size();
    if !(t > 0.0) {
        return Err(QlmmError::InvalidArgument("effective sample size is zero".into()));
    }
    let d_jj = gram.diag()[j];
    if !(d_jj > 0.0) {
        return Err(QlmmError::NotIdentifiable {
            coordinate: j,
            reason: "column is identically zero".into(),
        });
    }
    let n_rows = transformed.total_obs() as f64;
    let mut weights = vec![1.0; p];
    for &k in &options.unpenalized {
        if k < p {
            weights[k] = 0.0;
        }
    }
    let mut mask = vec![true; p];
    mask[j] = false;
    let settings = CdSettings {
        max_sweeps: options.max_sweeps,
        tol: options.tol,
        kkt_tol: options.kkt_tol,
    };
    let xty = gram.column(j).to_vec();
    let mut reg = Regression {
        gram,
        xty,
        yty: d_jj,
        mask,
        weights,
        standardize: options.standardize,
    };
    let response = |_: usize, b: &WhitenedBlock| b.x.column(j).into_owned();

    let (lambda_j, sigma_x, warm) = match options.lambda {
        Some(l) => (l, None, None),
        None => {
            let sl = reg.scaled_lasso(n_rows, p, t, &options.scaled, &settings, response);
            let n = match options.normalizer {
                LambdaNormalizer::TotalObs => n_rows,
                LambdaNormalizer::EffectiveSampleSize => t,
            };
            if !(sl.sigma > 1e-6 * (d_jj / n_rows).sqrt()) {
                return Err(QlmmError::NotIdentifiable {
                    coordinate: j,
                    reason: "column lies in the span of the other columns".into(),
                });
            }
            (default_lambda(sl.sigma, p, n), Some(sl.sigma), Some(sl.beta))
        }
    };
    let fit = reg.fit(lambda_j, t, t, warm.as_deref(), &settings);
    let gamma = fit.beta;
    let support: Vec<usize> = (0..p).filter(|&k| gamma[k] != 0.0).collect();
    let mut denominator = 0.0;
    let w: Vec<DVector<f64>> = transformed
        .blocks()
        .iter()
        .map(|b| {
            let xj = b.x.column(j);
            let mut wi = xj.into_owned();
            for &k in &support {
                wi.axpy(-gamma[k], &b.x.column(k), 1.0);
            }
            denominator += wi.dot(&xj);
            wi
        })
        .collect();
    if !(denominator.abs() > 1e-8 * d_jj) {
        return Err(QlmmError::NotIdentifiable {
            coordinate: j,
            reason: format!("score denominator {denominator:e} is numerically zero"),
        });
    }
    let kappa = (0..p).filter(|&k| k != j).map(|k| gamma[k]).collect();
    Ok(CorrectionScore {
        j,
        kappa,
        w,
        denominator,
        lambda_j,
        sigma_x,
    })
}

type CacheKey = (u64, usize, Option<u64>, bool, Vec<usize>);

/// Memo of nodewise fits keyed by data, proxy constant, coordinate and
/// penalty, shared across repeated inference calls.
#[derive(Debug, Default)]
pub struct NodewiseCache {
    scores: Mutex<HashMap<CacheKey, CorrectionScore>>,
}

impl NodewiseCache {
    /// Data key for `dataset` whitened at `a`.
    pub fn key(dataset: &ClusteredDataset, a: f64) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        dataset.fingerprint().hash(&mut h);
        a.to_bits().hash(&mut h);
        h.finish()
    }

    pub fn len(&self) -> usize {
        self.scores.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get_or_fit(
        &self,
        data_key: u64,
        transformed: &TransformedDataset,
        gram: &mut GramCache<'_>,
        j: usize,
        options: &NodewiseOptions,
    ) -> Result<CorrectionScore> {
        let key = (
            data_key,
            j,
            options.lambda.map(f64::to_bits),
            options.standardize,
            options.unpenalized.clone(),
        );
        if let Some(s) = self.scores.lock().expect("cache lock").get(&key) {
            return Ok(s.clone());
        }
        let score = nodewise_fit_cached(transformed, gram, j, options)?;
        self.scores
            .lock()
            .expect("cache lock")
            .insert(key, score.clone());
        Ok(score)
    }
}
