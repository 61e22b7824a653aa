//! Penalized quasi-likelihood estimation of the fixed effects.
//!
//! The estimator solves
//!
//! ```text
//! min_beta  1/(2 T_a) ||y_a - X_a beta||^2 + lambda sum_j w_j |beta_j|
//! ```
//!
//! on whitened data, where `T_a = Tr(Sigma_a^{-1})` plays the role of the
//! sample size. The penalty level defaults to the scaled-Lasso noise
//! estimate times `sqrt(2 log p / N)`.

pub(crate) mod cd;
mod cv;
mod gram;
mod ridge;

pub use cv::{cross_validate_a, cv_fold_assignment, CvOptions, CvResult};
pub use gram::GramCache;
pub use ridge::{normalized_inverse_weights, ridge_weights, RidgeOptions, RidgeWeights};

use serde::{Deserialize, Serialize};

use crate::error::{QlmmError, Result};
use crate::proxy::{TransformedDataset, WhitenedBlock};
use cd::{CdProblem, CdSettings};

/// How the penalty level is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaRule {
    Fixed(f64),
    /// `sigma_hat * sqrt(2 log p / n)` with `sigma_hat` from the scaled Lasso.
    ScaledLasso,
}

/// Sample size plugged into `sqrt(2 log p / n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaNormalizer {
    /// Total number of observations `N`.
    #[default]
    TotalObs,
    /// Effective sample size `T_a`.
    EffectiveSampleSize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaledLassoSettings {
    pub max_alternations: usize,
    pub rel_tol: f64,
}

impl Default for ScaledLassoSettings {
    fn default() -> Self {
        Self {
            max_alternations: 50,
            rel_tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoOptions {
    pub lambda: LambdaRule,
    pub normalizer: LambdaNormalizer,
    /// Per-coordinate penalty weights; all ones when absent.
    pub weights: Option<Vec<f64>>,
    pub unpenalized: Vec<usize>,
    /// Penalize on the scale of unit-norm columns (`||x_j||^2 = T_a`).
    pub standardize: bool,
    pub max_sweeps: usize,
    /// Stop when the largest coefficient move in a sweep is below
    /// `tol * max(1, ||beta||_inf)` and the KKT check passes.
    pub tol: f64,
    pub kkt_tol: f64,
    pub scaled: ScaledLassoSettings,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self {
            lambda: LambdaRule::ScaledLasso,
            normalizer: LambdaNormalizer::TotalObs,
            weights: None,
            unpenalized: Vec::new(),
            standardize: true,
            max_sweeps: 100_000,
            tol: 1e-7,
            kkt_tol: 1e-8,
            scaled: ScaledLassoSettings::default(),
        }
    }
}

impl LassoOptions {
    pub fn with_lambda(lambda: f64) -> Self {
        Self {
            lambda: LambdaRule::Fixed(lambda),
            ..Self::default()
        }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if let LambdaRule::Fixed(l) = self.lambda {
            if !(l > 0.0) || !l.is_finite() {
                return Err(QlmmError::InvalidArgument(format!(
                    "lambda must be positive, got {l}"
                )));
            }
        }
        if let Some(w) = &self.weights {
            if w.len() != p {
                return Err(QlmmError::DimensionMismatch(format!(
                    "{} penalty weights for p = {p}",
                    w.len()
                )));
            }
            if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(QlmmError::InvalidArgument(
                    "penalty weights must be finite and nonnegative".into(),
                ));
            }
        }
        if let Some(j) = self.unpenalized.iter().find(|j| **j >= p) {
            return Err(QlmmError::InvalidArgument(format!(
                "unpenalized index {j} out of range for p = {p}"
            )));
        }
        if !(self.tol > 0.0) || !(self.kkt_tol > 0.0) {
            return Err(QlmmError::InvalidArgument("tolerances must be positive".into()));
        }
        Ok(())
    }

    fn base_weights(&self, p: usize) -> Vec<f64> {
        let mut w = self.weights.clone().unwrap_or_else(|| vec![1.0; p]);
        for &j in &self.unpenalized {
            w[j] = 0.0;
        }
        w
    }

    pub(crate) fn settings(&self) -> CdSettings {
        CdSettings {
            max_sweeps: self.max_sweeps,
            tol: self.tol,
            kkt_tol: self.kkt_tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedEffectsFit {
    pub beta: Vec<f64>,
    pub a: f64,
    pub lambda: f64,
    /// Weights as supplied (zero on unpenalized coordinates).
    pub weights: Vec<f64>,
    /// Penalty actually applied to each `|beta_j|`: `lambda * w_j * s_j`,
    /// where `s_j` is the column scale when standardizing and 1 otherwise.
    pub penalty: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub kkt_violation: f64,
    pub effective_sample_size: f64,
    /// Scaled-Lasso noise level, when the penalty was chosen from it.
    pub sigma_init: Option<f64>,
    pub objective_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledLassoFit {
    pub sigma: f64,
    pub beta: Vec<f64>,
    pub alternations: usize,
    pub converged: bool,
}

pub fn default_lambda(sigma_init: f64, p: usize, n: f64) -> f64 {
    sigma_init * (2.0 * (p as f64).ln() / n).sqrt()
}

/// One weighted Lasso regression over a cached Gram, with the response
/// given through `X^T y` and `y^T y`.
pub(crate) struct Regression<'p, 'g> {
    pub gram: &'p mut GramCache<'g>,
    pub xty: Vec<f64>,
    pub yty: f64,
    pub mask: Vec<bool>,
    /// Base weights before standardization.
    pub weights: Vec<f64>,
    pub standardize: bool,
}

pub(crate) struct RegressionFit {
    pub beta: Vec<f64>,
    pub penalty: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
    pub kkt_violation: f64,
    pub objective: f64,
    pub history: Vec<f64>,
}

impl Regression<'_, '_> {
    fn penalty(&self, lambda: f64, normalizer: f64) -> Vec<f64> {
        let diag = self.gram.diag();
        self.weights
            .iter()
            .zip(diag)
            .map(|(w, d)| {
                let scale = if self.standardize {
                    (d / normalizer).sqrt()
                } else {
                    1.0
                };
                lambda * w * scale
            })
            .collect()
    }

    pub fn fit(
        &mut self,
        lambda: f64,
        normalizer: f64,
        scale_normalizer: f64,
        warm: Option<&[f64]>,
        settings: &CdSettings,
    ) -> RegressionFit {
        let penalty = self.penalty(lambda, scale_normalizer);
        let mut problem = CdProblem {
            gram: &mut *self.gram,
            xty: &self.xty,
            yty: self.yty,
            normalizer,
            penalty: &penalty,
            mask: &self.mask,
        };
        let out = problem.solve(warm, settings);
        RegressionFit {
            beta: out.beta,
            penalty,
            sweeps: out.sweeps,
            converged: out.converged,
            kkt_violation: out.kkt_violation,
            objective: out.objective,
            history: out.history,
        }
    }

    /// Residual sum of squares computed from the blocks, with the response
    /// supplied by `response(block_index)`.
    pub fn rss_with<F>(&self, beta: &[f64], response: F) -> f64
    where
        F: Fn(usize, &WhitenedBlock) -> nalgebra::DVector<f64>,
    {
        let support: Vec<usize> = (0..beta.len()).filter(|&j| beta[j] != 0.0).collect();
        let mut rss = 0.0;
        for (i, b) in self.gram.blocks().iter().enumerate() {
            let mut r = response(i, b);
            for &j in &support {
                r.axpy(-beta[j], &b.x.column(j), 1.0);
            }
            rss += r.dot(&r);
        }
        rss
    }

    /// Alternating scaled-Lasso noise estimation on `n_rows` observations.
    /// `T_a`-scale standardization still uses `scale_normalizer`.
    pub fn scaled_lasso<F>(
        &mut self,
        n_rows: f64,
        p_for_log: usize,
        scale_normalizer: f64,
        settings: &ScaledLassoSettings,
        cd: &CdSettings,
        response: F,
    ) -> ScaledLassoFit
    where
        F: Fn(usize, &WhitenedBlock) -> nalgebra::DVector<f64>,
    {
        let lambda0 = (2.0 * (p_for_log.max(1) as f64).ln() / n_rows).sqrt();
        let sigma_start = (self.yty / n_rows).sqrt();
        let mut sigma = sigma_start;
        let mut beta = vec![0.0; self.gram.p()];
        let mut converged = false;
        let mut alternations = 0;
        if sigma_start == 0.0 {
            return ScaledLassoFit {
                sigma: 0.0,
                beta,
                alternations,
                converged: true,
            };
        }
        while alternations < settings.max_alternations {
            alternations += 1;
            let lambda = (sigma * lambda0).max(f64::MIN_POSITIVE);
            let fit = self.fit(lambda, n_rows, scale_normalizer, Some(&beta), cd);
            beta = fit.beta;
            let new_sigma = (self.rss_with(&beta, &response) / n_rows).sqrt();
            let rel = (new_sigma - sigma).abs() / sigma;
            sigma = new_sigma;
            if rel < settings.rel_tol || sigma <= 1e-10 * sigma_start {
                converged = true;
                break;
            }
        }
        ScaledLassoFit {
            sigma,
            beta,
            alternations,
            converged,
        }
    }
}

fn require_positive_t(t: f64) -> Result<()> {
    if !(t > 0.0) {
        return Err(QlmmError::InvalidArgument(
            "effective sample size is zero".into(),
        ));
    }
    Ok(())
}

fn response_y(_: usize, b: &WhitenedBlock) -> nalgebra::DVector<f64> {
    b.y.clone()
}

/// Scaled-Lasso noise level and coefficients on the whitened data.
pub fn scaled_lasso_noise(
    transformed: &TransformedDataset,
    options: &LassoOptions,
) -> Result<ScaledLassoFit> {
    let p = transformed.p();
    options.validate(p)?;
    let t = transformed.effective_sample_size();
    require_positive_t(t)?;
    let mut gram = GramCache::new(transformed.blocks(), p);
    let xty = gram.xty();
    let yty = gram.yty();
    let mut reg = Regression {
        gram: &mut gram,
        xty,
        yty,
        mask: vec![true; p],
        weights: options.base_weights(p),
        standardize: options.standardize,
    };
    Ok(reg.scaled_lasso(
        transformed.total_obs() as f64,
        p,
        t,
        &options.scaled,
        &options.settings(),
        response_y,
    ))
}

pub fn lasso_fit(transformed: &TransformedDataset, options: &LassoOptions) -> Result<FixedEffectsFit> {
    let mut gram = GramCache::new(transformed.blocks(), transformed.p());
    lasso_fit_cached(transformed, &mut gram, options, None)
}

/// [`lasso_fit`] reusing an existing Gram cache over `transformed.blocks()`.
pub fn lasso_fit_cached(
    transformed: &TransformedDataset,
    gram: &mut GramCache<'_>,
    options: &LassoOptions,
    warm: Option<&[f64]>,
) -> Result<FixedEffectsFit> {
    let p = transformed.p();
    options.validate(p)?;
    let t = transformed.effective_sample_size();
    require_positive_t(t)?;
    let xty = gram.xty();
    let yty = gram.yty();
    let weights = options.base_weights(p);
    let mut reg = Regression {
        gram,
        xty,
        yty,
        mask: vec![true; p],
        weights: weights.clone(),
        standardize: options.standardize,
    };
    let settings = options.settings();
    let (lambda, sigma_init, warm_beta) = match options.lambda {
        LambdaRule::Fixed(l) => (l, None, warm.map(|w| w.to_vec())),
        LambdaRule::ScaledLasso => {
            let n_rows = transformed.total_obs() as f64;
            let sl = reg.scaled_lasso(n_rows, p, t, &options.scaled, &settings, response_y);
            let n = match options.normalizer {
                LambdaNormalizer::TotalObs => n_rows,
                LambdaNormalizer::EffectiveSampleSize => t,
            };
            let lambda = default_lambda(sl.sigma, p, n);
            if !(lambda > 0.0) {
                return Err(QlmmError::Numerical(format!(
                    "scaled-Lasso noise estimate {} gives a non-positive penalty",
                    sl.sigma
                )));
            }
            (lambda, Some(sl.sigma), Some(sl.beta))
        }
    };
    let fit = reg.fit(lambda, t, t, warm_beta.as_deref(), &settings);
    Ok(FixedEffectsFit {
        beta: fit.beta,
        a: transformed.a(),
        lambda,
        weights,
        penalty: fit.penalty,
        objective: fit.objective,
        iterations: fit.sweeps,
        converged: fit.converged,
        kkt_violation: fit.kkt_violation,
        effective_sample_size: t,
        sigma_init,
        objective_history: fit.history,
    })
}

/// Largest KKT residual of a weighted Lasso fit, recomputed from the blocks.
pub fn kkt_residual(transformed: &TransformedDataset, fit: &FixedEffectsFit) -> f64 {
    let t = fit.effective_sample_size;
    let p = transformed.p();
    let mut grad = vec![0.0; p];
    for b in transformed.blocks() {
        let r = &b.y - &b.x * nalgebra::DVector::from_column_slice(&fit.beta);
        let g = b.x.tr_mul(&r);
        for j in 0..p {
            grad[j] += g[j];
        }
    }
    let mut worst = 0.0f64;
    for j in 0..p {
        let c = grad[j] / t;
        let v = if fit.beta[j] != 0.0 {
            (c - fit.penalty[j] * fit.beta[j].signum()).abs()
        } else {
            (c.abs() - fit.penalty[j]).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}

/// Value of the fit's objective recomputed from the blocks.
pub fn objective_value(transformed: &TransformedDataset, fit: &FixedEffectsFit) -> f64 {
    let beta = nalgebra::DVector::from_column_slice(&fit.beta);
    let rss: f64 = transformed
        .blocks()
        .iter()
        .map(|b| (&b.y - &b.x * &beta).norm_squared())
        .sum();
    let pen: f64 = fit.penalty.iter().zip(&fit.beta).map(|(l, b)| l * b.abs()).sum();
    rss / (2.0 * fit.effective_sample_size) + pen
}
