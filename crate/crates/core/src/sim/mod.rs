//! Simulation design, Monte-Carlo driver and dense reference computations.

mod mc;
mod oracle;

pub use mc::{
    a_sweep, rep_seed, run_mc, write_mc_csv, write_sweep_csv, CoordinateMetrics, McOptions, McReport,
    SweepRow, VarcompMetrics, VarcompSim,
};
pub use oracle::{dense_debias, dense_oracle_pipeline, fista_lasso, DenseOracle, MAX_DENSE_OBS};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{QlmmError, Result};
use crate::model::{Cluster, ClusteredDataset};

/// Random-effects covariance of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PsiKind {
    /// `Psi_jk = 0.56^{|j-k|}`.
    PositiveDefinite,
    /// `Psi = diag(0.56, ..., 0.56, 0, ..., 0)` with `q/2` nonzero entries.
    Singular,
    /// `Psi = c I`.
    ScaledIdentity(f64),
    /// Explicit row-major `q x q` matrix.
    Custom(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub q: usize,
    pub rho: f64,
    pub psi: PsiKind,
    pub sigma2_e: f64,
    /// Leading nonzero coefficients; the rest of `beta` is zero.
    pub beta_true: Vec<f64>,
    pub seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            n: 36,
            m: 4,
            p: 300,
            q: 2,
            rho: 0.0,
            psi: PsiKind::PositiveDefinite,
            sigma2_e: 0.25,
            beta_true: vec![1.0, 0.5, 0.2, 0.1, 0.05],
            seed: 0,
        }
    }
}

impl Scenario {
    /// Design with `total` observations split into clusters of size `m`.
    pub fn with_total(total: usize, m: usize, p: usize, q: usize, psi: PsiKind) -> Result<Self> {
        if m == 0 || total % m != 0 {
            return Err(QlmmError::InvalidArgument(format!(
                "total sample size {total} is not a multiple of the cluster size {m}"
            )));
        }
        Ok(Self {
            n: total / m,
            m,
            p,
            q,
            psi,
            ..Self::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.p == 0 {
            return Err(QlmmError::InvalidArgument(
                "n, m and p must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(QlmmError::InvalidArgument(format!(
                "rho must lie in [0, 1), got {}",
                self.rho
            )));
        }
        if !(self.sigma2_e > 0.0) {
            return Err(QlmmError::InvalidArgument(format!(
                "sigma2_e must be positive, got {}",
                self.sigma2_e
            )));
        }
        if self.beta_true.len() > self.p {
            return Err(QlmmError::DimensionMismatch(format!(
                "{} true coefficients for p = {}",
                self.beta_true.len(),
                self.p
            )));
        }
        self.psi_matrix().map(|_| ())
    }

    pub fn psi_matrix(&self) -> Result<DMatrix<f64>> {
        let q = self.q;
        let psi = match &self.psi {
            PsiKind::PositiveDefinite => {
                DMatrix::from_fn(q, q, |j, k| 0.56f64.powi((j as i32 - k as i32).abs()))
            }
            PsiKind::Singular => {
                DMatrix::from_fn(q, q, |j, k| if j == k && j < q / 2 { 0.56 } else { 0.0 })
            }
            PsiKind::ScaledIdentity(c) => DMatrix::identity(q, q) * *c,
            PsiKind::Custom(rows) => {
                if rows.len() != q || rows.iter().any(|r| r.len() != q) {
                    return Err(QlmmError::DimensionMismatch(format!(
                        "custom Psi must be {q}x{q}"
                    )));
                }
                DMatrix::from_fn(q, q, |j, k| rows[j][k])
            }
        };
        if q > 0 {
            if (&psi - psi.transpose()).amax() > 1e-12 * psi.amax().max(1.0) {
                return Err(QlmmError::NotPsd("Psi is not symmetric".into()));
            }
            let min = SymmetricEigen::new(psi.clone()).eigenvalues.min();
            if min < -1e-10 * psi.amax().max(1.0) {
                return Err(QlmmError::NotPsd(format!(
                    "Psi has eigenvalue {min:e}"
                )));
            }
        }
        Ok(psi)
    }

    pub fn full_beta(&self) -> Vec<f64> {
        let mut b = vec![0.0; self.p];
        b[..self.beta_true.len()].copy_from_slice(&self.beta_true);
        b
    }

    pub fn total_obs(&self) -> usize {
        self.n * self.m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub beta: Vec<f64>,
    pub psi: DMatrix<f64>,
    pub sigma2_e: f64,
    pub gammas: Vec<DVector<f64>>,
}

fn psd_sqrt(psi: &DMatrix<f64>) -> DMatrix<f64> {
    if psi.is_empty() {
        return psi.clone();
    }
    let eig = SymmetricEigen::new(psi.clone());
    let d = eig.eigenvalues.map(|e| e.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Lower Cholesky factor of the joint covariance of `(X_{1:qx}, Z)` rows.
fn joint_factor(qx: usize, q: usize, rho: f64) -> Result<DMatrix<f64>> {
    let k = qx + q;
    if k == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let cov = DMatrix::from_fn(k, k, |r, c| {
        if r == c {
            1.0
        } else if r < qx && c >= qx {
            rho.powi((c - qx + 1) as i32)
        } else if c < qx && r >= qx {
            rho.powi((r - qx + 1) as i32)
        } else {
            0.0
        }
    });
    match cov.clone().cholesky() {
        Some(ch) => Ok(ch.l()),
        None => {
            let min = SymmetricEigen::new(cov).eigenvalues.min();
            Err(QlmmError::NotPsd(format!(
                "joint covariance of (X, Z) has eigenvalue {min:e}"
            )))
        }
    }
}

/// Draws one dataset from the scenario, reproducibly from `scenario.seed`.
pub fn generate_dataset(scenario: &Scenario) -> Result<(ClusteredDataset, GroundTruth)> {
    scenario.validate()?;
    let (n, m, p, q) = (scenario.n, scenario.m, scenario.p, scenario.q);
    let qx = q.min(p);
    let factor = joint_factor(qx, q, scenario.rho)?;
    let psi = scenario.psi_matrix()?;
    let root = psd_sqrt(&psi);
    let beta = scenario.full_beta();
    let beta_v = DVector::from_column_slice(&beta);
    let sigma = scenario.sigma2_e.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let mut g = move || -> f64 { StandardNormal.sample(&mut rng) };

    let mut clusters = Vec::with_capacity(n);
    let mut gammas = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = DMatrix::zeros(m, p);
        let mut z = DMatrix::zeros(m, q);
        for r in 0..m {
            let u = DVector::from_fn(qx + q, |_, _| g());
            let v = &factor * u;
            for c in 0..qx {
                x[(r, c)] = v[c];
            }
            for c in 0..q {
                z[(r, c)] = v[qx + c];
            }
            for c in qx..p {
                x[(r, c)] = g();
            }
        }
        let gamma = &root * DVector::from_fn(q, |_, _| g());
        let eps = DVector::from_fn(m, |_, _| sigma * g());
        let y = &x * &beta_v + &z * &gamma + eps;
        clusters.push(Cluster::new(i.to_string(), y, x, z));
        gammas.push(gamma);
    }
    let dataset = ClusteredDataset::new(clusters, p, q)?;
    Ok((
        dataset,
        GroundTruth {
            beta,
            psi,
            sigma2_e: scenario.sigma2_e,
            gammas,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn psi_kinds() {
        let sc = Scenario { q: 4, ..Scenario::default() };
        let pd = sc.psi_matrix().unwrap();
        assert_relative_eq!(pd[(0, 2)], 0.56 * 0.56, epsilon = 1e-15);
        assert_eq!(pd[(3, 3)], 1.0);
        let sing = Scenario { psi: PsiKind::Singular, ..sc.clone() }.psi_matrix().unwrap();
        assert_eq!(sing.diagonal().as_slice(), &[0.56, 0.56, 0.0, 0.0]);
        let bad = Scenario {
            psi: PsiKind::Custom(vec![vec![1.0, 2.0], vec![2.0, 1.0]]),
            q: 2,
            ..Scenario::default()
        };
        assert!(matches!(bad.psi_matrix(), Err(QlmmError::NotPsd(_))));
    }

    #[test]
    fn total_must_divide() {
        let sc = Scenario::with_total(144, 8, 300, 2, PsiKind::Singular).unwrap();
        assert_eq!((sc.n, sc.m), (18, 8));
        assert!(Scenario::with_total(144, 7, 300, 2, PsiKind::Singular).is_err());
    }

    #[test]
    fn generation_is_reproducible_and_shaped() {
        let sc = Scenario { n: 5, p: 20, seed: 3, ..Scenario::default() };
        let (a, ta) = generate_dataset(&sc).unwrap();
        let (b, tb) = generate_dataset(&sc).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(ta, tb);
        assert_eq!(a.total_obs(), 20);
        assert_eq!(ta.beta[..5], [1.0, 0.5, 0.2, 0.1, 0.05]);
        let (c, _) = generate_dataset(&Scenario { seed: 4, ..sc }).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn correlation_structure() {
        let sc = Scenario { n: 4000, m: 1, p: 3, q: 2, rho: 0.2, seed: 1, beta_true: vec![1.0], ..Scenario::default() };
        let (ds, _) = generate_dataset(&sc).unwrap();
        let mut sxz = [[0.0; 2]; 3];
        for c in ds.clusters() {
            for k in 0..3 {
                for j in 0..2 {
                    sxz[k][j] += c.x()[(0, k)] * c.z()[(0, j)] / 4000.0;
                }
            }
        }
        for k in 0..2 {
            assert!((sxz[k][0] - 0.2).abs() < 0.06, "{sxz:?}");
            assert!((sxz[k][1] - 0.04).abs() < 0.06, "{sxz:?}");
        }
        assert!(sxz[2][0].abs() < 0.06 && sxz[2][1].abs() < 0.06);
        let sc0 = Scenario { rho: 0.0, ..sc };
        let (ds, _) = generate_dataset(&sc0).unwrap();
        let cross: f64 = ds.clusters().iter().map(|c| c.x()[(0, 0)] * c.z()[(0, 0)]).sum::<f64>() / 4000.0;
        assert!(cross.abs() < 0.06);
    }

    #[test]
    fn joint_factor_rejects_indefinite() {
        // q large with rho near 1 breaks positive definiteness
        assert!(matches!(joint_factor(10, 10, 0.95), Err(QlmmError::NotPsd(_))));
        assert!(joint_factor(14, 14, 0.2).is_ok());
    }
}
