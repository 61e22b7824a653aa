//! Clustered mixed-effects data and the parameter types shared by every
//! estimation stage.
//!
//! A dataset is an ordered list of clusters, each holding its own response
//! vector and design blocks. Clusters are never stacked into one `N x p`
//! matrix; everything downstream streams over them block by block.

use std::fmt;
use std::hash::{Hash, Hasher};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{QlmmError, Result};

/// One cluster: `y = X beta + Z gamma + eps` with `m` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    id: String,
    y: DVector<f64>,
    x: DMatrix<f64>,
    z: DMatrix<f64>,
}

impl Cluster {
    pub fn new(id: impl Into<String>, y: DVector<f64>, x: DMatrix<f64>, z: DMatrix<f64>) -> Self {
        Self {
            id: id.into(),
            y,
            x,
            z,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    /// Number of observations in the cluster.
    pub fn size(&self) -> usize {
        self.y.len()
    }
}

/// A single structural problem found by [`validate_dataset`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub cluster: Option<String>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.cluster {
            Some(id) => write!(f, "cluster {id}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dimensions {
    /// Number of clusters.
    pub n: usize,
    pub p: usize,
    pub q: usize,
    /// Total number of observations.
    pub total: usize,
    /// Per-cluster sizes, in cluster order.
    pub sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredDataset {
    clusters: Vec<Cluster>,
    p: usize,
    q: usize,
}

impl ClusteredDataset {
    /// Builds a dataset and rejects it if [`validate_dataset`] reports any
    /// violation.
    pub fn new(clusters: Vec<Cluster>, p: usize, q: usize) -> Result<Self> {
        let ds = Self { clusters, p, q };
        let report = validate_dataset(&ds);
        if !report.is_valid() {
            let msg = report
                .violations
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join("; ");
            return Err(QlmmError::InvalidDataset(msg));
        }
        Ok(ds)
    }

    /// Builds a dataset without checking it. Use [`validate_dataset`] to
    /// inspect the result.
    pub fn new_unchecked(clusters: Vec<Cluster>, p: usize, q: usize) -> Self {
        Self { clusters, p, q }
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn cluster(&self, i: usize) -> &Cluster {
        &self.clusters[i]
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn total_obs(&self) -> usize {
        self.clusters.iter().map(Cluster::size).sum()
    }

    pub fn dimensions(&self) -> Dimensions {
        dimensions(self)
    }

    /// Dataset restricted to the given cluster indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            clusters: indices.iter().map(|&i| self.clusters[i].clone()).collect(),
            p: self.p,
            q: self.q,
        }
    }

    /// Prepends a column of ones to every fixed-effects block. The new
    /// column has index 0 and is meant to be left unpenalized.
    pub fn with_intercept(&self) -> Self {
        let clusters = self
            .clusters
            .iter()
            .map(|c| {
                let m = c.size();
                let x = c.x.clone().insert_column(0, 1.0);
                debug_assert_eq!(x.nrows(), m);
                Cluster::new(c.id.clone(), c.y.clone(), x, c.z.clone())
            })
            .collect();
        Self {
            clusters,
            p: self.p + 1,
            q: self.q,
        }
    }

    /// Stable 64-bit fingerprint of the numeric content.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.p.hash(&mut h);
        self.q.hash(&mut h);
        for c in &self.clusters {
            c.id.hash(&mut h);
            for v in c.y.iter().chain(c.x.iter()).chain(c.z.iter()) {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Lists every dimensional or finiteness problem in the dataset. Never fails.
pub fn validate_dataset(dataset: &ClusteredDataset) -> ValidationReport {
    let mut violations = Vec::new();
    if dataset.clusters.is_empty() {
        violations.push(Violation {
            cluster: None,
            message: "dataset has no clusters".into(),
        });
    }
    for c in &dataset.clusters {
        let mut push = |message: String| {
            violations.push(Violation {
                cluster: Some(c.id.clone()),
                message,
            })
        };
        let m = c.y.len();
        if m == 0 {
            push("cluster has no observations".into());
        }
        if c.x.nrows() != m {
            push(format!("X has {} rows but y has length {m}", c.x.nrows()));
        }
        if c.z.nrows() != m {
            push(format!("Z has {} rows but y has length {m}", c.z.nrows()));
        }
        if c.x.ncols() != dataset.p {
            push(format!("X has {} columns, expected p = {}", c.x.ncols(), dataset.p));
        }
        if c.z.ncols() != dataset.q {
            push(format!("Z has {} columns, expected q = {}", c.z.ncols(), dataset.q));
        }
        if c.y.iter().any(|v| !v.is_finite()) {
            push("y contains non-finite entries".into());
        }
        if c.x.iter().any(|v| !v.is_finite()) {
            push("X contains non-finite entries".into());
        }
        if c.z.iter().any(|v| !v.is_finite()) {
            push("Z contains non-finite entries".into());
        }
    }
    ValidationReport { violations }
}

pub fn dimensions(dataset: &ClusteredDataset) -> Dimensions {
    let sizes: Vec<usize> = dataset.clusters.iter().map(Cluster::size).collect();
    Dimensions {
        n: sizes.len(),
        p: dataset.p,
        q: dataset.q,
        total: sizes.iter().sum(),
        sizes,
    }
}

/// Sparse fixed-effects vector together with its support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedEffects {
    pub beta: Vec<f64>,
    pub support: Vec<usize>,
}

impl FixedEffects {
    pub fn new(beta: Vec<f64>) -> Self {
        let support = beta
            .iter()
            .enumerate()
            .filter(|(_, b)| **b != 0.0)
            .map(|(j, _)| j)
            .collect();
        Self { beta, support }
    }

    pub fn sparsity(&self) -> usize {
        self.support.len()
    }
}

/// Symmetric basis `G_1..G_d` parameterizing the random-effects covariance
/// as `Psi = sum_j eta_j G_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Basis {
    mats: Vec<DMatrix<f64>>,
    q: usize,
}

impl Basis {
    pub fn new(mats: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = mats
            .first()
            .ok_or_else(|| QlmmError::InvalidArgument("basis must be nonempty".into()))?;
        let q = first.nrows();
        for (j, g) in mats.iter().enumerate() {
            if g.nrows() != q || g.ncols() != q {
                return Err(QlmmError::DimensionMismatch(format!(
                    "basis matrix {j} is {}x{}, expected {q}x{q}",
                    g.nrows(),
                    g.ncols()
                )));
            }
            let asym = (g - g.transpose()).amax();
            if asym > 1e-12 * g.amax().max(1.0) {
                return Err(QlmmError::InvalidArgument(format!(
                    "basis matrix {j} is not symmetric"
                )));
            }
        }
        Ok(Self { mats, q })
    }

    /// `G_1 = diag(I_{q/2}, 0)`, `G_2 = diag(0, I_{q - q/2})`.
    pub fn diagonal_halves(q: usize) -> Result<Self> {
        if q < 2 {
            return Err(QlmmError::InvalidArgument(
                "diagonal-halves basis needs q >= 2".into(),
            ));
        }
        let half = q / 2;
        let g1 = DMatrix::from_fn(q, q, |r, c| if r == c && r < half { 1.0 } else { 0.0 });
        let g2 = DMatrix::from_fn(q, q, |r, c| if r == c && r >= half { 1.0 } else { 0.0 });
        Self::new(vec![g1, g2])
    }

    pub fn identity(q: usize) -> Result<Self> {
        if q == 0 {
            return Err(QlmmError::InvalidArgument("identity basis needs q >= 1".into()));
        }
        Self::new(vec![DMatrix::identity(q, q)])
    }

    /// One single-entry diagonal matrix `E_jj` per random effect.
    pub fn free_diagonal(q: usize) -> Result<Self> {
        if q == 0 {
            return Err(QlmmError::InvalidArgument(
                "free-diagonal basis needs q >= 1".into(),
            ));
        }
        Self::new(
            (0..q)
                .map(|j| DMatrix::from_fn(q, q, |r, c| if r == j && c == j { 1.0 } else { 0.0 }))
                .collect(),
        )
    }

    pub fn matrices(&self) -> &[DMatrix<f64>] {
        &self.mats
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn q(&self) -> usize {
        self.q
    }
}

/// Serializable description of a basis, resolved against `q` at run time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisSpec {
    DiagonalHalves,
    Identity,
    FreeDiagonal,
    /// Explicit list of `q x q` matrices, row-major.
    Explicit(Vec<Vec<Vec<f64>>>),
}

impl BasisSpec {
    pub fn build(&self, q: usize) -> Result<Basis> {
        match self {
            BasisSpec::DiagonalHalves => Basis::diagonal_halves(q),
            BasisSpec::Identity => Basis::identity(q),
            BasisSpec::FreeDiagonal => Basis::free_diagonal(q),
            BasisSpec::Explicit(mats) => {
                let mut out = Vec::with_capacity(mats.len());
                for rows in mats {
                    let r = rows.len();
                    if rows.iter().any(|row| row.len() != r) {
                        return Err(QlmmError::DimensionMismatch(
                            "explicit basis matrix is not square".into(),
                        ));
                    }
                    out.push(DMatrix::from_fn(r, r, |i, j| rows[i][j]));
                }
                let basis = Basis::new(out)?;
                if basis.q() != q {
                    return Err(QlmmError::DimensionMismatch(format!(
                        "explicit basis is {0}x{0}, data has q = {q}",
                        basis.q()
                    )));
                }
                Ok(basis)
            }
        }
    }
}

/// Variance components `(sigma2_e, eta)` with the basis they refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct VarComps {
    pub sigma2_e: f64,
    pub eta: Vec<f64>,
    pub basis: Basis,
}

impl VarComps {
    pub fn new(sigma2_e: f64, eta: Vec<f64>, basis: Basis) -> Result<Self> {
        if !(sigma2_e > 0.0) {
            return Err(QlmmError::InvalidArgument(format!(
                "sigma2_e must be positive, got {sigma2_e}"
            )));
        }
        if eta.len() != basis.len() {
            return Err(QlmmError::DimensionMismatch(format!(
                "eta has length {}, basis has {} matrices",
                eta.len(),
                basis.len()
            )));
        }
        Ok(Self {
            sigma2_e,
            eta,
            basis,
        })
    }

    pub fn psi(&self) -> DMatrix<f64> {
        let mut psi = DMatrix::zeros(self.basis.q(), self.basis.q());
        for (e, g) in self.eta.iter().zip(self.basis.matrices()) {
            psi += g * *e;
        }
        psi
    }
}
