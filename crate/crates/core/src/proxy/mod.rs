//! Proxy covariance `Sigma_a = a Z Z^T + I` per cluster and the whitening it
//! induces.
//!
//! Each cluster stores an orthonormal basis `U` of the column span of `Z`
//! together with the eigenvalues `e_k >= 1` of `Sigma_a` on that span. Any
//! matrix power of `Sigma_a` then acts as `M + U diag(e^t - 1) U^T M`, which
//! costs `O(m r cols)` instead of forming the `m x m` matrix.

mod diagnostics;

pub use diagnostics::{lambda_star, sandwich_margins, SandwichMargins};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{QlmmError, Result};
use crate::model::ClusteredDataset;

/// Eigenvalues of `Sigma_a` may not fall below `1 - EIGEN_FLOOR_TOL`.
const EIGEN_FLOOR_TOL: f64 = 1e-10;

/// Spectral factor of one cluster's proxy covariance.
#[derive(Debug, Clone)]
pub struct ClusterFactor {
    m: usize,
    /// `m x r`, orthonormal columns.
    basis: DMatrix<f64>,
    /// Eigenvalues of `Sigma_a` on `span(basis)`; all other eigenvalues are 1.
    eigen: Vec<f64>,
}

impl ClusterFactor {
    fn identity(m: usize) -> Self {
        Self {
            m,
            basis: DMatrix::zeros(m, 0),
            eigen: Vec::new(),
        }
    }

    fn build(z: &DMatrix<f64>, a: f64) -> Result<Self> {
        let m = z.nrows();
        let q = z.ncols();
        if a == 0.0 || q == 0 || z.iter().all(|v| *v == 0.0) {
            return Ok(Self::identity(m));
        }
        if q < m {
            // Thin SVD: Sigma_a = I + U diag(a s^2) U^T.
            let svd = z.clone().svd(true, false);
            let u = svd.u.expect("svd computed with u");
            let eigen = svd.singular_values.iter().map(|s| 1.0 + a * s * s).collect();
            Ok(Self {
                m,
                basis: u,
                eigen,
            })
        } else {
            let sigma = z * z.transpose() * a + DMatrix::identity(m, m);
            let eig = SymmetricEigen::new(sigma);
            let min = eig.eigenvalues.min();
            if min < 1.0 - EIGEN_FLOOR_TOL {
                return Err(QlmmError::Numerical(format!(
                    "proxy covariance eigenvalue {min} below 1"
                )));
            }
            Ok(Self {
                m,
                basis: eig.eigenvectors,
                eigen: eig.eigenvalues.iter().map(|e| e.max(1.0)).collect(),
            })
        }
    }

    pub fn size(&self) -> usize {
        self.m
    }

    pub fn is_identity(&self) -> bool {
        self.eigen.iter().all(|e| *e == 1.0)
    }

    /// `Sigma_a^power * rhs`.
    pub fn apply_power(&self, rhs: &DMatrix<f64>, power: f64) -> DMatrix<f64> {
        if self.is_identity() {
            return rhs.clone();
        }
        let proj = self.basis.tr_mul(rhs);
        let mut scaled = proj;
        for (k, e) in self.eigen.iter().enumerate() {
            let f = e.powf(power) - 1.0;
            scaled.row_mut(k).scale_mut(f);
        }
        rhs + &self.basis * scaled
    }

    pub fn apply_power_vec(&self, rhs: &DVector<f64>, power: f64) -> DVector<f64> {
        if self.is_identity() {
            return rhs.clone();
        }
        let mut proj = self.basis.tr_mul(rhs);
        for (k, e) in self.eigen.iter().enumerate() {
            proj[k] *= e.powf(power) - 1.0;
        }
        rhs + &self.basis * proj
    }

    /// Dense `Sigma_a^power`, for small clusters and diagnostics.
    pub fn dense_power(&self, power: f64) -> DMatrix<f64> {
        self.apply_power(&DMatrix::identity(self.m, self.m), power)
    }

    /// `Tr(Sigma_a^power)`.
    pub fn trace_power(&self, power: f64) -> f64 {
        let r = self.eigen.len();
        (self.m - r) as f64 + self.eigen.iter().map(|e| e.powf(power)).sum::<f64>()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigen
    }
}

/// Per-cluster factorization of `Sigma_a` for a fixed proxy constant `a`.
#[derive(Debug, Clone)]
pub struct ProxyWhitener {
    a: f64,
    factors: Vec<ClusterFactor>,
    effective_sample_size: f64,
}

impl ProxyWhitener {
    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn factors(&self) -> &[ClusterFactor] {
        &self.factors
    }

    pub fn factor(&self, i: usize) -> &ClusterFactor {
        &self.factors[i]
    }

    pub fn n_clusters(&self) -> usize {
        self.factors.len()
    }

    /// `T_a = Tr(Sigma_a^{-1})`.
    pub fn effective_sample_size(&self) -> f64 {
        self.effective_sample_size
    }

    /// Whitener restricted to a subset of clusters.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let factors: Vec<_> = indices.iter().map(|&i| self.factors[i].clone()).collect();
        let effective_sample_size = factors.iter().map(|f| f.trace_power(-1.0)).sum();
        Self {
            a: self.a,
            factors,
            effective_sample_size,
        }
    }
}

pub fn build_whitener(dataset: &ClusteredDataset, a: f64) -> Result<ProxyWhitener> {
    if !(a >= 0.0) || !a.is_finite() {
        return Err(QlmmError::InvalidArgument(format!(
            "proxy constant a must be finite and nonnegative, got {a}"
        )));
    }
    let factors = dataset
        .clusters()
        .par_iter()
        .with_min_len(64)
        .map(|c| ClusterFactor::build(c.z(), a))
        .collect::<Result<Vec<_>>>()?;
    let effective_sample_size = factors.iter().map(|f| f.trace_power(-1.0)).sum();
    Ok(ProxyWhitener {
        a,
        factors,
        effective_sample_size,
    })
}

/// `(Sigma_a^i)^{-1/2} M` for cluster `i`.
pub fn apply_inv_sqrt(
    whitener: &ProxyWhitener,
    cluster: usize,
    rhs: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let f = whitener.factors.get(cluster).ok_or_else(|| {
        QlmmError::InvalidArgument(format!(
            "cluster index {cluster} out of range ({} clusters)",
            whitener.factors.len()
        ))
    })?;
    if rhs.nrows() != f.m {
        return Err(QlmmError::DimensionMismatch(format!(
            "cluster {cluster} has {} rows, argument has {}",
            f.m,
            rhs.nrows()
        )));
    }
    Ok(f.apply_power(rhs, -0.5))
}

pub fn effective_sample_size(whitener: &ProxyWhitener) -> f64 {
    whitener.effective_sample_size
}

/// Whitened response and design of one cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct WhitenedBlock {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct TransformedDataset {
    blocks: Vec<WhitenedBlock>,
    whitener: ProxyWhitener,
    p: usize,
}

impl TransformedDataset {
    /// Wraps already-whitened blocks. Used for arbitrary regression problems
    /// that should go through the same solver.
    pub fn from_blocks(blocks: Vec<WhitenedBlock>, p: usize) -> Result<Self> {
        for (i, b) in blocks.iter().enumerate() {
            if b.x.nrows() != b.y.len() || b.x.ncols() != p {
                return Err(QlmmError::DimensionMismatch(format!(
                    "block {i}: X is {}x{}, y has length {}, expected p = {p}",
                    b.x.nrows(),
                    b.x.ncols(),
                    b.y.len()
                )));
            }
        }
        let factors: Vec<_> = blocks.iter().map(|b| ClusterFactor::identity(b.y.len())).collect();
        let effective_sample_size = factors.iter().map(|f| f.trace_power(-1.0)).sum();
        Ok(Self {
            blocks,
            whitener: ProxyWhitener {
                a: 0.0,
                factors,
                effective_sample_size,
            },
            p,
        })
    }

    pub fn blocks(&self) -> &[WhitenedBlock] {
        &self.blocks
    }

    pub fn whitener(&self) -> &ProxyWhitener {
        &self.whitener
    }

    pub fn a(&self) -> f64 {
        self.whitener.a
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn n_clusters(&self) -> usize {
        self.blocks.len()
    }

    pub fn total_obs(&self) -> usize {
        self.blocks.iter().map(|b| b.y.len()).sum()
    }

    pub fn effective_sample_size(&self) -> f64 {
        self.whitener.effective_sample_size
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            blocks: indices.iter().map(|&i| self.blocks[i].clone()).collect(),
            whitener: self.whitener.subset(indices),
            p: self.p,
        }
    }
}

pub fn transform_dataset(dataset: &ClusteredDataset, a: f64) -> Result<TransformedDataset> {
    let whitener = build_whitener(dataset, a)?;
    Ok(transform_with(dataset, whitener))
}

pub fn transform_with(dataset: &ClusteredDataset, whitener: ProxyWhitener) -> TransformedDataset {
    let blocks = dataset
        .clusters()
        .par_iter()
        .with_min_len(64)
        .zip(whitener.factors.par_iter().with_min_len(64))
        .map(|(c, f)| WhitenedBlock {
            y: f.apply_power_vec(c.y(), -0.5),
            x: f.apply_power(c.x(), -0.5),
        })
        .collect();
    TransformedDataset {
        blocks,
        whitener,
        p: dataset.p(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Cluster;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dataset(seed: u64, sizes: &[usize], p: usize, q: usize) -> ClusteredDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clusters = sizes
            .iter()
            .enumerate()
            .map(|(i, &m)| {
                Cluster::new(
                    i.to_string(),
                    DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0)),
                    DMatrix::from_fn(m, p, |_, _| rng.random_range(-1.0..1.0)),
                    DMatrix::from_fn(m, q, |_, _| rng.random_range(-1.5..1.5)),
                )
            })
            .collect();
        ClusteredDataset::new(clusters, p, q).unwrap()
    }

    /// Inverse square root via a dense symmetric eigendecomposition.
    fn oracle_power(sigma: &DMatrix<f64>, power: f64) -> DMatrix<f64> {
        let eig = SymmetricEigen::new(sigma.clone());
        let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|e| e.powf(power)));
        &eig.eigenvectors * d * eig.eigenvectors.transpose()
    }

    fn proxy(z: &DMatrix<f64>, a: f64) -> DMatrix<f64> {
        z * z.transpose() * a + DMatrix::identity(z.nrows(), z.nrows())
    }

    #[test]
    fn zero_random_design_is_identity() {
        let mut ds = random_dataset(1, &[3, 4], 3, 2);
        ds = ClusteredDataset::new(
            ds.clusters()
                .iter()
                .map(|c| Cluster::new(c.id(), c.y().clone(), c.x().clone(), DMatrix::zeros(c.size(), 2)))
                .collect(),
            3,
            2,
        )
        .unwrap();
        let w = build_whitener(&ds, 3.0).unwrap();
        assert_eq!(w.effective_sample_size(), 7.0);
        let m = ds.cluster(0).x().clone();
        assert_eq!(apply_inv_sqrt(&w, 0, &m).unwrap(), m);
    }

    #[test]
    fn a_zero_is_identity_and_copies_data() {
        let ds = random_dataset(2, &[4, 4, 4], 5, 2);
        let t = transform_dataset(&ds, 0.0).unwrap();
        assert_eq!(t.effective_sample_size(), 12.0);
        for (b, c) in t.blocks().iter().zip(ds.clusters()) {
            assert_eq!(&b.y, c.y());
            assert_eq!(&b.x, c.x());
        }
    }

    #[test]
    fn q_zero_is_identity_for_every_a() {
        let ds = random_dataset(3, &[2, 5], 3, 0);
        for a in [0.5, 4.0, 100.0] {
            let t = transform_dataset(&ds, a).unwrap();
            assert_eq!(t.effective_sample_size(), 7.0);
            assert_eq!(&t.blocks()[1].x, ds.cluster(1).x());
        }
    }

    #[test]
    fn two_by_two_matches_eigendecomposition() {
        let z = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        let f = ClusterFactor::build(&z, 1.0).unwrap();
        let sigma = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        assert_relative_eq!(proxy(&z, 1.0), sigma);
        let expected = oracle_power(&sigma, -0.5);
        assert_relative_eq!(f.dense_power(-0.5), expected, epsilon = 1e-14);
        // eigenvalues 3 and 1: trace of inverse = 4/3
        assert_relative_eq!(f.trace_power(-1.0), 1.0 / 3.0 + 1.0, epsilon = 1e-14);
    }

    #[test]
    fn negative_a_rejected() {
        let ds = random_dataset(4, &[3], 2, 1);
        assert!(matches!(build_whitener(&ds, -1.0), Err(QlmmError::InvalidArgument(_))));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let ds = random_dataset(5, &[3, 4], 2, 1);
        let w = build_whitener(&ds, 1.0).unwrap();
        let bad = DMatrix::zeros(4, 2);
        assert!(matches!(apply_inv_sqrt(&w, 0, &bad), Err(QlmmError::DimensionMismatch(_))));
    }

    #[test]
    fn whitening_square_root_gives_orthonormal_result() {
        // both factorization routes: q < m and q >= m
        for (m, q) in [(6, 2), (3, 5), (4, 4)] {
            let ds = random_dataset(6 + m as u64, &[m], 2, q);
            let a = 1.7;
            let w = build_whitener(&ds, a).unwrap();
            let sigma = proxy(ds.cluster(0).z(), a);
            let half = oracle_power(&sigma, 0.5);
            let out = apply_inv_sqrt(&w, 0, &half).unwrap();
            assert_relative_eq!(out.transpose() * &out, DMatrix::identity(m, m), epsilon = 1e-10);

            let rhs = DMatrix::from_fn(m, 3, |i, j| (i as f64 + 1.0) * (j as f64 - 1.0));
            let twice = apply_inv_sqrt(&w, 0, &apply_inv_sqrt(&w, 0, &rhs).unwrap()).unwrap();
            let dense_inv = sigma.clone().try_inverse().unwrap();
            assert_relative_eq!(twice, &dense_inv * &rhs, epsilon = 1e-10);

            assert_relative_eq!(
                w.effective_sample_size(),
                dense_inv.trace(),
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn round_trip_with_oracle_square_root() {
        let ds = random_dataset(11, &[5, 3, 6], 4, 3);
        let a = 2.5;
        let t = transform_dataset(&ds, a).unwrap();
        for (b, c) in t.blocks().iter().zip(ds.clusters()) {
            let half = oracle_power(&proxy(c.z(), a), 0.5);
            assert_relative_eq!(&half * &b.x, c.x().clone(), epsilon = 1e-10);
            assert_relative_eq!(&half * &b.y, c.y().clone(), epsilon = 1e-10);
        }
    }

    #[test]
    fn effective_sample_size_non_increasing_in_a() {
        let ds = random_dataset(12, &[4; 10], 2, 2);
        let grid = [0.0, 0.1, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0];
        let ts: Vec<f64> = grid
            .iter()
            .map(|a| build_whitener(&ds, *a).unwrap().effective_sample_size())
            .collect();
        for w in ts.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    proptest! {
        #[test]
        fn remark_bounds_and_inverse_identity(
            seed in any::<u64>(),
            sizes in prop::collection::vec(1usize..7, 1..6),
            q in 0usize..6,
            a in 0.0f64..50.0,
        ) {
            let ds = random_dataset(seed, &sizes, 2, q);
            let w = build_whitener(&ds, a).unwrap();
            let t = w.effective_sample_size();
            let lower: usize = sizes.iter().map(|m| m.saturating_sub(q)).sum();
            let total: usize = sizes.iter().sum();
            prop_assert!(lower as f64 - 1e-9 <= t && t <= total as f64 + 1e-9);
            for (i, c) in ds.clusters().iter().enumerate() {
                let m = c.size();
                let id = DMatrix::identity(m, m);
                let inv_sqrt = apply_inv_sqrt(&w, i, &id).unwrap();
                let prod = proxy(c.z(), a) * &inv_sqrt * &inv_sqrt;
                let err = (prod - &id).norm() / (m as f64).sqrt();
                prop_assert!(err <= 1e-8, "relative Frobenius error {}", err);
                prop_assert!((inv_sqrt.clone() - inv_sqrt.transpose()).amax() < 1e-12);
            }
        }
    }
}
