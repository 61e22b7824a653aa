use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::build_whitener;
use crate::error::{QlmmError, Result};
use crate::model::ClusteredDataset;

fn check_square(psi: &DMatrix<f64>, q: usize) -> Result<()> {
    if psi.nrows() != q || psi.ncols() != q {
        return Err(QlmmError::DimensionMismatch(format!(
            "Psi is {}x{}, expected {q}x{q}",
            psi.nrows(),
            psi.ncols()
        )));
    }
    Ok(())
}

fn sym_eigenvalues(psi: &DMatrix<f64>) -> Vec<f64> {
    let sym = (psi + psi.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.iter().copied().collect()
}

/// Theoretical penalty level
/// `sqrt(Tr(Sigma_a^-1 Sigma_theta Sigma_a^-1) log p) / Tr(Sigma_a^-1)`
/// with `Sigma_theta^i = Z^i Psi Z^i^T + sigma2_e I`.
pub fn lambda_star(
    dataset: &ClusteredDataset,
    a: f64,
    psi: &DMatrix<f64>,
    sigma2_e: f64,
) -> Result<f64> {
    check_square(psi, dataset.q())?;
    if !(sigma2_e > 0.0) {
        return Err(QlmmError::InvalidArgument(format!(
            "sigma2_e must be positive, got {sigma2_e}"
        )));
    }
    if dataset.q() > 0 {
        let eig = sym_eigenvalues(psi);
        let max_abs = eig.iter().fold(0.0f64, |m, e| m.max(e.abs()));
        let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
        if min < -1e-10 * max_abs.max(1.0) {
            return Err(QlmmError::NotPsd(format!("Psi has eigenvalue {min}")));
        }
    }
    let whitener = build_whitener(dataset, a)?;
    let t = whitener.effective_sample_size();
    if !(t > 0.0) {
        return Err(QlmmError::InvalidArgument("effective sample size is zero".into()));
    }
    let mut sandwich_trace = 0.0;
    for (c, f) in dataset.clusters().iter().zip(whitener.factors()) {
        sandwich_trace += sigma2_e * f.trace_power(-2.0);
        if dataset.q() > 0 {
            let wz = f.apply_power(c.z(), -1.0);
            let gram = wz.tr_mul(&wz);
            sandwich_trace += gram.component_mul(psi).sum();
        }
    }
    let log_p = (dataset.p() as f64).ln();
    Ok((sandwich_trace * log_p).sqrt() / t)
}

/// Smallest eigenvalues of the two Loewner gaps in the proxy sandwich
/// `c_lo Sigma_a^-1 <= Sigma_theta^-1 <= c_hi Sigma_a^-1`. Both are
/// nonnegative up to rounding when the sandwich holds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SandwichMargins {
    pub lower: f64,
    pub upper: f64,
}

pub fn sandwich_margins(
    dataset: &ClusteredDataset,
    a: f64,
    psi: &DMatrix<f64>,
    sigma2_e: f64,
) -> Result<SandwichMargins> {
    check_square(psi, dataset.q())?;
    if !(a > 0.0) {
        return Err(QlmmError::InvalidArgument(format!("a must be positive, got {a}")));
    }
    if !(sigma2_e > 0.0) {
        return Err(QlmmError::InvalidArgument(format!(
            "sigma2_e must be positive, got {sigma2_e}"
        )));
    }
    let eig = sym_eigenvalues(psi);
    let psi_min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    let psi_max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if dataset.q() == 0 || !(psi_min > 1e-12 * psi_max.abs().max(1.0)) {
        return Err(QlmmError::Singular(format!(
            "Psi must be positive definite, smallest eigenvalue {psi_min}"
        )));
    }
    let c_lo = (1.0 / sigma2_e).min(a / psi_max);
    let c_hi = (1.0 / sigma2_e).max(a / psi_min);

    let whitener = build_whitener(dataset, a)?;
    let mut lower = f64::INFINITY;
    let mut upper = f64::INFINITY;
    for (c, f) in dataset.clusters().iter().zip(whitener.factors()) {
        let m = c.size();
        let sigma_theta = c.z() * psi * c.z().transpose() + DMatrix::identity(m, m) * sigma2_e;
        let theta_inv = sigma_theta
            .cholesky()
            .ok_or_else(|| QlmmError::Numerical("Sigma_theta not positive definite".into()))?
            .inverse();
        let proxy_inv = f.dense_power(-1.0);
        let lo_gap = &theta_inv - &proxy_inv * c_lo;
        let hi_gap = &proxy_inv * c_hi - &theta_inv;
        lower = lower.min(sym_eigenvalues(&lo_gap).into_iter().fold(f64::INFINITY, f64::min));
        upper = upper.min(sym_eigenvalues(&hi_gap).into_iter().fold(f64::INFINITY, f64::min));
    }
    Ok(SandwichMargins { lower, upper })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Cluster;
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dataset(seed: u64, n: usize, m: usize, p: usize, q: usize) -> ClusteredDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clusters = (0..n)
            .map(|i| {
                Cluster::new(
                    i.to_string(),
                    DVector::zeros(m),
                    DMatrix::zeros(m, p),
                    DMatrix::from_fn(m, q, |_, _| rng.random_range(-1.0..1.0)),
                )
            })
            .collect();
        ClusteredDataset::new(clusters, p, q).unwrap()
    }

    /// Dense block-diagonal evaluation of the lambda_star formula.
    fn dense_lambda_star(ds: &ClusteredDataset, a: f64, psi: &DMatrix<f64>, s2: f64) -> f64 {
        let n_obs = ds.total_obs();
        let mut proxy = DMatrix::zeros(n_obs, n_obs);
        let mut theta = DMatrix::zeros(n_obs, n_obs);
        let mut off = 0;
        for c in ds.clusters() {
            let m = c.size();
            let z = c.z();
            proxy
                .view_mut((off, off), (m, m))
                .copy_from(&(z * z.transpose() * a + DMatrix::identity(m, m)));
            theta
                .view_mut((off, off), (m, m))
                .copy_from(&(z * psi * z.transpose() + DMatrix::identity(m, m) * s2));
            off += m;
        }
        let inv = proxy.try_inverse().unwrap();
        let num = (&inv * theta * &inv).trace();
        (num * (ds.p() as f64).ln()).sqrt() / inv.trace()
    }

    #[test]
    fn matches_dense_oracle() {
        let ds = dataset(1, 3, 4, 50, 2);
        let psi = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
        for a in [0.0, 0.7, 3.0] {
            let got = lambda_star(&ds, a, &psi, 0.25).unwrap();
            assert_relative_eq!(got, dense_lambda_star(&ds, a, &psi, 0.25), epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_random_design_reduces_to_linear_model_rate() {
        let mut ds = dataset(2, 4, 3, 20, 2);
        ds = ClusteredDataset::new(
            ds.clusters()
                .iter()
                .map(|c| Cluster::new(c.id(), c.y().clone(), c.x().clone(), DMatrix::zeros(3, 2)))
                .collect(),
            20,
            2,
        )
        .unwrap();
        let got = lambda_star(&ds, 2.0, &DMatrix::identity(2, 2), 0.3).unwrap();
        assert_relative_eq!(got, (0.3 * (20f64).ln() / 12.0).sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn non_psd_psi_rejected() {
        let ds = dataset(3, 2, 3, 5, 2);
        let psi = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(lambda_star(&ds, 1.0, &psi, 1.0), Err(QlmmError::NotPsd(_))));
    }

    #[test]
    fn minimizer_at_eta_over_sigma2() {
        let ds = dataset(4, 20, 6, 100, 2);
        let eta = 0.6;
        let s2 = 0.25;
        let psi = DMatrix::identity(2, 2) * eta;
        let grid: Vec<f64> = (1..=40).map(|k| 0.2 * k as f64).collect();
        let vals: Vec<f64> = grid.iter().map(|a| lambda_star(&ds, *a, &psi, s2).unwrap()).collect();
        let best = (0..grid.len())
            .min_by(|&i, &j| vals[i].partial_cmp(&vals[j]).unwrap())
            .unwrap();
        assert!((grid[best] - eta / s2).abs() <= 0.2 + 1e-12);
    }

    #[test]
    fn sandwich_exact_when_proxy_is_truth() {
        let ds = dataset(5, 3, 4, 2, 2);
        let m = sandwich_margins(&ds, 1.0, &DMatrix::identity(2, 2), 1.0).unwrap();
        assert!(m.lower.abs() < 1e-12 && m.upper.abs() < 1e-12);
        let m = sandwich_margins(&ds, 2.0, &(DMatrix::identity(2, 2) * 2.0), 1.0).unwrap();
        assert!(m.lower >= -1e-12 && m.upper >= -1e-12);
    }

    #[test]
    fn sandwich_holds_for_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for k in 0..20 {
            let q = 1 + k % 3;
            let ds = dataset(100 + k as u64, 3, 2 + k % 5, 2, q);
            let b = DMatrix::from_fn(q, q, |_, _| rng.random_range(-1.0..1.0));
            let psi = &b * b.transpose() + DMatrix::identity(q, q) * 0.1;
            for a in [0.5, 2.0] {
                let m = sandwich_margins(&ds, a, &psi, 0.4).unwrap();
                assert!(m.lower >= -1e-8 && m.upper >= -1e-8, "{m:?}");
            }
        }
    }

    #[test]
    fn sandwich_rejects_singular_psi() {
        let ds = dataset(6, 2, 3, 2, 2);
        let psi = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]));
        assert!(matches!(
            sandwich_margins(&ds, 1.0, &psi, 1.0),
            Err(QlmmError::Singular(_))
        ));
    }
}
