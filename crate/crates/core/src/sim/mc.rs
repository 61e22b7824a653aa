use std::io::Write;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate_dataset, Scenario};
use crate::debias::{infer_coordinates, DebiasMode, InferenceOptions, InferenceRecord, NodewiseOptions};
use crate::error::{QlmmError, Result};
use crate::lasso::{cross_validate_a, lasso_fit, CvOptions, LassoOptions};
use crate::model::{BasisSpec, ClusteredDataset};
use crate::proxy::transform_dataset;
use crate::varcomp::{cross_fit_varcomp, project_onto_basis, SplitMode, VarCompOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarcompSim {
    pub basis: BasisSpec,
    pub mode: SplitMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McOptions {
    /// Candidate proxy constants; a single value skips cross-validation.
    pub a_grid: Vec<f64>,
    pub folds: usize,
    pub lasso: LassoOptions,
    pub nodewise: NodewiseOptions,
    pub alpha: f64,
    pub mode: DebiasMode,
    /// Zero-based coordinates to debias; out-of-range entries are dropped.
    pub targets: Vec<usize>,
    pub infer: bool,
    pub varcomp: Option<VarcompSim>,
}

impl Default for McOptions {
    fn default() -> Self {
        Self {
            a_grid: vec![0.0, 2.0, 4.0, 8.0, 16.0, 32.0],
            folds: 5,
            lasso: LassoOptions::default(),
            nodewise: NodewiseOptions::default(),
            alpha: 0.05,
            mode: DebiasMode::Whitened,
            targets: vec![0, 1, 2, 9],
            infer: true,
            varcomp: None,
        }
    }
}

impl McOptions {
    fn inference(&self) -> InferenceOptions {
        InferenceOptions {
            alpha: self.alpha,
            null_value: 0.0,
            mode: self.mode,
            lasso: self.lasso.clone(),
            nodewise: self.nodewise.clone(),
        }
    }

    fn targets_for(&self, p: usize) -> Vec<usize> {
        self.targets.iter().copied().filter(|&j| j < p).collect()
    }
}

/// Seed of replication `rep`, independent of scheduling.
pub fn rep_seed(master: u64, rep: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(rep as u64);
    rng.next_u64()
}

fn sub_seed(seed: u64, k: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng.next_u64()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateMetrics {
    /// One-based coordinate index.
    pub coordinate: usize,
    pub beta_true: f64,
    pub coverage: f64,
    pub rejection_rate: f64,
    /// Mean of `sqrt(V_hat)`.
    pub mean_sd: f64,
    /// Standard deviation of the debiased estimates across replications.
    pub empirical_sd: f64,
    pub mean_estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarcompMetrics {
    pub eta_true: Vec<f64>,
    pub mae_sigma2: f64,
    pub mae_eta: Vec<f64>,
    pub mean_sigma2: f64,
    pub mean_eta: Vec<f64>,
    pub median_eta_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McReport {
    pub scenario: Scenario,
    pub options: McOptions,
    pub reps: usize,
    pub succeeded: usize,
    pub failed: usize,
    /// `(replication, message)` for each failed replication.
    pub failures: Vec<(usize, String)>,
    pub coordinates: Vec<CoordinateMetrics>,
    pub sse_mean: f64,
    pub sse_median: f64,
    pub t_a_mean: f64,
    pub a_star_mean: f64,
    /// How often each grid value was selected.
    pub a_star_counts: Vec<(f64, usize)>,
    /// Largest solver KKT violation over every Lasso fit of the run.
    pub max_kkt: f64,
    pub varcomp: Option<VarcompMetrics>,
    /// Not serialized, so that reports of identical runs are identical.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl McReport {
    pub fn coordinate(&self, one_based: usize) -> Option<&CoordinateMetrics> {
        self.coordinates.iter().find(|c| c.coordinate == one_based)
    }
}

struct RepOutcome {
    a: f64,
    t_a: f64,
    sse: f64,
    kkt: f64,
    records: Vec<InferenceRecord>,
    varcomp: Option<(f64, Vec<f64>)>,
}

fn sse(beta: &[f64], truth: &[f64]) -> f64 {
    beta.iter().zip(truth).map(|(b, t)| (b - t).powi(2)).sum()
}

fn one_rep(
    scenario: &Scenario,
    options: &McOptions,
    seed: u64,
) -> Result<RepOutcome> {
    let sc = Scenario {
        seed: sub_seed(seed, 0),
        ..scenario.clone()
    };
    let (ds, truth) = generate_dataset(&sc)?;
    let cv = cross_validate_a(
        &ds,
        &options.a_grid,
        &CvOptions {
            folds: options.folds,
            seed: sub_seed(seed, 1),
            lasso: options.lasso.clone(),
        },
    )?;
    let a = cv.a_star;
    let targets = options.targets_for(ds.p());
    let (fit, records) = if options.infer {
        let out = infer_coordinates(&ds, a, &targets, &options.inference(), None)?;
        if let Some((j, msg)) = out.failures.iter().next() {
            return Err(QlmmError::NotIdentifiable {
                coordinate: *j,
                reason: msg.clone(),
            });
        }
        (out.fit, out.records)
    } else {
        (lasso_fit(&transform_dataset(&ds, a)?, &options.lasso)?, Vec::new())
    };
    let varcomp = match &options.varcomp {
        Some(vs) => {
            let basis = vs.basis.build(ds.q())?;
            let vc = cross_fit_varcomp(
                &ds,
                a,
                &basis,
                &VarCompOptions {
                    seed: sub_seed(seed, 2),
                    mode: vs.mode,
                    lasso: options.lasso.clone(),
                    ..VarCompOptions::default()
                },
            )?;
            Some((vc.sigma2_e_hat, vc.eta_hat))
        }
        None => None,
    };
    Ok(RepOutcome {
        a,
        t_a: fit.effective_sample_size,
        sse: sse(&fit.beta, &truth.beta),
        kkt: cv.max_kkt.max(fit.kkt_violation),
        records,
        varcomp,
    })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len();
    if k % 2 == 1 {
        s[k / 2]
    } else {
        0.5 * (s[k / 2 - 1] + s[k / 2])
    }
}

fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let mu = mean(v);
    (v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn coordinate_metrics(j: usize, beta_true: f64, records: &[&InferenceRecord]) -> CoordinateMetrics {
    let k = records.len().max(1) as f64;
    let covered = records
        .iter()
        .filter(|r| r.ci_lo <= beta_true && beta_true <= r.ci_hi)
        .count();
    let rejected = records.iter().filter(|r| r.p_value < r.alpha).count();
    let est: Vec<f64> = records.iter().map(|r| r.beta_db).collect();
    let sds: Vec<f64> = records.iter().map(|r| r.v_hat.sqrt()).collect();
    CoordinateMetrics {
        coordinate: j + 1,
        beta_true,
        coverage: covered as f64 / k,
        rejection_rate: rejected as f64 / k,
        mean_sd: mean(&sds),
        empirical_sd: sample_sd(&est),
        mean_estimate: mean(&est),
    }
}

/// Runs `reps` independent replications of the full pipeline.
pub fn run_mc(scenario: &Scenario, reps: usize, options: &McOptions) -> Result<McReport> {
    if reps == 0 {
        return Err(QlmmError::InvalidArgument("reps must be at least 1".into()));
    }
    scenario.validate()?;
    if options.a_grid.is_empty() {
        return Err(QlmmError::InvalidArgument("a grid is empty".into()));
    }
    let start = Instant::now();
    let outcomes: Vec<Result<RepOutcome>> = (0..reps)
        .into_par_iter()
        .map(|r| one_rep(scenario, options, rep_seed(scenario.seed, r)))
        .collect();

    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(v) => ok.push(v),
            Err(e) => failures.push((r, e.to_string())),
        }
    }
    let beta = scenario.full_beta();
    let coordinates = options
        .targets_for(scenario.p)
        .into_iter()
        .filter(|_| options.infer)
        .map(|j| {
            let recs: Vec<&InferenceRecord> = ok
                .iter()
                .flat_map(|o| o.records.iter().filter(|r| r.j == j))
                .collect();
            coordinate_metrics(j, beta[j], &recs)
        })
        .collect();
    let sses: Vec<f64> = ok.iter().map(|o| o.sse).collect();
    let t_as: Vec<f64> = ok.iter().map(|o| o.t_a).collect();
    let a_s: Vec<f64> = ok.iter().map(|o| o.a).collect();
    let a_star_counts = options
        .a_grid
        .iter()
        .map(|&a| (a, a_s.iter().filter(|v| **v == a).count()))
        .collect();
    let varcomp = match &options.varcomp {
        Some(vs) => {
            let basis = vs.basis.build(scenario.q)?;
            let eta_true = project_onto_basis(&scenario.psi_matrix()?, &basis)?;
            let fits: Vec<&(f64, Vec<f64>)> = ok.iter().filter_map(|o| o.varcomp.as_ref()).collect();
            let s2: Vec<f64> = fits.iter().map(|f| f.0).collect();
            let d = eta_true.len();
            let err_s2: Vec<f64> = s2.iter().map(|s| (s - scenario.sigma2_e).abs()).collect();
            let mae_eta = (0..d)
                .map(|k| mean(&fits.iter().map(|f| (f.1[k] - eta_true[k]).abs()).collect::<Vec<_>>()))
                .collect();
            let mean_eta = (0..d)
                .map(|k| mean(&fits.iter().map(|f| f.1[k]).collect::<Vec<_>>()))
                .collect();
            let l2: Vec<f64> = fits
                .iter()
                .map(|f| f.1.iter().zip(&eta_true).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                .collect();
            Some(VarcompMetrics {
                mae_sigma2: mean(&err_s2),
                mae_eta,
                mean_sigma2: mean(&s2),
                mean_eta,
                median_eta_error: median(&l2),
                eta_true,
            })
        }
        None => None,
    };
    Ok(McReport {
        scenario: scenario.clone(),
        options: options.clone(),
        reps,
        succeeded: ok.len(),
        failed: failures.len(),
        failures,
        coordinates,
        sse_mean: mean(&sses),
        sse_median: median(&sses),
        t_a_mean: mean(&t_as),
        a_star_mean: mean(&a_s),
        a_star_counts,
        max_kkt: ok.iter().map(|o| o.kkt).fold(0.0, f64::max),
        varcomp,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub a: f64,
    pub sse: f64,
    pub t_a_mean: f64,
    pub cov_05: f64,
    pub cov_0: f64,
    pub sd_05: f64,
    pub sd_0: f64,
    pub succeeded: usize,
    pub failed: usize,
    pub max_kkt: f64,
}

/// Fixed-`a` evaluation on common datasets: every grid value sees the same
/// replications. Coverage is reported at coordinate 2 (true 0.5) and the
/// null coordinate 10.
pub fn a_sweep(scenario: &Scenario, a_grid: &[f64], reps: usize, options: &McOptions) -> Result<Vec<SweepRow>> {
    if a_grid.is_empty() {
        return Err(QlmmError::InvalidArgument("a grid is empty".into()));
    }
    if reps == 0 {
        return Err(QlmmError::InvalidArgument("reps must be at least 1".into()));
    }
    scenario.validate()?;
    let (j05, j0) = (1usize, 9usize);
    if scenario.p <= j0 {
        return Err(QlmmError::InvalidArgument(
            "a sweep needs p >= 10 for the null coordinate".into(),
        ));
    }
    let inference = options.inference();
    let per_rep: Vec<Result<Vec<Result<(f64, f64, f64, Vec<InferenceRecord>)>>>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let seed = rep_seed(scenario.seed, r);
            let sc = Scenario {
                seed: sub_seed(seed, 0),
                ..scenario.clone()
            };
            let (ds, truth): (ClusteredDataset, _) = generate_dataset(&sc)?;
            Ok(a_grid
                .iter()
                .map(|&a| {
                    let out = infer_coordinates(&ds, a, &[j05, j0], &inference, None)?;
                    if let Some((j, msg)) = out.failures.iter().next() {
                        return Err(QlmmError::NotIdentifiable {
                            coordinate: *j,
                            reason: msg.clone(),
                        });
                    }
                    Ok((
                        sse(&out.fit.beta, &truth.beta),
                        out.fit.effective_sample_size,
                        out.fit.kkt_violation,
                        out.records,
                    ))
                })
                .collect())
        })
        .collect();

    let beta = scenario.full_beta();
    let mut rows = Vec::with_capacity(a_grid.len());
    for (g, &a) in a_grid.iter().enumerate() {
        let mut ok = Vec::new();
        let mut failed = 0;
        for rep in &per_rep {
            match rep {
                Ok(cells) => match &cells[g] {
                    Ok(v) => ok.push(v),
                    Err(_) => failed += 1,
                },
                Err(_) => failed += 1,
            }
        }
        let pick = |j: usize| -> Vec<&InferenceRecord> {
            ok.iter().flat_map(|o| o.3.iter().filter(move |r| r.j == j)).collect()
        };
        let m05 = coordinate_metrics(j05, beta[j05], &pick(j05));
        let m0 = coordinate_metrics(j0, beta[j0], &pick(j0));
        rows.push(SweepRow {
            a,
            sse: mean(&ok.iter().map(|o| o.0).collect::<Vec<_>>()),
            t_a_mean: mean(&ok.iter().map(|o| o.1).collect::<Vec<_>>()),
            cov_05: m05.coverage,
            cov_0: m0.coverage,
            sd_05: m05.mean_sd,
            sd_0: m0.mean_sd,
            succeeded: ok.len(),
            failed,
            max_kkt: ok.iter().map(|o| o.2).fold(0.0, f64::max),
        });
    }
    Ok(rows)
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

/// One summary row per report; coordinate and variance-component columns
/// follow the first report's layout.
pub fn write_mc_csv<W: Write>(reports: &[McReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = [
        "n", "m", "p", "q", "rho", "psi", "reps", "succeeded", "failed", "a_star_mean", "t_a_mean",
        "sse_mean", "sse_median", "max_kkt",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    if let Some(first) = reports.first() {
        for c in &first.coordinates {
            for k in ["cov", "rej", "sd", "esd"] {
                header.push(format!("{k}_{}", c.coordinate));
            }
        }
        if let Some(vc) = &first.varcomp {
            header.push("mae_sigma2".into());
            for k in 0..vc.mae_eta.len() {
                header.push(format!("mae_eta{}", k + 1));
            }
        }
    }
    w.write_record(&header)?;
    for r in reports {
        let s = &r.scenario;
        let psi = serde_json::to_string(&s.psi)?;
        let mut row = vec![
            s.n.to_string(),
            s.m.to_string(),
            s.p.to_string(),
            s.q.to_string(),
            fmt(s.rho),
            psi.trim_matches('"').to_string(),
            r.reps.to_string(),
            r.succeeded.to_string(),
            r.failed.to_string(),
            fmt(r.a_star_mean),
            fmt(r.t_a_mean),
            fmt(r.sse_mean),
            fmt(r.sse_median),
            fmt(r.max_kkt),
        ];
        for c in &r.coordinates {
            row.extend([fmt(c.coverage), fmt(c.rejection_rate), fmt(c.mean_sd), fmt(c.empirical_sd)]);
        }
        if let Some(vc) = &r.varcomp {
            row.push(fmt(vc.mae_sigma2));
            row.extend(vc.mae_eta.iter().map(|v| fmt(*v)));
        }
        if row.len() != header.len() {
            return Err(QlmmError::DimensionMismatch(
                "reports in one CSV must share coordinates and basis size".into(),
            ));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["a", "sse", "t_a", "cov_0.5", "cov_0", "sd_0.5", "sd_0", "succeeded", "failed"])?;
    for r in rows {
        w.write_record([
            fmt(r.a),
            fmt(r.sse),
            fmt(r.t_a_mean),
            fmt(r.cov_05),
            fmt(r.cov_0),
            fmt(r.sd_05),
            fmt(r.sd_0),
            r.succeeded.to_string(),
            r.failed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::PsiKind;

    fn small() -> Scenario {
        Scenario {
            n: 12,
            m: 4,
            p: 30,
            q: 2,
            seed: 5,
            ..Scenario::default()
        }
    }

    #[test]
    fn single_rep_rates_are_binary() {
        let rep = run_mc(&small(), 1, &McOptions::default()).unwrap();
        assert_eq!(rep.reps, 1);
        assert_eq!(rep.succeeded + rep.failed, 1);
        for c in &rep.coordinates {
            assert!(c.coverage == 0.0 || c.coverage == 1.0);
            assert!(c.rejection_rate == 0.0 || c.rejection_rate == 1.0);
        }
        assert!(run_mc(&small(), 0, &McOptions::default()).is_err());
    }

    #[test]
    fn reports_are_deterministic() {
        let opts = McOptions {
            varcomp: Some(VarcompSim {
                basis: BasisSpec::DiagonalHalves,
                mode: SplitMode::CrossFit,
            }),
            ..McOptions::default()
        };
        let a = run_mc(&small(), 4, &opts).unwrap();
        let b = run_mc(&small(), 4, &opts).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(a.coordinates.iter().all(|c| (0.0..=1.0).contains(&c.coverage)));
        assert_eq!(a.varcomp.as_ref().unwrap().eta_true, vec![1.0, 1.0]);
        let mut buf = Vec::new();
        write_mc_csv(&[a], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("n,m,p,q,rho,psi,"));
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn rep_seeds_are_distinct() {
        let s: Vec<u64> = (0..50).map(|r| rep_seed(9, r)).collect();
        let mut d = s.clone();
        d.sort();
        d.dedup();
        assert_eq!(d.len(), 50);
        assert_eq!(rep_seed(9, 3), s[3]);
    }

    #[test]
    fn sweep_without_random_design_matches_plain_lasso() {
        let sc = Scenario { q: 0, psi: PsiKind::ScaledIdentity(0.0), ..small() };
        let rows = a_sweep(&sc, &[0.0, 4.0], 2, &McOptions::default()).unwrap();
        assert_eq!(rows[0].sse, rows[1].sse);
        assert_eq!(rows[0].t_a_mean, 48.0);
        assert!(a_sweep(&sc, &[], 2, &McOptions::default()).is_err());
    }
}
