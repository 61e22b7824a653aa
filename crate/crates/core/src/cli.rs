//! Command-line entry points.
//!
//! Every run is described by a [`RunConfig`]: a JSON file given with
//! `--config`, with individual flags overriding its fields. The effective
//! configuration is echoed in each JSON report so the run can be repeated.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::debias::{bh_fdr, infer_coordinates, DebiasMode, InferenceOptions, InferenceRecord, NodewiseOptions};
use crate::error::{QlmmError, Result};
use crate::io::{load_csv, load_csv_with_matrix, write_json, write_records_csv, Format, LongFormatSchema};
use crate::lasso::{cross_validate_a, lasso_fit, CvOptions, CvResult, FixedEffectsFit, LambdaNormalizer, LambdaRule, LassoOptions};
use crate::model::{BasisSpec, ClusteredDataset};
use crate::proxy::transform_dataset;
use crate::sim::{run_mc, write_mc_csv, McOptions, McReport, Scenario, VarcompSim};
use crate::varcomp::{cross_fit_varcomp, SplitMode, VarCompFit, VarCompOptions};

/// Proxy constant: one value, or a grid searched by cross-validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ASpec {
    One(f64),
    Grid(Vec<f64>),
}

impl ASpec {
    pub fn grid(&self) -> Vec<f64> {
        match self {
            ASpec::One(a) => vec![*a],
            ASpec::Grid(g) => g.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub path: PathBuf,
    pub schema: LongFormatSchema,
    /// Wide matrix of fixed effects, row-aligned with `path`.
    #[serde(default)]
    pub fixed_matrix: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<DataConfig>,
    pub a: ASpec,
    pub folds: usize,
    pub lambda: LambdaRule,
    pub normalizer: LambdaNormalizer,
    pub alpha: f64,
    /// One-based coordinates; empty means all of them.
    pub targets: Vec<usize>,
    pub basis: BasisSpec,
    pub seed: u64,
    pub mode: DebiasMode,
    pub split: SplitMode,
    pub intercept: bool,
    /// Benjamini-Hochberg level applied to the inference p-values.
    pub fdr: Option<f64>,
    /// Worker threads; 0 lets the runtime decide.
    pub threads: usize,
    pub format: Format,
    pub output: Option<PathBuf>,
    /// Simulation cells; every cell is seeded from `seed`.
    pub scenarios: Vec<Scenario>,
    pub reps: usize,
    /// Also estimate variance components in each simulated replication.
    pub simulate_varcomp: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            a: ASpec::Grid(vec![0.0, 2.0, 4.0, 8.0, 16.0, 32.0]),
            folds: 5,
            lambda: LambdaRule::ScaledLasso,
            normalizer: LambdaNormalizer::TotalObs,
            alpha: 0.05,
            targets: Vec::new(),
            basis: BasisSpec::DiagonalHalves,
            seed: 0,
            mode: DebiasMode::Whitened,
            split: SplitMode::CrossFit,
            intercept: false,
            fdr: None,
            threads: 0,
            format: Format::Json,
            output: None,
            scenarios: vec![Scenario::default()],
            reps: 300,
            simulate_varcomp: false,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(QlmmError::InvalidArgument(m));
        let grid = self.a.grid();
        if grid.is_empty() || grid.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return bad(format!("a must be a nonempty list of finite nonnegative values, got {grid:?}"));
        }
        if grid.len() > 1 && self.folds < 2 {
            return bad(format!("cross-validation needs at least 2 folds, got {}", self.folds));
        }
        if let LambdaRule::Fixed(l) = self.lambda {
            if !(l > 0.0 && l.is_finite()) {
                return bad(format!("lambda must be positive, got {l}"));
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.targets.contains(&0) {
            return bad("targets are one-based; 0 is not a coordinate".into());
        }
        if let Some(level) = self.fdr {
            if !(level > 0.0 && level < 1.0) {
                return bad(format!("fdr level must lie in (0, 1), got {level}"));
            }
        }
        if self.reps == 0 {
            return bad("reps must be positive".into());
        }
        for s in &self.scenarios {
            s.validate()?;
        }
        if let Some(d) = &self.data {
            if d.fixed_matrix.is_none() {
                d.schema.validate()?;
            }
        }
        Ok(())
    }

    fn lasso(&self) -> LassoOptions {
        LassoOptions {
            lambda: self.lambda,
            normalizer: self.normalizer,
            unpenalized: if self.intercept { vec![0] } else { Vec::new() },
            ..LassoOptions::default()
        }
    }

    fn nodewise(&self) -> NodewiseOptions {
        NodewiseOptions {
            normalizer: self.normalizer,
            unpenalized: if self.intercept { vec![0] } else { Vec::new() },
            ..NodewiseOptions::default()
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "qlmm", version, about = "Penalized quasi-likelihood inference for high-dimensional linear mixed models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fixed-effects Lasso on whitened data, with a chosen by cross-validation
    Fit(Flags),
    /// Debiased estimates, confidence intervals and p-values
    Infer(Flags),
    /// Variance components by sample splitting
    Varcomp(Flags),
    /// Monte-Carlo study of the configured scenarios
    Simulate(Flags),
}

#[derive(clap::Args, Debug, Default)]
struct Flags {
    /// JSON run configuration; flags below override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    /// Long-format CSV input
    #[arg(long)]
    data: Option<PathBuf>,
    /// Cluster id column
    #[arg(long, default_value = "cluster", requires = "data")]
    cluster: String,
    /// Response column
    #[arg(long, default_value = "y", requires = "data")]
    response: String,
    /// Fixed-effect columns, comma separated
    #[arg(long, value_delimiter = ',', requires = "data")]
    fixed: Vec<String>,
    /// Random-effect columns, comma separated
    #[arg(long, value_delimiter = ',', requires = "data")]
    random: Vec<String>,
    /// Wide CSV of fixed effects, row-aligned with --data
    #[arg(long, requires = "data")]
    fixed_matrix: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Proxy constant, or a comma-separated grid for cross-validation
    #[arg(long, value_delimiter = ',')]
    a: Option<Vec<f64>>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Fixed penalty level in place of the scaled-Lasso rule
    #[arg(long)]
    lambda: Option<f64>,
    /// Worker threads (0 = all cores)
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<DebiasMode>,
    #[arg(long, value_enum)]
    split: Option<SplitMode>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// One-based coordinates, comma separated
    #[arg(long, value_delimiter = ',')]
    targets: Option<Vec<usize>>,
    /// diagonal-halves, identity, free-diagonal, or a JSON file of matrices
    #[arg(long)]
    basis: Option<String>,
    /// Add an unpenalized intercept column
    #[arg(long)]
    intercept: bool,
    /// Benjamini-Hochberg selection level
    #[arg(long)]
    fdr: Option<f64>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

fn parse_basis(s: &str) -> Result<BasisSpec> {
    match s {
        "diagonal-halves" => Ok(BasisSpec::DiagonalHalves),
        "identity" => Ok(BasisSpec::Identity),
        "free-diagonal" => Ok(BasisSpec::FreeDiagonal),
        path => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                QlmmError::InvalidArgument(format!("basis '{path}' is neither a preset nor a readable file: {e}"))
            })?;
            Ok(BasisSpec::Explicit(serde_json::from_str(&text)?))
        }
    }
}

impl Flags {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_json_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(path) = &self.data {
            cfg.data = Some(DataConfig {
                path: path.clone(),
                schema: LongFormatSchema {
                    cluster: self.cluster.clone(),
                    response: self.response.clone(),
                    fixed: self.fixed.clone(),
                    random: self.random.clone(),
                },
                fixed_matrix: self.fixed_matrix.clone(),
            });
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.a {
            cfg.a = if v.len() == 1 { ASpec::One(v[0]) } else { ASpec::Grid(v.clone()) };
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.lambda {
            cfg.lambda = LambdaRule::Fixed(v);
        }
        if let Some(v) = self.threads {
            cfg.threads = v;
        }
        if let Some(v) = self.mode {
            cfg.mode = v;
        }
        if let Some(v) = self.split {
            cfg.split = v;
        }
        if let Some(v) = self.format {
            cfg.format = v;
        }
        if let Some(v) = &self.targets {
            cfg.targets = v.clone();
        }
        if let Some(v) = &self.basis {
            cfg.basis = parse_basis(v)?;
        }
        if self.intercept {
            cfg.intercept = true;
        }
        if let Some(v) = self.fdr {
            cfg.fdr = Some(v);
        }
        if let Some(v) = self.reps {
            cfg.reps = v;
        }
        if let Some(v) = &self.output {
            cfg.output = Some(v.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Settings needed to reproduce a run.
#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub command: String,
    pub version: String,
    pub config: RunConfig,
    pub dataset_fingerprint: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub provenance: Provenance,
    pub coefficient_names: Vec<String>,
    pub cv: Option<CvResult>,
    pub fit: FixedEffectsFit,
}

#[derive(Debug, Clone, Serialize)]
pub struct InferReport {
    pub provenance: Provenance,
    pub a: f64,
    pub lambda: f64,
    pub sigma_init: Option<f64>,
    pub cv: Option<CvResult>,
    pub records: Vec<InferenceRecord>,
    /// Coordinate (one-based) and reason for every target that failed.
    pub failures: Vec<(usize, String)>,
    /// One-based coordinates selected by Benjamini-Hochberg, when requested.
    pub selected: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VarcompReport {
    pub provenance: Provenance,
    pub a: f64,
    pub cv: Option<CvResult>,
    pub fit: VarCompFit,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateReport {
    pub provenance: Provenance,
    pub reports: Vec<McReport>,
}

struct Loaded {
    dataset: ClusteredDataset,
    names: Vec<String>,
}

fn load(cfg: &RunConfig) -> Result<Loaded> {
    let data = cfg
        .data
        .as_ref()
        .ok_or_else(|| QlmmError::InvalidArgument("no input data: pass --data or set `data` in the config".into()))?;
    let (mut dataset, mut names) = match &data.fixed_matrix {
        Some(m) => load_csv_with_matrix(&data.path, &data.schema, m)?,
        None => (load_csv(&data.path, &data.schema)?, data.schema.fixed.clone()),
    };
    if cfg.intercept {
        dataset = dataset.with_intercept();
        names.insert(0, "(intercept)".into());
    }
    Ok(Loaded { dataset, names })
}

/// Proxy constant to use: the single configured value or the CV winner.
fn choose_a(dataset: &ClusteredDataset, cfg: &RunConfig) -> Result<(f64, Option<CvResult>)> {
    let grid = cfg.a.grid();
    if grid.len() == 1 {
        return Ok((grid[0], None));
    }
    let cv = cross_validate_a(
        dataset,
        &grid,
        &CvOptions {
            folds: cfg.folds,
            seed: cfg.seed,
            lasso: cfg.lasso(),
        },
    )?;
    Ok((cv.a_star, Some(cv)))
}

/// Zero-based internal indices of the configured one-based targets.
fn target_indices(cfg: &RunConfig, p_original: usize) -> Result<Vec<usize>> {
    let shift = usize::from(cfg.intercept);
    if cfg.targets.is_empty() {
        return Ok((0..p_original).map(|j| j + shift).collect());
    }
    cfg.targets
        .iter()
        .map(|&t| {
            if t > p_original {
                Err(QlmmError::InvalidArgument(format!("target {t} exceeds p = {p_original}")))
            } else {
                Ok(t - 1 + shift)
            }
        })
        .collect()
}

fn provenance(command: &str, cfg: &RunConfig, dataset: Option<&ClusteredDataset>) -> Provenance {
    Provenance {
        command: command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        // the destination is left out so identical runs give identical bytes
        config: RunConfig { output: None, ..cfg.clone() },
        dataset_fingerprint: dataset.map(ClusteredDataset::fingerprint),
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn emit<F>(cfg: &RunConfig, body: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> Result<()>,
{
    match &cfg.output {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path)?);
            body(&mut w)?;
            w.flush()?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            body(&mut lock)?;
            lock.flush()?;
        }
    }
    Ok(())
}

fn cmd_fit(cfg: &RunConfig) -> Result<()> {
    let Loaded { dataset, names } = load(cfg)?;
    let (a, cv) = choose_a(&dataset, cfg)?;
    let fit = lasso_fit(&transform_dataset(&dataset, a)?, &cfg.lasso())?;
    emit(cfg, |w| match cfg.format {
        Format::Json => write_json(
            &FitReport {
                provenance: provenance("fit", cfg, Some(&dataset)),
                coefficient_names: names.clone(),
                cv,
                fit,
            },
            w,
        ),
        Format::Csv => {
            let mut out = csv::Writer::from_writer(w);
            out.write_record(["j", "name", "beta"])?;
            let shift = usize::from(cfg.intercept);
            for (k, b) in fit.beta.iter().enumerate() {
                // the intercept, when present, is reported as coordinate 0
                let j = k + 1 - shift;
                out.write_record([j.to_string(), names.get(k).cloned().unwrap_or_default(), fmt(*b)])?;
            }
            out.flush()?;
            Ok(())
        }
    })
}

fn cmd_infer(cfg: &RunConfig) -> Result<()> {
    let Loaded { dataset, .. } = load(cfg)?;
    let p_original = dataset.p() - usize::from(cfg.intercept);
    let targets = target_indices(cfg, p_original)?;
    let (a, cv) = choose_a(&dataset, cfg)?;
    let options = InferenceOptions {
        alpha: cfg.alpha,
        null_value: 0.0,
        mode: cfg.mode,
        lasso: cfg.lasso(),
        nodewise: cfg.nodewise(),
    };
    let out = infer_coordinates(&dataset, a, &targets, &options, None)?;
    let shift = usize::from(cfg.intercept);
    // records carry zero-based indices of the original columns
    let records: Vec<InferenceRecord> = out
        .records
        .into_iter()
        .map(|mut r| {
            r.j -= shift;
            r
        })
        .collect();
    let failures: Vec<(usize, String)> = out.failures.into_iter().map(|(j, m)| (j + 1 - shift, m)).collect();
    for (j, m) in &failures {
        log::warn!("coordinate {j}: {m}");
    }
    let selected = cfg.fdr.map(|level| {
        let p: Vec<f64> = records.iter().map(|r| r.p_value).collect();
        bh_fdr(&p, level).into_iter().map(|k| records[k].j + 1).collect::<Vec<_>>()
    });
    emit(cfg, |w| match cfg.format {
        Format::Csv => write_records_csv(&records, w),
        Format::Json => write_json(
            &InferReport {
                provenance: provenance("infer", cfg, Some(&dataset)),
                a,
                lambda: out.fit.lambda,
                sigma_init: out.fit.sigma_init,
                cv,
                records: records.clone(),
                failures: failures.clone(),
                selected: selected.clone(),
            },
            w,
        ),
    })
}

fn cmd_varcomp(cfg: &RunConfig) -> Result<()> {
    let Loaded { dataset, .. } = load(cfg)?;
    let basis = cfg.basis.build(dataset.q())?;
    let (a, cv) = choose_a(&dataset, cfg)?;
    let options = VarCompOptions {
        seed: cfg.seed,
        mode: cfg.split,
        lasso: cfg.lasso(),
        ..VarCompOptions::default()
    };
    let fit = cross_fit_varcomp(&dataset, a, &basis, &options)?;
    emit(cfg, |w| match cfg.format {
        Format::Json => write_json(
            &VarcompReport {
                provenance: provenance("varcomp", cfg, Some(&dataset)),
                a,
                cv,
                fit,
            },
            w,
        ),
        Format::Csv => {
            let mut out = csv::Writer::from_writer(w);
            out.write_record(["parameter", "value"])?;
            out.write_record(["sigma2_e".to_string(), fmt(fit.sigma2_e_hat)])?;
            for (k, e) in fit.eta_hat.iter().enumerate() {
                out.write_record([format!("eta_{}", k + 1), fmt(*e)])?;
            }
            out.flush()?;
            Ok(())
        }
    })
}

/// Monte-Carlo options derived from a run configuration.
pub fn mc_options(cfg: &RunConfig) -> McOptions {
    let defaults = McOptions::default();
    McOptions {
        a_grid: cfg.a.grid(),
        folds: cfg.folds,
        lasso: cfg.lasso(),
        nodewise: cfg.nodewise(),
        alpha: cfg.alpha,
        mode: cfg.mode,
        targets: if cfg.targets.is_empty() {
            defaults.targets
        } else {
            cfg.targets.iter().map(|t| t - 1).collect()
        },
        infer: true,
        varcomp: cfg.simulate_varcomp.then(|| VarcompSim {
            basis: cfg.basis.clone(),
            mode: cfg.split,
        }),
    }
}

fn cmd_simulate(cfg: &RunConfig) -> Result<()> {
    let options = mc_options(cfg);
    let mut reports = Vec::with_capacity(cfg.scenarios.len());
    for s in &cfg.scenarios {
        let scenario = Scenario { seed: cfg.seed, ..s.clone() };
        let r = run_mc(&scenario, cfg.reps, &options)?;
        log::info!(
            "n={} m={} q={}: {} of {} replications in {:.1}s",
            scenario.n,
            scenario.m,
            scenario.q,
            r.succeeded,
            r.reps,
            r.wall_time_secs
        );
        reports.push(r);
    }
    emit(cfg, |w| match cfg.format {
        Format::Csv => write_mc_csv(&reports, w),
        Format::Json => write_json(
            &SimulateReport {
                provenance: provenance("simulate", cfg, None),
                reports,
            },
            w,
        ),
    })
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code: 0 on success, 2 on a usage error, 1 on a runtime
/// failure.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let (name, flags) = match &cli.command {
        Command::Fit(f) => ("fit", f),
        Command::Infer(f) => ("infer", f),
        Command::Varcomp(f) => ("varcomp", f),
        Command::Simulate(f) => ("simulate", f),
    };
    let cfg = match flags.resolve() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return 1;
        }
    };
    let result = pool.install(|| match name {
        "fit" => cmd_fit(&cfg),
        "infer" => cmd_infer(&cfg),
        "varcomp" => cmd_varcomp(&cfg),
        _ => cmd_simulate(&cfg),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
