//! Long-format CSV ingestion and report serialization.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::debias::InferenceRecord;
use crate::error::{QlmmError, Result};
use crate::model::{validate_dataset, Cluster, ClusteredDataset};

/// Column roles of a long-format file: one row per observation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LongFormatSchema {
    pub cluster: String,
    pub response: String,
    pub fixed: Vec<String>,
    pub random: Vec<String>,
}

impl LongFormatSchema {
    pub fn validate(&self) -> Result<()> {
        self.check(true)
    }

    fn check(&self, require_fixed: bool) -> Result<()> {
        if require_fixed && self.fixed.is_empty() {
            return Err(QlmmError::InvalidArgument(
                "schema needs at least one fixed-effect column".into(),
            ));
        }
        let mut seen = HashMap::new();
        let roles = [("cluster", &self.cluster), ("response", &self.response)];
        let named = roles
            .iter()
            .map(|(r, n)| (*r, n.as_str()))
            .chain(self.fixed.iter().map(|n| ("fixed", n.as_str())))
            .chain(self.random.iter().map(|n| ("random", n.as_str())));
        for (role, name) in named {
            if let Some(prev) = seen.insert(name, role) {
                return Err(QlmmError::InvalidArgument(format!(
                    "column '{name}' is used both as {prev} and {role}"
                )));
            }
        }
        Ok(())
    }
}

struct Table {
    header: Vec<String>,
    rows: Vec<(u64, csv::StringRecord)>,
}

fn read_table<R: Read>(reader: R) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(QlmmError::Input("empty file".into()));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        rows.push((line, rec));
    }
    if rows.is_empty() {
        return Err(QlmmError::Input("file has a header but no data rows".into()));
    }
    Ok(Table { header, rows })
}

impl Table {
    fn index(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| QlmmError::Input(format!("missing column '{name}'")))
    }

    fn number(&self, row: usize, col: usize) -> Result<f64> {
        let (line, rec) = &self.rows[row];
        let cell = rec.get(col).unwrap_or("");
        cell.parse::<f64>().map_err(|_| {
            QlmmError::Input(format!(
                "line {line}, column '{}': cannot parse '{cell}' as a number",
                self.header[col]
            ))
        })
    }
}

/// Groups rows by cluster id, clusters in order of first appearance and
/// rows in file order within each cluster.
fn group_rows(table: &Table, cluster_col: usize) -> Vec<(String, Vec<usize>)> {
    let mut order: Vec<(String, Vec<usize>)> = Vec::new();
    let mut slot: HashMap<String, usize> = HashMap::new();
    for (r, (_, rec)) in table.rows.iter().enumerate() {
        let id = rec.get(cluster_col).unwrap_or("").to_string();
        let k = *slot.entry(id.clone()).or_insert_with(|| {
            order.push((id, Vec::new()));
            order.len() - 1
        });
        order[k].1.push(r);
    }
    order
}

fn assemble(
    table: &Table,
    schema: &LongFormatSchema,
    fixed: Option<&DMatrix<f64>>,
) -> Result<ClusteredDataset> {
    let cluster_col = table.index(&schema.cluster)?;
    let y_col = table.index(&schema.response)?;
    let x_cols = schema.fixed.iter().map(|n| table.index(n)).collect::<Result<Vec<_>>>()?;
    let z_cols = schema.random.iter().map(|n| table.index(n)).collect::<Result<Vec<_>>>()?;
    let p = fixed.map_or(x_cols.len(), |f| f.ncols());
    let q = z_cols.len();
    let mut clusters = Vec::new();
    for (id, rows) in group_rows(table, cluster_col) {
        let m = rows.len();
        let mut y = DVector::zeros(m);
        let mut x = DMatrix::zeros(m, p);
        let mut z = DMatrix::zeros(m, q);
        for (i, &r) in rows.iter().enumerate() {
            y[i] = table.number(r, y_col)?;
            match fixed {
                Some(f) => x.row_mut(i).copy_from(&f.row(r)),
                None => {
                    for (k, &c) in x_cols.iter().enumerate() {
                        x[(i, k)] = table.number(r, c)?;
                    }
                }
            }
            for (k, &c) in z_cols.iter().enumerate() {
                z[(i, k)] = table.number(r, c)?;
            }
        }
        clusters.push(Cluster::new(id, y, x, z));
    }
    let dataset = ClusteredDataset::new_unchecked(clusters, p, q);
    let report = validate_dataset(&dataset);
    if !report.is_valid() {
        let msgs: Vec<String> = report.violations.iter().map(|v| v.to_string()).collect();
        return Err(QlmmError::InvalidDataset(msgs.join("; ")));
    }
    Ok(dataset)
}

pub fn read_long_csv<R: Read>(reader: R, schema: &LongFormatSchema) -> Result<ClusteredDataset> {
    schema.validate()?;
    assemble(&read_table(reader)?, schema, None)
}

pub fn load_csv(path: impl AsRef<Path>, schema: &LongFormatSchema) -> Result<ClusteredDataset> {
    read_long_csv(File::open(path)?, schema)
}

/// Reads a headed numeric matrix: column names and an `rows x cols` matrix.
pub fn read_wide_matrix<R: Read>(reader: R) -> Result<(Vec<String>, DMatrix<f64>)> {
    let table = read_table(reader)?;
    let cols = table.header.len();
    let mut mat = DMatrix::zeros(table.rows.len(), cols);
    for r in 0..table.rows.len() {
        for c in 0..cols {
            mat[(r, c)] = table.number(r, c)?;
        }
    }
    Ok((table.header, mat))
}

/// Long-format file for cluster, response and random-effect columns, with
/// the fixed effects taken from a separate wide matrix whose rows follow
/// the long file's row order. `schema.fixed` must be empty.
pub fn load_csv_with_matrix(
    path: impl AsRef<Path>,
    schema: &LongFormatSchema,
    matrix_path: impl AsRef<Path>,
) -> Result<(ClusteredDataset, Vec<String>)> {
    if !schema.fixed.is_empty() {
        return Err(QlmmError::InvalidArgument(
            "fixed-effect columns come from the matrix file; leave the schema list empty".into(),
        ));
    }
    schema.check(false)?;
    let table = read_table(File::open(path)?)?;
    let (names, mat) = read_wide_matrix(File::open(matrix_path)?)?;
    if mat.nrows() != table.rows.len() {
        return Err(QlmmError::DimensionMismatch(format!(
            "matrix file has {} rows, long file has {}",
            mat.nrows(),
            table.rows.len()
        )));
    }
    Ok((assemble(&table, schema, Some(&mat))?, names))
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes the dataset in long format under the schema's column names.
pub fn write_long_csv<W: Write>(dataset: &ClusteredDataset, schema: &LongFormatSchema, out: W) -> Result<()> {
    if schema.fixed.len() != dataset.p() || schema.random.len() != dataset.q() {
        return Err(QlmmError::DimensionMismatch(
            "schema column counts do not match the dataset".into(),
        ));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![schema.cluster.clone(), schema.response.clone()];
    header.extend(schema.fixed.iter().cloned());
    header.extend(schema.random.iter().cloned());
    w.write_record(&header)?;
    for c in dataset.clusters() {
        for r in 0..c.size() {
            let mut row = vec![c.id().to_string(), fmt(c.y()[r])];
            row.extend(c.x().row(r).iter().map(|v| fmt(*v)));
            row.extend(c.z().row(r).iter().map(|v| fmt(*v)));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub const RECORD_COLUMNS: [&str; 7] = ["j", "beta_db", "V_hat", "ci_lo", "ci_hi", "z", "p_value"];

/// One CSV row of an inference report; `j` is one-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub j: usize,
    pub beta_db: f64,
    #[serde(rename = "V_hat")]
    pub v_hat: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub z: f64,
    pub p_value: f64,
}

impl From<&InferenceRecord> for RecordRow {
    fn from(r: &InferenceRecord) -> Self {
        Self {
            j: r.j + 1,
            beta_db: r.beta_db,
            v_hat: r.v_hat,
            ci_lo: r.ci_lo,
            ci_hi: r.ci_hi,
            z: r.z,
            p_value: r.p_value,
        }
    }
}

pub fn write_records_csv<W: Write>(records: &[InferenceRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RECORD_COLUMNS)?;
    for r in records.iter().map(RecordRow::from) {
        w.write_record([
            r.j.to_string(),
            fmt(r.beta_db),
            fmt(r.v_hat),
            fmt(r.ci_lo),
            fmt(r.ci_hi),
            fmt(r.z),
            fmt(r.p_value),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv<R: Read>(reader: R) -> Result<Vec<RecordRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != RECORD_COLUMNS {
        return Err(QlmmError::Input(format!("unexpected report header {header:?}")));
    }
    rdr.deserialize().map(|r| r.map_err(QlmmError::from)).collect()
}

/// Output format of a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Csv,
    #[default]
    Json,
}

/// Pretty JSON with a trailing newline. Field order follows the type's
/// declaration order; floats use the shortest round-trip representation
/// and non-finite values become `null`.
pub fn write_json<T: Serialize, W: Write>(value: &T, mut out: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    Ok(())
}
