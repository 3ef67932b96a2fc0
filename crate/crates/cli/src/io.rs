//! CSV input and output: datasets with an `NA` missing token, and the
//! frozen result schemas written by every subcommand.

use std::path::Path;

use richsgd::data::{Mask, ObservedDataset};
use richsgd::{Error, Result};

pub const NA_TOKEN: &str = "NA";

pub const RESULTS_HEADER: [&str; 12] = [
    "run_id",
    "seed",
    "family",
    "dataset",
    "mechanism",
    "imputer",
    "method",
    "order",
    "epoch",
    "pmse",
    "test_loss",
    "wall_ms",
];

/// Full float precision, stable across platforms.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// One training epoch of one method under one seed.
#[derive(Clone, Debug)]
pub struct ResultRow {
    pub run_id: String,
    pub seed: u64,
    pub family: String,
    pub dataset: String,
    pub mechanism: String,
    pub imputer: String,
    pub method: String,
    pub order: usize,
    pub epoch: usize,
    pub pmse: f64,
    pub test_loss: f64,
    pub wall_ms: u64,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::InvalidArgument(format!("{}: {e}", path.display()))
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(RESULTS_HEADER)
        .map_err(|e| io_err(path, e))?;
    for r in rows {
        w.write_record([
            r.run_id.clone(),
            r.seed.to_string(),
            r.family.clone(),
            r.dataset.clone(),
            r.mechanism.clone(),
            r.imputer.clone(),
            r.method.clone(),
            r.order.to_string(),
            r.epoch.to_string(),
            format_float(r.pmse),
            format_float(r.test_loss),
            r.wall_ms.to_string(),
        ])
        .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Final-epoch aggregate of one method across seeds.
#[derive(Clone, Debug)]
pub struct SummaryRow {
    pub family: String,
    pub dataset: String,
    pub mechanism: String,
    pub imputer: String,
    pub method: String,
    pub order: usize,
    pub seeds: usize,
    pub mean_pmse: f64,
    pub sd_pmse: f64,
    pub mean_test_loss: f64,
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record([
        "family",
        "dataset",
        "mechanism",
        "imputer",
        "method",
        "order",
        "seeds",
        "mean_pmse",
        "sd_pmse",
        "mean_test_loss",
    ])
    .map_err(|e| io_err(path, e))?;
    for r in rows {
        w.write_record([
            r.family.clone(),
            r.dataset.clone(),
            r.mechanism.clone(),
            r.imputer.clone(),
            r.method.clone(),
            r.order.to_string(),
            r.seeds.to_string(),
            format_float(r.mean_pmse),
            format_float(r.sd_pmse),
            format_float(r.mean_test_loss),
        ])
        .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Exact bias of one method at one masking scale.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub dataset: String,
    pub family: String,
    pub mechanism: String,
    pub method: String,
    pub t: f64,
    pub bias_norm: f64,
    pub xi_se: f64,
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record([
        "dataset",
        "family",
        "mechanism",
        "method",
        "t",
        "bias_norm",
        "xi_se",
    ])
    .map_err(|e| io_err(path, e))?;
    for r in rows {
        w.write_record([
            r.dataset.clone(),
            r.family.clone(),
            r.mechanism.clone(),
            r.method.clone(),
            format_float(r.t),
            format_float(r.bias_norm),
            format_float(r.xi_se),
        ])
        .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

/// One cell of the mechanism-misspecification grid.
#[derive(Clone, Debug)]
pub struct RobustnessRow {
    pub delta_p: f64,
    pub delta_q: f64,
    pub seed: u64,
    pub method: String,
    /// `ok`, `infeasible`, or `diverged`.
    pub status: String,
    pub final_pmse: f64,
}

pub fn write_robustness_csv(path: &Path, rows: &[RobustnessRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record([
        "delta_p",
        "delta_q",
        "seed",
        "method",
        "status",
        "final_pmse",
    ])
    .map_err(|e| io_err(path, e))?;
    for r in rows {
        w.write_record([
            format_float(r.delta_p),
            format_float(r.delta_q),
            r.seed.to_string(),
            r.method.clone(),
            r.status.clone(),
            format_float(r.final_pmse),
        ])
        .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Write a dataset: one covariate column per name, response last. Masked
/// entries become `NA` when `masked` is set; otherwise ground-truth values
/// are required and written.
pub fn save_dataset_csv(path: &Path, ds: &ObservedDataset, masked: bool) -> Result<()> {
    if !masked && !ds.has_ground_truth() {
        return Err(Error::InvalidArgument(
            "cannot write complete values without ground truth".into(),
        ));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    let mut header: Vec<String> = (0..ds.d()).map(|j| ds.column_name(j).to_string()).collect();
    header.push("y".into());
    w.write_record(&header).map_err(|e| io_err(path, e))?;
    for i in 0..ds.n() {
        let row: &[f64] = if masked {
            ds.masked_row(i)
        } else {
            ds.oracle_row(i).expect("ground truth checked above")
        };
        let mut record: Vec<String> = row
            .iter()
            .map(|v| {
                if v.is_nan() {
                    NA_TOKEN.to_string()
                } else {
                    format_float(*v)
                }
            })
            .collect();
        record.push(format_float(ds.responses()[i]));
        w.write_record(&record).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Load a dataset written by [`save_dataset_csv`] (or hand-authored in the
/// same shape). `NA` marks a missing covariate; the response may not be
/// missing. Errors cite 1-based row and column positions, counting the
/// header as row 1.
pub fn load_dataset_csv(path: &Path) -> Result<ObservedDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| io_err(path, e))?;
    let header = reader.headers().map_err(|e| io_err(path, e))?.clone();
    if header.len() < 2 {
        return Err(io_err(
            path,
            "need at least one covariate column and a response column",
        ));
    }
    let d = header.len() - 1;
    let names: Vec<String> = header
        .iter()
        .take(d)
        .map(|s| s.trim().to_string())
        .collect();
    let mut values = Vec::new();
    let mut responses = Vec::new();
    let mut bits: Vec<u8> = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row_no = idx + 2;
        let record = record.map_err(|e| io_err(path, e))?;
        if record.len() != d + 1 {
            return Err(io_err(
                path,
                format!(
                    "row {row_no}: expected {} fields, found {}",
                    d + 1,
                    record.len()
                ),
            ));
        }
        for (j, field) in record.iter().take(d).enumerate() {
            let field = field.trim();
            if field == NA_TOKEN {
                values.push(f64::NAN);
                bits.push(1);
            } else {
                let v: f64 = field.parse().map_err(|_| {
                    io_err(
                        path,
                        format!(
                            "row {row_no}, column {}: unreadable number '{field}'",
                            j + 1
                        ),
                    )
                })?;
                values.push(v);
                bits.push(0);
            }
        }
        let y_field = record.get(d).unwrap_or("").trim();
        let y: f64 = y_field.parse().map_err(|_| {
            io_err(
                path,
                format!(
                    "row {row_no}, column {}: unreadable response '{y_field}'",
                    d + 1
                ),
            )
        })?;
        responses.push(y);
    }
    let n = responses.len();
    if n == 0 {
        return Err(io_err(path, "no data rows"));
    }
    let mask = Mask::from_bits(n, d, bits)?;
    ObservedDataset::new(values, n, d, responses, mask, vec![], names)
}
