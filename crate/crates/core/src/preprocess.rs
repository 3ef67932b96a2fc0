//! Mask-aware standardization and the exact re-expression of mechanisms
//! in standardized coordinates.
//!
//! Masks are always sampled on the raw data. Afterwards each column is
//! centered and scaled using its *observed* entries only, and any
//! conditional missingness intensity is re-expressed through the same
//! affine map so that every row keeps exactly the same intensity values.

use nalgebra::DVector;

use crate::data::ObservedDataset;
use crate::error::{Error, Result};
use crate::glm::FamilyKind;

const CONSTANT_TOL: f64 = 1e-12;

/// Invertible record of a standardization pass.
#[derive(Clone, Debug)]
pub struct TransformRecord {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    /// Columns whose observed entries were (numerically) constant; they are
    /// centered but left unscaled.
    pub constant_columns: Vec<usize>,
    pub response_mean: f64,
    pub response_scale: f64,
    /// Whether the response was z-scored (linear family only).
    pub response_rescaled: bool,
}

impl TransformRecord {
    /// Map a raw row into standardized coordinates.
    pub fn apply_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(j, &v)| (v - self.means[j]) / self.scales[j])
            .collect()
    }

    /// Express a parameter fitted on standardized data in raw coordinates
    /// (slope part; the intercept absorbed by centering is dropped).
    pub fn parameter_to_raw(&self, w: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(w.len(), |j, _| w[j] * self.response_scale / self.scales[j])
    }

    /// Express a raw-coordinate parameter in standardized coordinates.
    pub fn parameter_to_standardized(&self, w: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(w.len(), |j, _| w[j] * self.scales[j] / self.response_scale)
    }
}

/// Center and scale every column on its observed entries; z-score the
/// response for the linear family. Hidden ground-truth values (when
/// present) pass through the same map so oracle comparisons stay valid.
pub fn standardize(
    ds: &ObservedDataset,
    family: FamilyKind,
) -> Result<(ObservedDataset, TransformRecord)> {
    let n = ds.n();
    let d = ds.d();
    let mut means = vec![0.0; d];
    let mut scales = vec![1.0; d];
    let mut constant_columns = Vec::new();
    for j in 0..d {
        let mut count = 0usize;
        let mut s = 0.0;
        for i in 0..n {
            let v = ds.masked_row(i)[j];
            if v.is_nan() {
                continue;
            }
            count += 1;
            s += v;
        }
        if count == 0 {
            return Err(Error::InvalidArgument(format!(
                "column {} has no observed entries to standardize on",
                ds.column_name(j)
            )));
        }
        let mean = s / count as f64;
        let mut ss = 0.0;
        for i in 0..n {
            let v = ds.masked_row(i)[j];
            if v.is_nan() {
                continue;
            }
            ss += (v - mean) * (v - mean);
        }
        let sd = if count > 1 {
            (ss / (count - 1) as f64).sqrt()
        } else {
            0.0
        };
        means[j] = mean;
        if sd > CONSTANT_TOL {
            scales[j] = sd;
        } else {
            scales[j] = 1.0;
            constant_columns.push(j);
        }
    }
    let (response_mean, response_scale, response_rescaled) = match family {
        FamilyKind::Linear => {
            let ys = ds.responses();
            let mean = ys.iter().sum::<f64>() / n as f64;
            let ss: f64 = ys.iter().map(|y| (y - mean) * (y - mean)).sum();
            let sd = if n > 1 {
                (ss / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            if sd > CONSTANT_TOL {
                (mean, sd, true)
            } else {
                (mean, 1.0, true)
            }
        }
        _ => (0.0, 1.0, false),
    };
    let record = TransformRecord {
        means,
        scales,
        constant_columns,
        response_mean,
        response_scale,
        response_rescaled,
    };
    // Transform the full value matrix (including hidden truth) and the
    // responses, keeping the mask as is.
    let mut values = Vec::with_capacity(n * d);
    for i in 0..n {
        let raw = raw_row(ds, i);
        for (j, v) in raw.iter().enumerate() {
            values.push((v - record.means[j]) / record.scales[j]);
        }
    }
    let responses: Vec<f64> = ds
        .responses()
        .iter()
        .map(|&y| {
            if record.response_rescaled {
                (y - record.response_mean) / record.response_scale
            } else {
                y
            }
        })
        .collect();
    let out = ObservedDataset::new(
        values,
        n,
        d,
        responses,
        ds.mask().clone(),
        ds.observed_index_set().to_vec(),
        ds.column_names().to_vec(),
    )?;
    Ok((out, record))
}

/// Raw row with ground truth where available and NaN only where the truth
/// really is unknown.
fn raw_row(ds: &ObservedDataset, i: usize) -> Vec<f64> {
    match ds.oracle_row(i) {
        Some(row) => row.to_vec(),
        None => ds.masked_row(i).to_vec(),
    }
}

/// Rescale count responses so their mean becomes the target, rounding
/// half-to-even back onto integers. Returns the rescaled counts and the
/// applied factor.
pub fn rescale_counts_to_mean(ys: &[f64], target: f64) -> Result<(Vec<f64>, f64)> {
    if ys.is_empty() {
        return Err(Error::InvalidArgument("no responses to rescale".into()));
    }
    if ys.iter().any(|&y| y < 0.0 || !y.is_finite()) {
        return Err(Error::InvalidArgument(
            "count responses must be finite and nonnegative".into(),
        ));
    }
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    if mean <= 0.0 {
        return Err(Error::InvalidArgument(
            "cannot rescale counts with zero mean".into(),
        ));
    }
    let factor = target / mean;
    let out = ys.iter().map(|&y| round_ties_even(y * factor)).collect();
    Ok((out, factor))
}

fn round_ties_even(v: f64) -> f64 {
    let floor = v.floor();
    let frac = v - floor;
    if (frac - 0.5).abs() < 1e-12 {
        if (floor as i64) % 2 == 0 {
            floor
        } else {
            floor + 1.0
        }
    } else {
        v.round()
    }
}
