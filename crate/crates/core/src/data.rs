//! Masked datasets.
//!
//! The mask is the single source of truth for missingness (1 = missing),
//! never a sentinel value. True values hidden by the mask are retained when
//! known (synthetic data) and reachable only through the explicit oracle
//! accessors; every estimator-facing accessor returns NaN at missing
//! entries, so an accidental read poisons downstream arithmetic instead of
//! silently leaking information.

use crate::error::{Error, Result};

/// Binary missingness indicator matrix, 1 = missing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    n: usize,
    d: usize,
    bits: Vec<u8>,
}

impl Mask {
    /// All-observed mask.
    pub fn zeros(n: usize, d: usize) -> Self {
        Mask {
            n,
            d,
            bits: vec![0; n * d],
        }
    }

    pub fn from_bits(n: usize, d: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != n * d {
            return Err(Error::Dimension(format!(
                "mask has {} entries, expected {}x{}",
                bits.len(),
                n,
                d
            )));
        }
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::InvalidArgument(format!("mask entry {b} is not 0/1")));
        }
        Ok(Mask { n, d, bits })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn is_missing(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.d + j] == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, missing: bool) {
        self.bits[i * self.d + j] = missing as u8;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[u8] {
        &self.bits[i * self.d..(i + 1) * self.d]
    }

    /// Fraction of missing entries in column `j`.
    pub fn column_mean(&self, j: usize) -> f64 {
        let hits: usize = (0..self.n).filter(|&i| self.is_missing(i, j)).count();
        hits as f64 / self.n as f64
    }

    pub fn count_missing(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    /// First entry missing here but observed in `superset`, if any.
    /// `None` means this mask is nested in `superset` as required for
    /// thinned masks.
    pub fn nesting_violation(&self, superset: &Mask) -> Option<(usize, usize)> {
        debug_assert_eq!((self.n, self.d), (superset.n, superset.d));
        for i in 0..self.n {
            for j in 0..self.d {
                if self.is_missing(i, j) && !superset.is_missing(i, j) {
                    return Some((i, j));
                }
            }
        }
        None
    }
}

/// Mask row declaring exactly the columns in `s` missing.
pub fn subset_mask(s: &[usize], d: usize) -> Result<Vec<u8>> {
    let mut row = vec![0u8; d];
    for &j in s {
        if j >= d {
            return Err(Error::InvalidArgument(format!(
                "subset column {j} out of range for d={d}"
            )));
        }
        row[j] = 1;
    }
    Ok(row)
}

/// Missing-column indices of a mask row, sorted ascending.
pub fn support(mask_row: &[u8]) -> Vec<usize> {
    mask_row
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == 1)
        .map(|(j, _)| j)
        .collect()
}

/// A design matrix with responses, a missingness mask, and the set of
/// columns guaranteed observed (the conditioning variables of
/// covariate-dependent mechanisms).
#[derive(Clone, Debug)]
pub struct ObservedDataset {
    n: usize,
    d: usize,
    /// Row-major true values; NaN only where masked and truth is unknown.
    values: Vec<f64>,
    /// Row-major view with NaN at masked entries.
    masked: Vec<f64>,
    mask: Mask,
    responses: Vec<f64>,
    observed_index_set: Vec<usize>,
    column_names: Vec<String>,
    has_ground_truth: bool,
}

impl ObservedDataset {
    pub fn new(
        values: Vec<f64>,
        n: usize,
        d: usize,
        responses: Vec<f64>,
        mask: Mask,
        observed_index_set: Vec<usize>,
        column_names: Vec<String>,
    ) -> Result<Self> {
        if values.len() != n * d {
            return Err(Error::Dimension(format!(
                "{} values for {n}x{d} dataset",
                values.len()
            )));
        }
        if responses.len() != n {
            return Err(Error::Dimension(format!(
                "{} responses for {n} rows",
                responses.len()
            )));
        }
        if (mask.n(), mask.d()) != (n, d) {
            return Err(Error::Dimension("mask shape differs from values".into()));
        }
        if column_names.len() != d {
            return Err(Error::Dimension("column name count differs from d".into()));
        }
        let mut observed_index_set = observed_index_set;
        observed_index_set.sort_unstable();
        observed_index_set.dedup();
        for &j in &observed_index_set {
            if j >= d {
                return Err(Error::InvalidArgument(format!(
                    "observed column index {j} out of range"
                )));
            }
            if (0..n).any(|i| mask.is_missing(i, j)) {
                return Err(Error::InvalidArgument(format!(
                    "column {} is declared always-observed but has missing entries",
                    column_names[j]
                )));
            }
        }
        if let Some((i, y)) = responses.iter().enumerate().find(|(_, y)| !y.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite response {y} at row {}",
                i + 1
            )));
        }
        let mut has_ground_truth = true;
        let mut masked = values.clone();
        for i in 0..n {
            for j in 0..d {
                let v = values[i * d + j];
                if mask.is_missing(i, j) {
                    masked[i * d + j] = f64::NAN;
                    if !v.is_finite() {
                        has_ground_truth = false;
                    }
                } else if !v.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "non-finite value at row {}, column {}",
                        i + 1,
                        column_names[j]
                    )));
                }
            }
        }
        Ok(ObservedDataset {
            n,
            d,
            values,
            masked,
            mask,
            responses,
            observed_index_set,
            column_names,
            has_ground_truth,
        })
    }

    /// Fully observed dataset with default column names `x1..xd`.
    pub fn complete(values: Vec<f64>, n: usize, d: usize, responses: Vec<f64>) -> Result<Self> {
        let names = default_column_names(d);
        Self::new(values, n, d, responses, Mask::zeros(n, d), vec![], names)
    }

    /// Same values and responses under a different mask. Requires ground
    /// truth for every entry the new mask reveals.
    pub fn with_mask(&self, mask: Mask) -> Result<Self> {
        for i in 0..self.n {
            for j in 0..self.d {
                if !mask.is_missing(i, j) && !self.values[i * self.d + j].is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "new mask reveals row {}, column {} whose true value is unknown",
                        i + 1,
                        self.column_names[j]
                    )));
                }
            }
        }
        Self::new(
            self.values.clone(),
            self.n,
            self.d,
            self.responses.clone(),
            mask,
            self.observed_index_set.clone(),
            self.column_names.clone(),
        )
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn responses(&self) -> &[f64] {
        &self.responses
    }

    pub fn y(&self, i: usize) -> f64 {
        self.responses[i]
    }

    /// Row with NaN at missing entries.
    #[inline]
    pub fn masked_row(&self, i: usize) -> &[f64] {
        &self.masked[i * self.d..(i + 1) * self.d]
    }

    /// True values including entries hidden by the mask. `None` when the
    /// dataset was loaded with genuinely unknown entries.
    pub fn oracle_row(&self, i: usize) -> Option<&[f64]> {
        if self.has_ground_truth {
            Some(&self.values[i * self.d..(i + 1) * self.d])
        } else {
            None
        }
    }

    pub fn has_ground_truth(&self) -> bool {
        self.has_ground_truth
    }

    pub fn observed_index_set(&self) -> &[usize] {
        &self.observed_index_set
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn column_name(&self, j: usize) -> &str {
        &self.column_names[j]
    }

    /// Always-observed subvector of row `i`, in `observed_index_set` order.
    pub fn conditioning_values(&self, i: usize) -> Vec<f64> {
        self.observed_index_set
            .iter()
            .map(|&j| self.masked[i * self.d + j])
            .collect()
    }
}

pub fn default_column_names(d: usize) -> Vec<String> {
    (1..=d).map(|j| format!("x{j}")).collect()
}
