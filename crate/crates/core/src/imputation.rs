//! Imputation rules behind a common trait, selected by name.
//!
//! A rule is fitted once on an auxiliary dataset (reading only its masked
//! view) and then fills rows one at a time: the imputed values depend only
//! on the row, the frozen fitted state, and an explicit noise substream.
//! Stochastic rules draw their noise per column from `xi.child(column)`, so
//! two patterns imputed under the same `xi` key share draws on common
//! missing entries. That is the linked discipline the extrapolated
//! estimators rely on; [`unlinked_impute`] exists only to demonstrate what
//! breaks without it.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::data::ObservedDataset;
use crate::error::{Error, Result};
use crate::rng::StreamKey;

pub trait Imputer: Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether the rule consumes noise; deterministic rules ignore `xi`.
    fn is_stochastic(&self) -> bool {
        false
    }

    /// Fill the missing entries of one row. `x` carries NaN exactly where
    /// `mask` is 1; observed entries pass through verbatim.
    fn impute_row(&self, x: &[f64], mask: &[u8], xi: StreamKey) -> Vec<f64>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImputerKind {
    Zero,
    Mean,
    Knn,
    IterativeRidge,
}

impl std::str::FromStr for ImputerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(ImputerKind::Zero),
            "mean" => Ok(ImputerKind::Mean),
            "knn" => Ok(ImputerKind::Knn),
            "iterative_ridge" => Ok(ImputerKind::IterativeRidge),
            other => Err(Error::InvalidConfig(format!(
                "unknown imputer '{other}' (expected one of {})",
                IMPUTER_NAMES.join("|")
            ))),
        }
    }
}

impl std::fmt::Display for ImputerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ImputerKind::Zero => "zero",
            ImputerKind::Mean => "mean",
            ImputerKind::Knn => "knn",
            ImputerKind::IterativeRidge => "iterative_ridge",
        })
    }
}

pub const IMPUTER_NAMES: &[&str] = &["zero", "mean", "knn", "iterative_ridge"];

#[derive(Clone, Debug, PartialEq)]
pub struct ImputerParams {
    /// Neighbour count for the knn rule.
    pub knn_k: usize,
    /// Column sweeps of the iterative ridge rule, both at fit and fill time.
    pub rounds: usize,
    /// Ridge penalty of the per-column regressions.
    pub penalty: f64,
    /// Residual-sd multiple added to iterative-ridge fills; 0 keeps the rule
    /// deterministic.
    pub noise_scale: f64,
}

impl Default for ImputerParams {
    fn default() -> Self {
        ImputerParams {
            knn_k: 5,
            rounds: 5,
            penalty: 1e-3,
            noise_scale: 0.0,
        }
    }
}

/// Fit a rule by name on the masked view of `ds`.
pub fn fit_imputer(
    kind: ImputerKind,
    ds: &ObservedDataset,
    params: &ImputerParams,
) -> Result<Box<dyn Imputer>> {
    match kind {
        ImputerKind::Zero => Ok(Box::new(ZeroImputer)),
        ImputerKind::Mean => Ok(Box::new(MeanImputer {
            means: column_means(ds)?,
        })),
        ImputerKind::Knn => {
            let means = column_means(ds)?;
            let rows = (0..ds.n())
                .map(|i| (ds.masked_row(i).to_vec(), ds.mask().row(i).to_vec()))
                .collect();
            Ok(Box::new(KnnImputer {
                rows,
                means,
                k: params.knn_k.max(1),
                fallback_events: Arc::new(AtomicU64::new(0)),
            }))
        }
        ImputerKind::IterativeRidge => Ok(Box::new(IterativeRidgeImputer::fit(ds, params)?)),
    }
}

fn column_means(ds: &ObservedDataset) -> Result<Vec<f64>> {
    let mut means = vec![0.0; ds.d()];
    for j in 0..ds.d() {
        let mut acc = 0.0;
        let mut cnt = 0usize;
        for i in 0..ds.n() {
            if !ds.mask().is_missing(i, j) {
                acc += ds.masked_row(i)[j];
                cnt += 1;
            }
        }
        if cnt == 0 {
            return Err(Error::ImputerFit {
                column: ds.column_name(j).to_string(),
                reason: "no observed entries".into(),
            });
        }
        means[j] = acc / cnt as f64;
    }
    Ok(means)
}

/// Fills missing entries with 0; the canonical baseline.
pub struct ZeroImputer;

impl Imputer for ZeroImputer {
    fn name(&self) -> &'static str {
        "zero"
    }

    fn impute_row(&self, x: &[f64], mask: &[u8], _xi: StreamKey) -> Vec<f64> {
        fill_with(x, mask, |j| {
            let _ = j;
            0.0
        })
    }
}

/// Fills missing entries with fitted column means.
pub struct MeanImputer {
    means: Vec<f64>,
}

impl Imputer for MeanImputer {
    fn name(&self) -> &'static str {
        "mean"
    }

    fn impute_row(&self, x: &[f64], mask: &[u8], _xi: StreamKey) -> Vec<f64> {
        fill_with(x, mask, |j| self.means[j])
    }
}

fn fill_with<F: Fn(usize) -> f64>(x: &[f64], mask: &[u8], f: F) -> Vec<f64> {
    x.iter()
        .zip(mask)
        .enumerate()
        .map(|(j, (&v, &m))| if m == 1 { f(j) } else { v })
        .collect()
}

/// Nearest-neighbour imputation over the fitted reference rows. Distances
/// are root-mean-square over coordinates observed in both the query and the
/// donor; donors sharing no coordinate are unusable. When no donor has the
/// target column observed (or none is comparable), the column mean is used
/// and the event counted.
pub struct KnnImputer {
    rows: Vec<(Vec<f64>, Vec<u8>)>,
    means: Vec<f64>,
    k: usize,
    fallback_events: Arc<AtomicU64>,
}

impl KnnImputer {
    pub fn fallback_events(&self) -> u64 {
        self.fallback_events.load(Ordering::Relaxed)
    }
}

impl Imputer for KnnImputer {
    fn name(&self) -> &'static str {
        "knn"
    }

    fn impute_row(&self, x: &[f64], mask: &[u8], _xi: StreamKey) -> Vec<f64> {
        let d = x.len();
        let mut out = x.to_vec();
        for j in 0..d {
            if mask[j] != 1 {
                continue;
            }
            // (distance, donor index) for donors with column j observed.
            let mut cands: Vec<(f64, usize)> = Vec::new();
            for (r, (vals, dmask)) in self.rows.iter().enumerate() {
                if dmask[j] == 1 {
                    continue;
                }
                let mut acc = 0.0;
                let mut shared = 0usize;
                for t in 0..d {
                    if mask[t] == 0 && dmask[t] == 0 {
                        let diff = x[t] - vals[t];
                        acc += diff * diff;
                        shared += 1;
                    }
                }
                if shared > 0 {
                    cands.push(((acc / shared as f64).sqrt(), r));
                }
            }
            if cands.is_empty() {
                self.fallback_events.fetch_add(1, Ordering::Relaxed);
                out[j] = self.means[j];
                continue;
            }
            cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let take = self.k.min(cands.len());
            out[j] = cands[..take]
                .iter()
                .map(|&(_, r)| self.rows[r].0[j])
                .sum::<f64>()
                / take as f64;
        }
        out
    }
}

/// Chained per-column ridge regressions, cycled a fixed number of rounds in
/// column order. Fitting alternates regression and re-imputation on the
/// auxiliary data; filling replays the same sweeps with the frozen
/// coefficients, starting from column means. A positive `noise_scale` adds
/// a residual-sd-scaled normal draw to each filled entry after the final
/// sweep.
pub struct IterativeRidgeImputer {
    means: Vec<f64>,
    /// Per column: intercept followed by weights over the other columns in
    /// ascending column order.
    coefs: Vec<Vec<f64>>,
    resid_sd: Vec<f64>,
    rounds: usize,
    noise_scale: f64,
}

impl IterativeRidgeImputer {
    fn fit(ds: &ObservedDataset, params: &ImputerParams) -> Result<Self> {
        let (n, d) = (ds.n(), ds.d());
        let means = column_means(ds)?;
        // Working completion of the auxiliary data.
        let mut work: Vec<f64> = (0..n)
            .flat_map(|i| {
                let row = ds.masked_row(i);
                (0..d).map(move |j| if row[j].is_nan() { f64::NAN } else { row[j] })
            })
            .collect();
        for i in 0..n {
            for j in 0..d {
                if ds.mask().is_missing(i, j) {
                    work[i * d + j] = means[j];
                }
            }
        }
        let mut coefs = vec![Vec::new(); d];
        let mut resid_sd = vec![0.0; d];
        for _ in 0..params.rounds.max(1) {
            for j in 0..d {
                let obs_rows: Vec<usize> =
                    (0..n).filter(|&i| !ds.mask().is_missing(i, j)).collect();
                let beta = ridge_column_fit(&work, n, d, j, &obs_rows, params.penalty)?;
                // Residual spread on the observed rows.
                let mut ss = 0.0;
                for &i in &obs_rows {
                    let pred = predict_column(&beta, &work[i * d..(i + 1) * d], j);
                    let r = work[i * d + j] - pred;
                    ss += r * r;
                }
                resid_sd[j] = (ss / obs_rows.len() as f64).sqrt();
                for i in 0..n {
                    if ds.mask().is_missing(i, j) {
                        work[i * d + j] = predict_column(&beta, &work[i * d..(i + 1) * d], j);
                    }
                }
                coefs[j] = beta;
            }
        }
        Ok(IterativeRidgeImputer {
            means,
            coefs,
            resid_sd,
            rounds: params.rounds.max(1),
            noise_scale: params.noise_scale,
        })
    }
}

/// Ridge fit of column `j` on the remaining columns plus an unpenalized
/// intercept, over `rows` of the row-major matrix `work`.
fn ridge_column_fit(
    work: &[f64],
    _n: usize,
    d: usize,
    j: usize,
    rows: &[usize],
    penalty: f64,
) -> Result<Vec<f64>> {
    let m = rows.len();
    if m == 0 {
        return Err(Error::ImputerFit {
            column: format!("{}", j + 1),
            reason: "no observed entries".into(),
        });
    }
    let q = d; // intercept + (d - 1) regressors
    let z = DMatrix::from_fn(m, q, |r, c| {
        if c == 0 {
            1.0
        } else {
            let col = if c - 1 < j { c - 1 } else { c };
            work[rows[r] * d + col]
        }
    });
    let y = DVector::from_fn(m, |r, _| work[rows[r] * d + j]);
    let mut ztz = z.transpose() * &z;
    for c in 1..q {
        ztz[(c, c)] += penalty * m as f64;
    }
    let zty = z.transpose() * y;
    ztz.cholesky()
        .map(|ch| ch.solve(&zty).iter().copied().collect())
        .ok_or_else(|| Error::Singular(format!("ridge system for column {}", j + 1)))
}

#[inline]
fn predict_column(beta: &[f64], row: &[f64], j: usize) -> f64 {
    let mut acc = beta[0];
    let mut c = 1;
    for (t, &v) in row.iter().enumerate() {
        if t == j {
            continue;
        }
        acc += beta[c] * v;
        c += 1;
    }
    acc
}

impl Imputer for IterativeRidgeImputer {
    fn name(&self) -> &'static str {
        "iterative_ridge"
    }

    fn is_stochastic(&self) -> bool {
        self.noise_scale > 0.0
    }

    fn impute_row(&self, x: &[f64], mask: &[u8], xi: StreamKey) -> Vec<f64> {
        let d = x.len();
        let mut out: Vec<f64> = (0..d)
            .map(|j| if mask[j] == 1 { self.means[j] } else { x[j] })
            .collect();
        for _ in 0..self.rounds {
            for j in 0..d {
                if mask[j] == 1 {
                    out[j] = predict_column(&self.coefs[j], &out, j);
                }
            }
        }
        if self.noise_scale > 0.0 {
            for j in 0..d {
                if mask[j] == 1 {
                    let eps = xi.child(j as u64).stream().normal();
                    out[j] += self.noise_scale * self.resid_sd[j] * eps;
                }
            }
        }
        out
    }
}

/// Completions of one row at two nested missingness scales sharing a single
/// imputation pass.
pub struct LinkedPair {
    /// Completion at the base (less missing) scale.
    pub at_base: Vec<f64>,
    /// Completion at the thinned (more missing) scale.
    pub at_thinned: Vec<f64>,
}

/// Impute once at the thinned mask, then restore the entries observed at the
/// base mask to their true values. Common missing entries share imputed
/// values across the two scales by construction. `x_base` is the row's
/// base-scale view (NaN exactly at `mask_base`).
pub fn linked_impute(
    imputer: &dyn Imputer,
    x_base: &[f64],
    mask_base: &[u8],
    mask_thinned: &[u8],
    xi: StreamKey,
) -> Result<LinkedPair> {
    let d = x_base.len();
    if mask_base.len() != d || mask_thinned.len() != d {
        return Err(Error::Dimension(
            "mask lengths differ from row length".into(),
        ));
    }
    for j in 0..d {
        if mask_base[j] == 1 && mask_thinned[j] == 0 {
            return Err(Error::NotNested {
                column: format!("{}", j + 1),
            });
        }
    }
    let thin_view: Vec<f64> = (0..d)
        .map(|j| {
            if mask_thinned[j] == 1 {
                f64::NAN
            } else {
                x_base[j]
            }
        })
        .collect();
    let at_thinned = imputer.impute_row(&thin_view, mask_thinned, xi);
    let at_base: Vec<f64> = (0..d)
        .map(|j| {
            if mask_base[j] == 0 {
                x_base[j]
            } else {
                at_thinned[j]
            }
        })
        .collect();
    Ok(LinkedPair {
        at_base,
        at_thinned,
    })
}

/// Two independent imputation passes, one per scale, with separate noise
/// streams. Breaks the shared-draw discipline on common missing entries;
/// kept only to demonstrate the failure mode.
pub fn unlinked_impute(
    imputer: &dyn Imputer,
    x_base: &[f64],
    mask_base: &[u8],
    mask_thinned: &[u8],
    xi_base: StreamKey,
    xi_thinned: StreamKey,
) -> Result<LinkedPair> {
    let d = x_base.len();
    for j in 0..d {
        if mask_base[j] == 1 && mask_thinned[j] == 0 {
            return Err(Error::NotNested {
                column: format!("{}", j + 1),
            });
        }
    }
    let thin_view: Vec<f64> = (0..d)
        .map(|j| {
            if mask_thinned[j] == 1 {
                f64::NAN
            } else {
                x_base[j]
            }
        })
        .collect();
    let at_base = imputer.impute_row(x_base, mask_base, xi_base);
    let at_thinned = imputer.impute_row(&thin_view, mask_thinned, xi_thinned);
    Ok(LinkedPair {
        at_base,
        at_thinned,
    })
}
