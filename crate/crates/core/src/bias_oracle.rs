//! Exact gradient-bias computation by subset enumeration.
//!
//! For a complete dataset, a mechanism, and an imputation rule, the bias of
//! the imputed stochastic gradient is an expectation over the finitely many
//! missingness patterns of each row. With `m` maskable columns the pattern
//! space has `2^m` elements, so for small supports the bias is computable
//! to floating-point accuracy, with no sampling error. Every estimator in
//! this crate is tested against these enumerations.
//!
//! Two independent routes are kept deliberately:
//! a moment form built from pattern finite differences
//! (`sum_S prod_{j in S} lambda_j(V) * D_S`, with `D_S` the signed
//! inclusion-exclusion differences of pattern gradients), and a direct
//! enumeration (`sum_M P(M|V) G_M` minus the complete-data risk gradient).
//! They must agree to near machine precision; tests enforce it.
//!
//! Because intensities enter the moment form multiplicatively, the bias at
//! every rescaled mechanism `t * p` is one polynomial in `t` whose vector
//! coefficients are accumulated in a single enumeration pass. Bias sweeps
//! and slope checks read that polynomial.

use nalgebra::DVector;

use crate::data::ObservedDataset;
use crate::error::{Error, Result};
use crate::glm::GlmFamily;
use crate::imputation::Imputer;
use crate::mechanisms::MechanismSpec;
use crate::rng::{StreamKey, DOMAIN_MC, DOMAIN_XI};

/// Maskable-column cap for product-law enumeration.
pub const ENUMERATION_CAP: usize = 16;
/// Maskable-column cap when an explicit joint pattern table is supplied.
pub const JOINT_TABLE_CAP: usize = 8;

/// Noise-averaging policy for stochastic imputation rules. The bias of a
/// stochastic rule is averaged over `draws` independent noise streams; the
/// `tag` separates otherwise identical stream families (used to give the
/// two scales of the unlinked estimator genuinely independent noise).
/// Deterministic rules collapse to a single pass.
#[derive(Clone, Copy, Debug)]
pub struct XiAveraging {
    pub seed: u64,
    pub draws: usize,
    pub tag: u64,
}

impl XiAveraging {
    pub fn deterministic() -> Self {
        XiAveraging {
            seed: 0,
            draws: 1,
            tag: 0,
        }
    }

    pub fn new(seed: u64, draws: usize) -> Self {
        XiAveraging {
            seed,
            draws: draws.max(1),
            tag: 0,
        }
    }

    pub fn with_tag(mut self, tag: u64) -> Self {
        self.tag = tag;
        self
    }

    fn effective_draws(&self, imputer: &dyn Imputer) -> usize {
        if imputer.is_stochastic() {
            self.draws
        } else {
            1
        }
    }

    /// Per-(draw, row) noise key; imputers derive per-column children.
    pub fn row_key(&self, draw: usize, row: usize) -> StreamKey {
        StreamKey::root(self.seed)
            .child(DOMAIN_XI)
            .child(self.tag)
            .child(draw as u64)
            .child(row as u64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BiasMethod {
    Enumerated,
    MonteCarlo,
}

/// One bias evaluation. Enumerated reports are exact over masks;
/// `xi_standard_error` carries the residual noise-averaging error for
/// stochastic rules. Monte Carlo reports add mask-sampling error.
#[derive(Clone, Debug)]
pub struct BiasReport {
    pub bias: DVector<f64>,
    pub method: BiasMethod,
    /// Intensity scale `t` the mechanism was evaluated at.
    pub scale: f64,
    /// Mask draws (Monte Carlo only).
    pub sample_count: Option<usize>,
    /// Per-coordinate standard error over mask draws (Monte Carlo only).
    pub standard_error: Option<DVector<f64>>,
    /// Per-coordinate standard error over imputation-noise draws.
    pub xi_standard_error: Option<DVector<f64>>,
}

impl BiasReport {
    pub fn norm(&self) -> f64 {
        self.bias.norm()
    }

    pub fn max_standard_error(&self) -> f64 {
        self.standard_error.as_ref().map_or(0.0, |se| se.max())
    }
}

/// Gradient after declaring exactly the pattern `s_bits` (over `maskable`)
/// missing and imputing. `x_true` must be fully observed.
pub fn subset_gradient(
    family: &GlmFamily,
    imputer: &dyn Imputer,
    w: &DVector<f64>,
    x_true: &[f64],
    y: f64,
    maskable: &[usize],
    s_bits: u32,
    xi_row: StreamKey,
) -> DVector<f64> {
    let d = x_true.len();
    let mut view = x_true.to_vec();
    let mut mask = vec![0u8; d];
    for (b, &j) in maskable.iter().enumerate() {
        if s_bits >> b & 1 == 1 {
            view[j] = f64::NAN;
            mask[j] = 1;
        }
    }
    let completed = imputer.impute_row(&view, &mask, xi_row);
    family.gradient(w, &completed, y)
}

/// Noise-averaged pattern gradients `G_S` of one sample, indexed by subset
/// bits over `maskable`.
pub struct SubsetGradientTable {
    pub maskable: Vec<usize>,
    pub grads: Vec<DVector<f64>>,
}

impl SubsetGradientTable {
    pub fn subsets(&self) -> usize {
        self.grads.len()
    }
}

pub fn subset_gradient_table(
    family: &GlmFamily,
    imputer: &dyn Imputer,
    w: &DVector<f64>,
    x_true: &[f64],
    y: f64,
    maskable: &[usize],
    row: usize,
    xi: &XiAveraging,
) -> Result<SubsetGradientTable> {
    check_cap(maskable.len(), ENUMERATION_CAP)?;
    let m = maskable.len();
    let draws = xi.effective_draws(imputer);
    let mut grads = vec![DVector::zeros(x_true.len()); 1usize << m];
    for k in 0..draws {
        let key = xi.row_key(k, row);
        for (s, g) in grads.iter_mut().enumerate() {
            *g += subset_gradient(family, imputer, w, x_true, y, maskable, s as u32, key);
        }
    }
    for g in &mut grads {
        *g /= draws as f64;
    }
    Ok(SubsetGradientTable {
        maskable: maskable.to_vec(),
        grads,
    })
}

fn check_cap(m: usize, cap: usize) -> Result<()> {
    if m > cap {
        Err(Error::EnumerationCap { d_miss: m, cap })
    } else {
        Ok(())
    }
}

/// In-place subset (Moebius) transform: turns pattern gradients `G_S` into
/// the signed differences `D_S = sum_{T subset S} (-1)^{|S|-|T|} G_T`.
/// The inverse is [`subset_sums`].
pub fn finite_differences(table: &SubsetGradientTable) -> Vec<DVector<f64>> {
    let m = table.maskable.len();
    let mut d = table.grads.clone();
    for b in 0..m {
        let bit = 1usize << b;
        for s in 0..d.len() {
            if s & bit != 0 {
                let (lo, hi) = d.split_at_mut(s);
                hi[0] -= &lo[s ^ bit];
            }
        }
    }
    d
}

/// In-place inverse of [`finite_differences`]: `G_A = sum_{S subset A} D_S`.
pub fn subset_sums(diffs: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let mut g = diffs.to_vec();
    let m = g.len().trailing_zeros() as usize;
    for b in 0..m {
        let bit = 1usize << b;
        for s in 0..g.len() {
            if s & bit != 0 {
                let (lo, hi) = g.split_at_mut(s);
                hi[0] += &lo[s ^ bit];
            }
        }
    }
    g
}

/// Vector coefficients of the bias polynomial in the intensity scale `t`:
/// `bias(t) = sum_r t^r coeff[r]`, degree runs 0..=m with `coeff[0] = 0`.
/// Exact over masks; noise-averaged for stochastic rules.
pub fn bias_polynomial(
    family: &GlmFamily,
    imputer: &dyn Imputer,
    ds: &ObservedDataset,
    mech: &MechanismSpec,
    w: &DVector<f64>,
    xi: &XiAveraging,
) -> Result<Vec<DVector<f64>>> {
    let draws = xi.effective_draws(imputer);
    let mut mean: Option<Vec<DVector<f64>>> = None;
    for k in 0..draws {
        let coeff = bias_polynomial_single_draw(family, imputer, ds, mech, w, xi, k)?;
        match &mut mean {
            None => mean = Some(coeff),
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(&coeff) {
                    *a += c;
                }
            }
        }
    }
    let mut coeff = mean.expect("draws >= 1");
    for c in &mut coeff {
        *c /= draws as f64;
    }
    Ok(coeff)
}

fn conditioning(mech: &MechanismSpec, ds: &ObservedDataset, i: usize) -> Vec<f64> {
    let row = ds.masked_row(i);
    mech.observed_index_set.iter().map(|&j| row[j]).collect()
}

fn require_truth(ds: &ObservedDataset) -> Result<()> {
    if ds.has_ground_truth() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(
            "bias enumeration needs ground-truth values for every entry".into(),
        ))
    }
}

/// Exact bias of the imputed gradient at mechanism scale `t`, via the
/// moment form.
pub fn exact_bias(
    family: &GlmFamily,
    imputer: &dyn Imputer,
    ds: &ObservedDataset,
    mech: &MechanismSpec,
    w: &DVector<f64>,
    t: f64,
    xi: &XiAveraging,
) -> Result<BiasReport> {
    Ok(exact_bias_sweep(family, imputer, ds, mech, w, &[t], xi)?.remove(0))
}

/// Exact bias at several intensity scales from one enumeration pass.
/// Also records the noise-averaging standard error for stochastic rules.
pub fn exact_bias_sweep(
    family: &GlmFamily,
    imputer: &dyn Imputer,
    ds: &ObservedDataset,
    mech: &MechanismSpec,
    w: &DVector<f64>,
    ts: &[f64],
    xi: &XiAveraging,
) -> Result<Vec<BiasReport>> {
    let t_max = ts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(t_max.is_finite() && ts.iter().all(|&t| t >= 0.0)) {
        return Err(Error::InvalidArgument("scales must be nonnegative".into()));
    }
    mech.validate_scaled(ds, t_max, 1.0 - f64::EPSILON)
        .map_err(|e| match e {
            Error::MechanismInfeasible { column, lambda, .. } => Error::MechanismInfeasible {
                column,
                lambda,
                limit: 1.0,
            },
            other => other,
        })?;
    let draws = xi.effective_draws(imputer);
    // Per-draw polynomials let us report the noise-averaging spread.
    let mut per_draw: Vec<Vec<DVector<f64>>> = Vec::with_capacity(draws);
    for k in 0..draws {
        per_draw.push(bias_polynomial_single_draw(
            family, imputer, ds, mech, w, xi, k,
        )?);
    }
    let m = per_draw[0].len();
    let dw = w.len();
    let mut mean_coeff = vec![DVector::zeros(dw); m];
    for coeff in &per_draw {
        for (acc, c) in mean_coeff.iter_mut().zip(coeff) {
            *acc += c;
        }
    }
    for c in &mut mean_coeff {
        *c /= draws as f64;
    }
    let mut out = Vec::with_capacity(ts.len());
    for &t in ts {
        let bias = eval_poly(&mean_coeff, t);
        let xi_se = if draws > 1 {
            let mut var: DVector<f64> = DVector::zeros(dw);
            for coeff in &per_draw {
                let b = eval_poly(coeff, t);
                let dev = &b - &bias;
                for j in 0..dw {
                    var[j] += dev[j] * dev[j];
                }
            }
            Some(DVector::<f64>::from_fn(dw, |j, _| {
                (var[j] / (draws as f64 * (draws - 1) as f64)).sqrt()
            }))
        } else {
            None
        };
        out.push(BiasReport {
            bias,
            method: BiasMethod::Enumerated,
            scale: t,
            sample_count: None,
            standard_error: None,
            xi_standard_error: xi_se,
        });
    }
    Ok(out)
}

fn bias_polynomial_single_draw(
    family: &GlmFamily,
    imputer: &dyn Imputer,
    ds: &ObservedDataset,
    mech: &MechanismSpec,
    w: &DVector<f64>,
    xi: &XiAveraging,
    draw: usize,
) -> Result<Vec<DVector<f64>>> {
    let maskable = mech.maskable_columns();
    check_cap(maskable.len(), ENUMERATION_CAP)?;
    require_truth(ds)?;
    let m = maskable.len();
    let dw = w.len();
    let mut coeff = vec![DVector::zeros(dw); m + 1];
    for i in 0..ds.n() {
        let x = ds.oracle_row(i).expect("checked");
        let v = conditioning(mech, ds, i);
        let mut grads = vec![DVector::zeros(dw); 1usize << m];
        let key = xi.row_key(draw, i);
        for (s, g) in grads.iter_mut().enumerate() {
            *g = subset_gradient(family, imputer, w, x, ds.y(i), &maskable, s as u32, key);
        }
        let table = SubsetGradientTable {
            maskable: maskable.clone(),
            grads,
        };
        let diffs = finite_differences(&table);
        for (s, d_s) in diffs.iter().enumerate().skip(1) {
            let mut rho = 1.0;
            for (b, &j) in maskable.iter().enumerate() {
                if s >> b & 1 == 1 {
                    rho *= mech.lambda(&v, j);
                }
            }
            let card = (s as u32).count_ones() as usize;
            coeff[card].axpy(rho / ds.n() as f64, d_s, 1.0);
        }
    }
    Ok(coeff)
}

fn eval_poly(coeff: &[DVector<f64>], t: f64) -> DVector<f64> {
    let dw = coeff[0].len();
    let mut acc = DVector::zeros(dw);
    let mut tp = 1.0;
    for c in coeff {
        acc.axpy(tp, c, 1.0);
        tp *= t;
    }
    acc
}

/// Exact bias by direct pattern enumeration under the product law;
/// cross-validates the moment form.
pub fn exact_bias_direct(
    family: &GlmFamily,
    imputer: &dyn Imputer,
    ds: &ObservedDataset,
    mech: &MechanismSpec,
    w: &DVector<f64>,
    t: f64,
    xi: &XiAveraging,
) -> Result<BiasReport> {
    let maskable = mech.maskable_columns();
    check_cap(maskable.len(), ENUMERATION_CAP)?;
    require_truth(ds)?;
    mech.validate_scaled(ds, t, 1.0 - f64::EPSILON)
        .map_err(|e| match e {
            Error::MechanismInfeasible { column, lambda, .. } => Error::MechanismInfeasible {
                column,
                lambda,
                limit: 1.0,
            },
            other => other,
        })?;
    let dw = w.len();
    let mut acc = DVector::zeros(dw);
    for i in 0..ds.n() {
        let x = ds.oracle_row(i).expect("checked");
        let v = conditioning(mech, ds, i);
        let lam: Vec<f64> = maskable.iter().map(|&j| t * mech.lambda(&v, j)).collect();
        let table = subset_gradient_table(family, imputer, w, x, ds.y(i), &maskable, i, xi)?;
        for (s, g) in table.grads.iter().enumerate() {
            let mut prob = 1.0;
            for (b, &l) in lam.iter().enumerate() {
                prob *= if s >> b & 1 == 1 { l } else { 1.0 - l };
            }
            acc.axpy(prob, g, 1.0);
        }
    }
    acc /= ds.n() as f64;
    let bias = acc - family.empirical_risk_gradient(w, ds)?;
    Ok(BiasReport {
        bias,
        method: BiasMethod::Enumerated,
        scale: t,
        sample_count: None,
        standard_error: None,
        xi_standard_error: None,
    })
}

/// Exact bias under an explicit joint pattern distribution `joint` (length
/// `2^m` over subsets of `maskable`, identical for every row). Supports
/// dependent masks; capped at [`JOINT_TABLE_CAP`] columns.
pub fn exact_bias_with_joint(
    family: &GlmFamily,
    imputer: &dyn Imputer,
    ds: &ObservedDataset,
    maskable: &[usize],
    joint: &[f64],
    w: &DVector<f64>,
    xi: &XiAveraging,
) -> Result<BiasReport> {
    check_cap(maskable.len(), JOINT_TABLE_CAP)?;
    require_truth(ds)?;
    if joint.len() != 1usize << maskable.len() {
        return Err(Error::Dimension(format!(
            "joint table has {} entries, expected {}",
            joint.len(),
            1usize << maskable.len()
        )));
    }
    let total: f64 = joint.iter().sum();
    if joint.iter().any(|&p| p < 0.0) || (total - 1.0).abs() > 1e-10 {
        return Err(Error::InvalidArgument(format!(
            "joint table entries must be nonnegative and sum to 1 (sum {total})"
        )));
    }
    let dw = w.len();
    let mut acc = DVector::zeros(dw);
    for i in 0..ds.n() {
        let x = ds.oracle_row(i).expect("checked");
        let table = subset_gradient_table(family, imputer, w, x, ds.y(i), maskable, i, xi)?;
        for (s, g) in table.grads.iter().enumerate() {
            acc.axpy(joint[s], g, 1.0);
        }
    }
    acc /= ds.n() as f64;
    let bias = acc - family.empirical_risk_gradient(w, ds)?;
    Ok(BiasReport {
        bias,
        method: BiasMethod::Enumerated,
        scale: 1.0,
        sample_count: None,
        standard_error: None,
        xi_standard_error: None,
    })
}

/// The multilinear coefficients `mu_S = mean_i [prod_{j in S} q_j(V_i)] D_S^(i)`
/// over nonempty subsets of the maskable columns. The bias at probabilities
/// `t * p` is `sum_S prod_{j in S} (t p_j) mu_S`.
pub struct MultilinearCoefficients {
    pub maskable: Vec<usize>,
    /// Indexed by subset bits; entry 0 is zero.
    pub mu: Vec<DVector<f64>>,
}

impl MultilinearCoefficients {
    /// `sum_{S nonempty} prod_{j in S} (t p_j) mu_S`.
    pub fn reconstruct_bias(&self, p: &[f64], t: f64) -> DVector<f64> {
        let dw = self.mu[0].len();
        let mut acc = DVector::zeros(dw);
        for (s, mu_s) in self.mu.iter().enumerate().skip(1) {
            let mut prod = 1.0;
            for (b, &j) in self.maskable.iter().enumerate() {
                if s >> b & 1 == 1 {
                    prod *= t * p[j];
                }
            }
            acc.axpy(prod, mu_s, 1.0);
        }
        acc
    }
}

pub fn multilinear_coefficients(
    family: &GlmFamily,
    imputer: &dyn Imputer,
    ds: &ObservedDataset,
    mech: &MechanismSpec,
    w: &DVector<f64>,
    xi: &XiAveraging,
) -> Result<MultilinearCoefficients> {
    let maskable = mech.maskable_columns();
    check_cap(maskable.len(), ENUMERATION_CAP)?;
    require_truth(ds)?;
    let m = maskable.len();
    let dw = w.len();
    let mut mu = vec![DVector::zeros(dw); 1usize << m];
    for i in 0..ds.n() {
        let x = ds.oracle_row(i).expect("checked");
        let v = conditioning(mech, ds, i);
        let table = subset_gradient_table(family, imputer, w, x, ds.y(i), &maskable, i, xi)?;
        let diffs = finite_differences(&table);
        for (s, d_s) in diffs.iter().enumerate().skip(1) {
            let mut aprod = 1.0;
            for (b, &j) in maskable.iter().enumerate() {
                if s >> b & 1 == 1 && mech.p[j] > 0.0 {
                    aprod *= mech.lambda(&v, j) / mech.p[j];
                }
            }
            mu[s].axpy(aprod / ds.n() as f64, d_s, 1.0);
        }
    }
    Ok(MultilinearCoefficients { maskable, mu })
}

/// First-order bias operator: column `b` (for maskable column `j`) is
/// `mean_i q_j(V_i) * (G_{{j}} - g_i)`, the singleton multilinear
/// coefficient. Computed standalone with `m + 1` pattern evaluations per
/// row instead of `2^m`.
pub fn first_order_operator(
    family: &GlmFamily,
    imputer: &dyn Imputer,
    ds: &ObservedDataset,
    mech: &MechanismSpec,
    w: &DVector<f64>,
    xi: &XiAveraging,
) -> Result<Vec<DVector<f64>>> {
    let maskable = mech.maskable_columns();
    require_truth(ds)?;
    let dw = w.len();
    let draws = xi.effective_draws(imputer);
    let mut cols = vec![DVector::zeros(dw); maskable.len()];
    for i in 0..ds.n() {
        let x = ds.oracle_row(i).expect("checked");
        let v = conditioning(mech, ds, i);
        for k in 0..draws {
            let key = xi.row_key(k, i);
            let g0 = subset_gradient(family, imputer, w, x, ds.y(i), &maskable, 0, key);
            for (b, &j) in maskable.iter().enumerate() {
                let gj = subset_gradient(family, imputer, w, x, ds.y(i), &maskable, 1 << b, key);
                let a = if mech.p[j] > 0.0 {
                    mech.lambda(&v, j) / mech.p[j]
                } else {
                    1.0
                };
                cols[b].axpy(a / (ds.n() * draws) as f64, &(gj - &g0), 1.0);
            }
        }
    }
    Ok(cols)
}

/// Monte Carlo estimate of the imputed-gradient bias at scale `t`: each
/// draw re-masks the whole dataset, imputes, and averages the per-row
/// gradient change relative to the complete row. The complete-data part
/// cancels row by row, so at `t = 0` every draw is identically zero and
/// the reported standard error reflects masking randomness only.
pub fn monte_carlo_bias(
    family: &GlmFamily,
    imputer: &dyn Imputer,
    ds: &ObservedDataset,
    mech: &MechanismSpec,
    w: &DVector<f64>,
    t: f64,
    n_draws: usize,
    seed: u64,
) -> Result<BiasReport> {
    require_truth(ds)?;
    mech.validate_scaled(ds, t, 1.0 - f64::EPSILON)
        .map_err(|e| match e {
            Error::MechanismInfeasible { column, lambda, .. } => Error::MechanismInfeasible {
                column,
                lambda,
                limit: 1.0,
            },
            other => other,
        })?;
    if n_draws == 0 {
        return Err(Error::InvalidArgument("need at least one draw".into()));
    }
    let maskable = mech.maskable_columns();
    let dw = w.len();
    let mask_root = StreamKey::root(seed).child(DOMAIN_MC);
    let xi_root = StreamKey::root(seed).child(DOMAIN_XI);
    let mut mean = DVector::zeros(dw);
    let mut m2: DVector<f64> = DVector::zeros(dw);
    let mut view = vec![0.0; ds.d()];
    let mut mask_row = vec![0u8; ds.d()];
    for k in 0..n_draws {
        let mut b = DVector::zeros(dw);
        for i in 0..ds.n() {
            let x = ds.oracle_row(i).expect("checked");
            let v = conditioning(mech, ds, i);
            view.copy_from_slice(x);
            mask_row.iter_mut().for_each(|m| *m = 0);
            let entry_key = mask_root.child(k as u64).child(i as u64);
            let mut any = false;
            for &j in &maskable {
                let lam = t * mech.lambda(&v, j);
                if entry_key.child(j as u64).stream().bernoulli(lam) {
                    view[j] = f64::NAN;
                    mask_row[j] = 1;
                    any = true;
                }
            }
            if !any {
                continue;
            }
            let xi_row = xi_root.child(k as u64).child(i as u64);
            let completed = imputer.impute_row(&view, &mask_row, xi_row);
            b += family.gradient(w, &completed, ds.y(i)) - family.gradient(w, x, ds.y(i));
        }
        b /= ds.n() as f64;
        // Streaming mean and squared deviation per coordinate.
        let delta = &b - &mean;
        mean.axpy(1.0 / (k + 1) as f64, &delta, 1.0);
        let delta2 = &b - &mean;
        for j in 0..dw {
            m2[j] += delta[j] * delta2[j];
        }
    }
    let se = if n_draws > 1 {
        Some(DVector::<f64>::from_fn(dw, |j, _| {
            (m2[j] / ((n_draws - 1) as f64 * n_draws as f64)).sqrt()
        }))
    } else {
        None
    };
    Ok(BiasReport {
        bias: mean,
        method: BiasMethod::MonteCarlo,
        scale: t,
        sample_count: Some(n_draws),
        standard_error: se,
        xi_standard_error: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glm::{linear_population_bias, FamilyKind, PopulationModel};
    use crate::imputation::{fit_imputer, ImputerKind, ImputerParams};

    fn gaussian_ds(n: usize, d: usize, seed: u64) -> ObservedDataset {
        let mut rng = StreamKey::root(seed)
            .child(crate::rng::DOMAIN_DATA)
            .stream();
        let values: Vec<f64> = (0..n * d).map(|_| rng.normal()).collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        ObservedDataset::complete(values, n, d, ys).unwrap()
    }

    fn zero_imp(ds: &ObservedDataset) -> Box<dyn Imputer> {
        fit_imputer(ImputerKind::Zero, ds, &ImputerParams::default()).unwrap()
    }

    #[test]
    fn moebius_round_trips_pattern_gradients() {
        let ds = gaussian_ds(6, 5, 1);
        let fam = GlmFamily::new(FamilyKind::Logistic, 1e-3).unwrap();
        let imp = zero_imp(&ds);
        let mut rng = StreamKey::root(2).stream();
        let w = DVector::from_fn(5, |_, _| rng.normal());
        let maskable = vec![0, 1, 2, 3, 4];
        let values: Vec<f64> = ds.oracle_row(0).unwrap().to_vec();
        let y = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
        let table = subset_gradient_table(
            &fam,
            &*imp,
            &w,
            &values,
            y,
            &maskable,
            0,
            &XiAveraging::deterministic(),
        )
        .unwrap();
        let diffs = finite_differences(&table);
        let back = subset_sums(&diffs);
        for (a, b) in back.iter().zip(&table.grads) {
            assert!((a - b).norm() < 1e-12);
        }
        // Direct definition on a small pattern: D_{110} by hand.
        let s = 0b110usize;
        let mut hand = DVector::zeros(5);
        for t in [0b000usize, 0b010, 0b100, 0b110] {
            let sign = if (s.count_ones() - t.count_ones()) % 2 == 0 {
                1.0
            } else {
                -1.0
            };
            hand.axpy(sign, &table.grads[t], 1.0);
        }
        assert!((&hand - &diffs[s]).norm() < 1e-12);
    }

    #[test]
    fn moment_and_direct_routes_agree() {
        let ds = gaussian_ds(30, 4, 3);
        let mech = MechanismSpec::hmcar(vec![0.12, 0.2, 0.07, 0.15]).unwrap();
        let mut rng = StreamKey::root(4).stream();
        for kind in [FamilyKind::Linear, FamilyKind::Logistic] {
            let fam = GlmFamily::new(kind, 1e-3).unwrap();
            let ds = match kind {
                FamilyKind::Logistic => relabel_logistic(&ds),
                _ => ds.clone(),
            };
            for ikind in [ImputerKind::Zero, ImputerKind::Mean] {
                let imp = fit_imputer(ikind, &ds, &ImputerParams::default()).unwrap();
                let w = DVector::from_fn(4, |_, _| rng.normal());
                let xi = XiAveraging::deterministic();
                let a = exact_bias(&fam, &*imp, &ds, &mech, &w, 0.8, &xi).unwrap();
                let b = exact_bias_direct(&fam, &*imp, &ds, &mech, &w, 0.8, &xi).unwrap();
                assert!(
                    (&a.bias - &b.bias).norm() < 1e-12,
                    "{kind:?}/{ikind:?}: {}",
                    (&a.bias - &b.bias).norm()
                );
            }
        }
    }

    fn relabel_logistic(ds: &ObservedDataset) -> ObservedDataset {
        let n = ds.n();
        let d = ds.d();
        let values: Vec<f64> = (0..n)
            .flat_map(|i| ds.oracle_row(i).unwrap().to_vec())
            .collect();
        let ys: Vec<f64> = ds
            .responses()
            .iter()
            .map(|&y| if y > 0.0 { 1.0 } else { -1.0 })
            .collect();
        ObservedDataset::complete(values, n, d, ys).unwrap()
    }

    #[test]
    fn exact_bias_matches_linear_closed_form() {
        for inst in 0..10u64 {
            let ds = gaussian_ds(20, 4, 50 + inst);
            let mut rng = StreamKey::root(100 + inst).stream();
            let p: Vec<f64> = (0..4).map(|_| 0.05 + 0.3 * rng.next_f64()).collect();
            let mech = MechanismSpec::hmcar(p.clone()).unwrap();
            let fam = GlmFamily::new(FamilyKind::Linear, 1e-3).unwrap();
            let imp = zero_imp(&ds);
            let w = DVector::from_fn(4, |_, _| rng.normal());
            let rep = exact_bias(
                &fam,
                &*imp,
                &ds,
                &mech,
                &w,
                1.0,
                &XiAveraging::deterministic(),
            )
            .unwrap();
            let model = PopulationModel::from_dataset(&ds).unwrap();
            let closed = linear_population_bias(&model, &w, &p);
            assert!(
                (&rep.bias - &closed).norm() < 1e-10,
                "instance {inst}: {}",
                (&rep.bias - &closed).norm()
            );
        }
    }

    #[test]
    fn single_maskable_column_bias_by_hand() {
        // Two columns, only the second maskable, zero imputation, linear
        // family without ridge. Hiding column 2 gives gradient
        // ((w1 x1 - y) x1, 0), so the bias is p * mean[G_{2} - G_0].
        let values = vec![1.0, 2.0, -1.0, 0.5, 2.0, -1.5];
        let ys = vec![1.0, -0.5, 0.25];
        let ds = ObservedDataset::complete(values.clone(), 3, 2, ys.clone()).unwrap();
        let p = 0.3;
        let mech = MechanismSpec::hmcar(vec![0.0, p]).unwrap();
        let fam = GlmFamily::new(FamilyKind::Linear, 0.0).unwrap();
        let imp = zero_imp(&ds);
        let w = DVector::from_column_slice(&[0.4, -0.7]);
        let rep = exact_bias(
            &fam,
            &*imp,
            &ds,
            &mech,
            &w,
            1.0,
            &XiAveraging::deterministic(),
        )
        .unwrap();
        let mut hand = DVector::zeros(2);
        for i in 0..3 {
            let (x1, x2, y) = (values[2 * i], values[2 * i + 1], ys[i]);
            let r_full = 0.4 * x1 - 0.7 * x2 - y;
            let r_miss = 0.4 * x1 - y;
            let g_full = DVector::from_column_slice(&[r_full * x1, r_full * x2]);
            let g_miss = DVector::from_column_slice(&[r_miss * x1, 0.0]);
            hand.axpy(p / 3.0, &(g_miss - g_full), 1.0);
        }
        assert!((&rep.bias - &hand).norm() < 1e-14);
    }

    #[test]
    fn multilinear_coefficients_reconstruct_the_bias() {
        let ds = gaussian_ds(25, 4, 7);
        let p = vec![0.1, 0.15, 0.08, 0.12];
        let mech = MechanismSpec::hmcar(p.clone()).unwrap();
        let fam = GlmFamily::new(FamilyKind::Logistic, 1e-3).unwrap();
        let ds = relabel_logistic(&ds);
        let imp = fit_imputer(ImputerKind::Mean, &ds, &ImputerParams::default()).unwrap();
        let mut rng = StreamKey::root(8).stream();
        let w = DVector::from_fn(4, |_, _| rng.normal());
        let xi = XiAveraging::deterministic();
        let mu = multilinear_coefficients(&fam, &*imp, &ds, &mech, &w, &xi).unwrap();
        for t in [0.4, 1.0] {
            let rec = mu.reconstruct_bias(&p, t);
            let rep = exact_bias(&fam, &*imp, &ds, &mech, &w, t, &xi).unwrap();
            assert!(
                (&rec - &rep.bias).norm() < 1e-10,
                "t={t}: {}",
                (&rec - &rep.bias).norm()
            );
        }
    }

    #[test]
    fn first_order_operator_matches_singleton_coefficients() {
        let ds = gaussian_ds(20, 3, 9);
        let mech = MechanismSpec::hmcar(vec![0.2, 0.1, 0.25]).unwrap();
        let fam = GlmFamily::new(FamilyKind::Linear, 1e-3).unwrap();
        let imp = fit_imputer(ImputerKind::Mean, &ds, &ImputerParams::default()).unwrap();
        let mut rng = StreamKey::root(10).stream();
        let w = DVector::from_fn(3, |_, _| rng.normal());
        let xi = XiAveraging::deterministic();
        let cols = first_order_operator(&fam, &*imp, &ds, &mech, &w, &xi).unwrap();
        let mu = multilinear_coefficients(&fam, &*imp, &ds, &mech, &w, &xi).unwrap();
        for (b, col) in cols.iter().enumerate() {
            assert!((col - &mu.mu[1 << b]).norm() < 1e-10);
        }
    }

    #[test]
    fn joint_product_table_reproduces_independent_enumeration() {
        let ds = gaussian_ds(15, 3, 11);
        let p = vec![0.2, 0.1, 0.3];
        let mech = MechanismSpec::hmcar(p.clone()).unwrap();
        let fam = GlmFamily::new(FamilyKind::Linear, 0.0).unwrap();
        let imp = zero_imp(&ds);
        let mut rng = StreamKey::root(12).stream();
        let w = DVector::from_fn(3, |_, _| rng.normal());
        let maskable = vec![0usize, 1, 2];
        let mut joint = vec![0.0; 8];
        for (s, pr) in joint.iter_mut().enumerate() {
            *pr = (0..3)
                .map(|b| if s >> b & 1 == 1 { p[b] } else { 1.0 - p[b] })
                .product();
        }
        let xi = XiAveraging::deterministic();
        let a = exact_bias_with_joint(&fam, &*imp, &ds, &maskable, &joint, &w, &xi).unwrap();
        let b = exact_bias(&fam, &*imp, &ds, &mech, &w, 1.0, &xi).unwrap();
        assert!((&a.bias - &b.bias).norm() < 1e-12);
    }

    #[test]
    fn perfectly_correlated_masks_change_the_interaction_order() {
        // Under perfect co-missingness of two columns the pair pattern has
        // probability p (not p^2), so the pair interaction enters the bias
        // at first order: halving p must halve, not quarter, the gap to the
        // independent-mask bias.
        let ds = gaussian_ds(15, 2, 13);
        let fam = GlmFamily::new(FamilyKind::Linear, 0.0).unwrap();
        let imp = zero_imp(&ds);
        let mut rng = StreamKey::root(14).stream();
        let w = DVector::from_fn(2, |_, _| rng.normal());
        let xi = XiAveraging::deterministic();
        let gap = |p: f64| {
            let joint = vec![1.0 - p, 0.0, 0.0, p];
            let corr = exact_bias_with_joint(&fam, &*imp, &ds, &[0, 1], &joint, &w, &xi)
                .unwrap()
                .bias;
            let mech = MechanismSpec::hmcar(vec![p, p]).unwrap();
            let ind = exact_bias(&fam, &*imp, &ds, &mech, &w, 1.0, &xi)
                .unwrap()
                .bias;
            (corr - ind).norm()
        };
        let g1 = gap(0.08);
        let g2 = gap(0.04);
        let ratio = g1 / g2;
        assert!(
            (ratio - 2.0).abs() < 0.35,
            "gap ratio {ratio} not close to linear halving"
        );
    }

    #[test]
    fn monte_carlo_is_exactly_zero_without_missingness_and_consistent_otherwise() {
        let ds = gaussian_ds(40, 4, 15);
        let p = vec![0.15, 0.1, 0.2, 0.05];
        let mech = MechanismSpec::hmcar(p).unwrap();
        let fam = GlmFamily::new(FamilyKind::Linear, 1e-3).unwrap();
        let imp = zero_imp(&ds);
        let mut rng = StreamKey::root(16).stream();
        let w = DVector::from_fn(4, |_, _| rng.normal());
        let zero = monte_carlo_bias(&fam, &*imp, &ds, &mech, &w, 0.0, 5, 99).unwrap();
        assert_eq!(zero.bias.norm(), 0.0);
        let draws = 60_000;
        let mc = monte_carlo_bias(&fam, &*imp, &ds, &mech, &w, 1.0, draws, 99).unwrap();
        let exact = exact_bias(
            &fam,
            &*imp,
            &ds,
            &mech,
            &w,
            1.0,
            &XiAveraging::deterministic(),
        )
        .unwrap();
        let se = mc.standard_error.unwrap();
        for j in 0..4 {
            let dev = (mc.bias[j] - exact.bias[j]).abs();
            assert!(
                dev < 4.0 * se[j].max(1e-12),
                "coord {j}: dev {dev} vs se {}",
                se[j]
            );
        }
        assert_eq!(mc.sample_count, Some(draws));
    }

    #[test]
    fn enumeration_cap_is_enforced() {
        let ds = gaussian_ds(3, 17, 17);
        let mech = MechanismSpec::hmcar(vec![0.01; 17]).unwrap();
        let fam = GlmFamily::new(FamilyKind::Linear, 0.0).unwrap();
        let imp = zero_imp(&ds);
        let w = DVector::zeros(17);
        let err = exact_bias(
            &fam,
            &*imp,
            &ds,
            &mech,
            &w,
            1.0,
            &XiAveraging::deterministic(),
        );
        assert!(matches!(
            err,
            Err(Error::EnumerationCap {
                d_miss: 17,
                cap: 16
            })
        ));
    }

    #[test]
    fn stochastic_rules_report_noise_averaging_error() {
        let ds = gaussian_ds(10, 3, 18);
        let mech = MechanismSpec::hmcar(vec![0.2, 0.1, 0.15]).unwrap();
        let fam = GlmFamily::new(FamilyKind::Linear, 0.0).unwrap();
        let imp = fit_imputer(
            ImputerKind::IterativeRidge,
            &ds,
            &ImputerParams {
                noise_scale: 0.5,
                ..ImputerParams::default()
            },
        )
        .unwrap();
        let w = DVector::from_column_slice(&[0.3, -0.2, 0.1]);
        let rep = exact_bias(&fam, &*imp, &ds, &mech, &w, 1.0, &XiAveraging::new(5, 8)).unwrap();
        let se = rep
            .xi_standard_error
            .expect("stochastic rules report xi error");
        assert!(se.iter().all(|&s| s.is_finite() && s >= 0.0));
        assert!(se.max() > 0.0);
    }
}
