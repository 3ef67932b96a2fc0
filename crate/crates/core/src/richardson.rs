//! Richardson extrapolation of imputed gradients across thinning scales.
//!
//! The imputed-gradient bias is, to leading orders, polynomial in the
//! missingness intensity. Artificially thinning the observed entries to
//! inflate the intensity by known factors and linearly combining the
//! resulting gradients with extrapolation weights cancels the leading
//! polynomial terms. An order-`k` ladder uses scales `1 < C_1 < ... < C_k`
//! with weights solving the Vandermonde system `sum_l alpha_l = 1`,
//! `sum_l alpha_l C_l^m = 0` for `m = 1..k`.
//!
//! Two disciplines couple the scales:
//! * linked: one nested mask cascade per visit, imputed once at the most
//!   aggressive scale with a shared noise stream, observed entries restored
//!   at each lower scale. The leading bias term cancels path by path.
//! * unlinked: each scale re-imputes independently with its own noise.
//!   Marginal expectations match the linked ones, but the cancellation only
//!   happens in expectation over imputation noise, so any finite noise
//!   average leaves a floor that scales like the first-order term.
//!
//! This module also carries exact enumerated bias computations for the
//! extrapolated estimators (including the plug-in variant that thins with
//! estimated intensities), used by the slope and debiasing checks.

use nalgebra::{DMatrix, DVector};

use crate::bias_oracle::{exact_bias_sweep, BiasMethod, BiasReport, XiAveraging};
use crate::data::ObservedDataset;
use crate::error::{Error, Result};
use crate::glm::GlmFamily;
use crate::imputation::Imputer;
use crate::mechanisms::MechanismSpec;
use crate::rng::StreamKey;

/// Total joint-state budget for enumerated extrapolation bias. With `m`
/// maskable columns and order `k` the state space has `(k+2)^m` elements.
pub const STATE_CAP: usize = 1 << 21;

/// Extrapolation ladder: scale factors above the base intensity plus the
/// weights that cancel the first `order` polynomial bias terms.
#[derive(Clone, Debug)]
pub struct RichardsonConfig {
    order: usize,
    factors: Vec<f64>,
    weights: Vec<f64>,
}

impl RichardsonConfig {
    /// Ladder with explicit factors `1 < C_1 < ... < C_order`.
    pub fn new(order: usize, factors: Vec<f64>) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidConfig(
                "extrapolation order must be at least 1".into(),
            ));
        }
        if factors.len() != order {
            return Err(Error::InvalidConfig(format!(
                "order {} needs {} thinning factors, got {}",
                order,
                order,
                factors.len()
            )));
        }
        let mut prev = 1.0;
        for &c in &factors {
            if !(c.is_finite() && c > prev) {
                return Err(Error::InvalidConfig(format!(
                    "thinning factors must be finite and strictly increasing above 1, got {factors:?}"
                )));
            }
            prev = c;
        }
        let weights = solve_weights(&factors)?;
        Ok(RichardsonConfig {
            order,
            factors,
            weights,
        })
    }

    /// Geometric ladder `C_l = c^l`.
    pub fn geometric(order: usize, c: f64) -> Result<Self> {
        let factors = (1..=order).map(|l| c.powi(l as i32)).collect();
        RichardsonConfig::new(order, factors)
    }

    /// Geometric ladder whose top scale stays feasible for the given worst
    /// intensity: while `c^order * lambda_max > 1` the ratio backs off as
    /// `c <- 1 + 0.8 (c - 1)`. Fails if no usable ratio exists.
    pub fn geometric_feasible(order: usize, c: f64, lambda_max: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&lambda_max) {
            return Err(Error::InvalidConfig(format!(
                "worst-case intensity must lie in [0, 1), got {lambda_max}"
            )));
        }
        let mut ratio = c;
        let mut backed_off = false;
        while ratio.powi(order as i32) * lambda_max > 1.0 {
            ratio = 1.0 + 0.8 * (ratio - 1.0);
            backed_off = true;
            if ratio - 1.0 < 1e-6 {
                return Err(Error::InvalidConfig(format!(
                    "no feasible order-{order} ladder: intensity {lambda_max} is too close to 1"
                )));
            }
        }
        if backed_off {
            log::warn!(
                "thinning ladder backed off from ratio {c} to {ratio} \
                 (order {order}, worst intensity {lambda_max})"
            );
        }
        RichardsonConfig::geometric(order, ratio)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Factors above base scale, `C_1 .. C_order`.
    pub fn factors(&self) -> &[f64] {
        &self.factors
    }

    /// All scales including the base: `1, C_1, .., C_order`.
    pub fn scales(&self) -> Vec<f64> {
        let mut s = Vec::with_capacity(self.order + 1);
        s.push(1.0);
        s.extend_from_slice(&self.factors);
        s
    }

    /// Extrapolation weights aligned with [`Self::scales`].
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Largest scale in the ladder.
    pub fn top_scale(&self) -> f64 {
        *self.factors.last().expect("order >= 1")
    }

    /// `sum_l alpha_l g_l` over per-scale gradients.
    pub fn combine(&self, grads: &[DVector<f64>]) -> Result<DVector<f64>> {
        if grads.len() != self.order + 1 {
            return Err(Error::Dimension(format!(
                "expected {} per-scale gradients, got {}",
                self.order + 1,
                grads.len()
            )));
        }
        let mut acc = DVector::zeros(grads[0].len());
        for (a, g) in self.weights.iter().zip(grads) {
            acc.axpy(*a, g, 1.0);
        }
        Ok(acc)
    }
}

fn solve_weights(factors: &[f64]) -> Result<Vec<f64>> {
    let k = factors.len();
    let scales: Vec<f64> = std::iter::once(1.0)
        .chain(factors.iter().copied())
        .collect();
    let a = DMatrix::from_fn(k + 1, k + 1, |m, l| scales[l].powi(m as i32));
    let mut rhs = DVector::zeros(k + 1);
    rhs[0] = 1.0;
    let lu = a.clone().lu();
    let alpha = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("degenerate extrapolation ladder".into()))?;
    let resid = (&a * &alpha - &rhs).norm();
    if resid > 1e-10 {
        return Err(Error::Singular(format!(
            "extrapolation weights failed the cancellation identities (residual {resid:.3e})"
        )));
    }
    Ok(alpha.iter().copied().collect())
}

/// Where the estimator gets the intensities it thins with.
#[derive(Clone, Copy, Debug)]
pub enum IntensitySource<'a> {
    /// Thin with the mechanism that actually generated the masks.
    True,
    /// Thin with a (possibly misspecified) estimated mechanism.
    Estimated(&'a MechanismSpec),
}

impl<'a> IntensitySource<'a> {
    fn resolve(&self, truth: &'a MechanismSpec) -> &'a MechanismSpec {
        match self {
            IntensitySource::True => truth,
            IntensitySource::Estimated(m) => m,
        }
    }
}

/// Marginal missingness after plug-in thinning: the base mask follows
/// intensity `lambda`, the thinning step assumes `lambda_hat`. Equals
/// `c * lambda` exactly when the estimate is exact.
pub fn plugin_effective_intensity(lambda: f64, lambda_hat: f64, c: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) || !(0.0..1.0).contains(&lambda_hat) {
        return Err(Error::InvalidArgument(format!(
            "intensities must satisfy 0 <= lambda <= 1 and 0 <= lambda_hat < 1, \
             got {lambda} and {lambda_hat}"
        )));
    }
    if c < 1.0 {
        return Err(Error::InvalidArgument(format!(
            "thinning factor must be at least 1, got {c}"
        )));
    }
    Ok(c * lambda + (c - 1.0) * (lambda_hat - lambda) / (1.0 - lambda_hat))
}

/// Thin one row's mask from marginal scale `from` to `to` (`1 <= from <=
/// to`): entries already missing stay missing; observed entries with
/// intensity `lambda` stay observed with probability
/// `(1 - to*lambda) / (1 - from*lambda)`.
pub fn thin_row(
    mask: &[u8],
    lambdas: &[f64],
    from: f64,
    to: f64,
    key: StreamKey,
) -> Result<Vec<u8>> {
    if mask.len() != lambdas.len() {
        return Err(Error::Dimension(format!(
            "mask width {} vs intensity width {}",
            mask.len(),
            lambdas.len()
        )));
    }
    let mut out = mask.to_vec();
    for (j, (&m, &lam)) in mask.iter().zip(lambdas).enumerate() {
        if m == 1 {
            continue;
        }
        let denom = 1.0 - from * lam;
        let numer = 1.0 - to * lam;
        if numer < 0.0 || denom <= 0.0 {
            return Err(Error::MechanismInfeasible {
                column: format!("column {}", j + 1),
                lambda: to * lam,
                limit: 1.0,
            });
        }
        let keep = numer / denom;
        if !key.child(j as u64).stream().bernoulli(keep) {
            out[j] = 1;
        }
    }
    Ok(out)
}

/// Nested mask cascade for one row across the ladder scales; element 0 is
/// the base mask itself.
pub fn cascade_row(
    mask: &[u8],
    lambdas: &[f64],
    config: &RichardsonConfig,
    key: StreamKey,
) -> Result<Vec<Vec<u8>>> {
    let scales = config.scales();
    let mut levels = Vec::with_capacity(scales.len());
    levels.push(mask.to_vec());
    for l in 1..scales.len() {
        let prev = levels.last().expect("nonempty");
        let next = thin_row(prev, lambdas, scales[l - 1], scales[l], key.child(l as u64))?;
        levels.push(next);
    }
    Ok(levels)
}

fn row_lambdas(mech: &MechanismSpec, x_masked: &[f64]) -> Vec<f64> {
    let v: Vec<f64> = mech
        .observed_index_set
        .iter()
        .map(|&j| x_masked[j])
        .collect();
    (0..x_masked.len()).map(|j| mech.lambda(&v, j)).collect()
}

/// One linked extrapolated gradient for a single visited sample.
///
/// `x_masked` carries NaN at the entries of `mask`; `thin_key` should be
/// unique per (seed, epoch, row) visit and `xi_row` identifies the shared
/// imputation-noise stream for the whole cascade.
#[allow(clippy::too_many_arguments)]
pub fn estimate_sample_gradient(
    family: &GlmFamily,
    imputer: &dyn Imputer,
    config: &RichardsonConfig,
    source: IntensitySource,
    truth: &MechanismSpec,
    x_masked: &[f64],
    mask: &[u8],
    y: f64,
    w: &DVector<f64>,
    thin_key: StreamKey,
    xi_row: StreamKey,
) -> Result<DVector<f64>> {
    let assumed = source.resolve(truth);
    let lambdas = row_lambdas(assumed, x_masked);
    let levels = cascade_row(mask, &lambdas, config, thin_key)?;
    let top_mask = levels.last().expect("nonempty");
    let mut top_view = x_masked.to_vec();
    for (j, &m) in top_mask.iter().enumerate() {
        if m == 1 {
            top_view[j] = f64::NAN;
        }
    }
    let completed_top = imputer.impute_row(&top_view, top_mask, xi_row);
    let mut grads = Vec::with_capacity(levels.len());
    let mut row = vec![0.0; x_masked.len()];
    for level in &levels {
        for j in 0..row.len() {
            row[j] = if level[j] == 0 {
                x_masked[j]
            } else {
                completed_top[j]
            };
        }
        grads.push(family.gradient(w, &row, y));
    }
    config.combine(&grads)
}

/// Unlinked variant: same nested cascade, but every scale re-imputes its
/// own view with an independent noise stream.
#[allow(clippy::too_many_arguments)]
pub fn estimate_sample_gradient_unlinked(
    family: &GlmFamily,
    imputer: &dyn Imputer,
    config: &RichardsonConfig,
    source: IntensitySource,
    truth: &MechanismSpec,
    x_masked: &[f64],
    mask: &[u8],
    y: f64,
    w: &DVector<f64>,
    thin_key: StreamKey,
    xi_row: StreamKey,
) -> Result<DVector<f64>> {
    let assumed = source.resolve(truth);
    let lambdas = row_lambdas(assumed, x_masked);
    let levels = cascade_row(mask, &lambdas, config, thin_key)?;
    let mut grads = Vec::with_capacity(levels.len());
    let mut view = vec![0.0; x_masked.len()];
    for (l, level) in levels.iter().enumerate() {
        for j in 0..view.len() {
            view[j] = if level[j] == 0 { x_masked[j] } else { f64::NAN };
        }
        let completed = imputer.impute_row(&view, level, xi_row.child(l as u64));
        grads.push(family.gradient(w, &completed, y));
    }
    config.combine(&grads)
}

/// Per-coordinate joint-state probabilities across the cascade at mask
/// scale `t`. State `l` in `0..=k` means "first missing at level `l`";
/// state `k+1` means observed at every level. The base mask uses the true
/// intensity, the thinning steps the assumed one.
fn state_probs(lam_true: f64, lam_assumed: f64, scales: &[f64], t: f64) -> Result<Vec<f64>> {
    let k = scales.len() - 1;
    let lt = t * lam_true;
    let la = t * lam_assumed;
    if !(0.0..=1.0).contains(&lt) {
        return Err(Error::MechanismInfeasible {
            column: "state enumeration".into(),
            lambda: lt,
            limit: 1.0,
        });
    }
    if la >= 1.0 || scales[k] * la > 1.0 + 1e-12 {
        return Err(Error::MechanismInfeasible {
            column: "state enumeration (assumed intensity)".into(),
            lambda: scales[k] * la,
            limit: 1.0,
        });
    }
    let mut probs = Vec::with_capacity(k + 2);
    probs.push(lt);
    let survive_base = 1.0 - lt;
    let denom = 1.0 - la;
    for l in 1..=k {
        let inc = if denom > 0.0 {
            (scales[l] - scales[l - 1]) * la / denom
        } else {
            0.0
        };
        probs.push(survive_base * inc);
    }
    let never = if denom > 0.0 {
        survive_base * (1.0 - scales[k] * la) / denom
    } else {
        0.0
    };
    probs.push(never.max(0.0));
    Ok(probs)
}

/// Exact bias of the linked extrapolated estimator at several mask scales,
/// by enumerating the joint cascade states of every maskable coordinate.
/// `source` selects the intensities used for thinning (the base mask always
/// follows `mech`).
#[allow(clippy::too_many_arguments)]
pub fn richardson_bias_sweep(
    family: &GlmFamily,
    imputer: &dyn Imputer,
    ds: &ObservedDataset,
    mech: &MechanismSpec,
    config: &RichardsonConfig,
    source: IntensitySource,
    w: &DVector<f64>,
    ts: &[f64],
    xi: &XiAveraging,
) -> Result<Vec<BiasReport>> {
    let maskable = mech.maskable_columns();
    let m = maskable.len();
    let k = config.order;
    let states_per_coord = k + 2;
    let total_states = (states_per_coord as u128).pow(m as u32);
    if total_states > STATE_CAP as u128 {
        let max_m = (STATE_CAP as f64).ln() / (states_per_coord as f64).ln();
        return Err(Error::EnumerationCap {
            d_miss: m,
            cap: max_m.floor() as usize,
        });
    }
    let total_states = total_states as usize;
    if !ds.has_ground_truth() {
        return Err(Error::InvalidArgument(
            "bias enumeration needs ground-truth values for every entry".into(),
        ));
    }
    if ts.is_empty() || ts.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(Error::InvalidArgument("scales must be nonnegative".into()));
    }
    let assumed = source.resolve(mech);
    if assumed.d() != mech.d() || assumed.maskable_columns() != maskable {
        return Err(Error::InvalidArgument(
            "assumed mechanism must cover the same maskable columns".into(),
        ));
    }
    let scales = config.scales();
    let dw = w.len();
    let draws = if imputer.is_stochastic() { xi.draws } else { 1 };
    let risk_grad = family.empirical_risk_gradient(w, ds)?;
    // acc[draw][ti] accumulates the expected combined gradient.
    let mut acc = vec![vec![DVector::<f64>::zeros(dw); ts.len()]; draws];
    let mut view = vec![0.0; ds.d()];
    let mut row = vec![0.0; ds.d()];
    let mut state = vec![0usize; m];
    let mut mask_row = vec![0u8; ds.d()];
    for i in 0..ds.n() {
        let x = ds.oracle_row(i).expect("checked");
        let v: Vec<f64> = mech.observed_index_set.iter().map(|&j| x[j]).collect();
        // probs[ti][b][s]
        let mut probs = Vec::with_capacity(ts.len());
        for &t in ts {
            let mut per_coord = Vec::with_capacity(m);
            for &j in &maskable {
                per_coord.push(state_probs(
                    mech.lambda(&v, j),
                    assumed.lambda(&v, j),
                    &scales,
                    t,
                )?);
            }
            probs.push(per_coord);
        }
        for (draw, acc_d) in acc.iter_mut().enumerate() {
            let xi_key = xi.row_key(draw, i);
            // Imputations depend only on the top mask; cache them per pattern.
            let mut completions: Vec<Option<Vec<f64>>> = vec![None; 1usize << m];
            state.iter_mut().for_each(|s| *s = 0);
            for _ in 0..total_states {
                let mut top_bits = 0usize;
                for (b, &s) in state.iter().enumerate() {
                    if s <= k {
                        top_bits |= 1 << b;
                    }
                }
                if completions[top_bits].is_none() {
                    view.copy_from_slice(x);
                    mask_row.iter_mut().for_each(|mm| *mm = 0);
                    for (b, &j) in maskable.iter().enumerate() {
                        if top_bits >> b & 1 == 1 {
                            view[j] = f64::NAN;
                            mask_row[j] = 1;
                        }
                    }
                    completions[top_bits] = Some(imputer.impute_row(&view, &mask_row, xi_key));
                }
                let completed_top = completions[top_bits].as_ref().expect("filled");
                // Combined gradient for this joint state.
                let mut combined = DVector::zeros(dw);
                for (l, &alpha) in config.weights.iter().enumerate() {
                    row.copy_from_slice(x);
                    for (b, &j) in maskable.iter().enumerate() {
                        if state[b] <= l {
                            row[j] = completed_top[j];
                        }
                    }
                    combined.axpy(alpha, &family.gradient(w, &row, ds.y(i)), 1.0);
                }
                for (ti, per_coord) in probs.iter().enumerate() {
                    let mut p = 1.0;
                    for (b, pc) in per_coord.iter().enumerate() {
                        p *= pc[state[b]];
                    }
                    if p != 0.0 {
                        acc_d[ti].axpy(p / ds.n() as f64, &combined, 1.0);
                    }
                }
                // Mixed-radix increment.
                for s in state.iter_mut() {
                    *s += 1;
                    if *s < states_per_coord {
                        break;
                    }
                    *s = 0;
                }
            }
        }
    }
    let mut out = Vec::with_capacity(ts.len());
    for (ti, &t) in ts.iter().enumerate() {
        let mut mean = DVector::zeros(dw);
        for acc_d in &acc {
            mean += &acc_d[ti];
        }
        mean /= draws as f64;
        let bias = &mean - &risk_grad;
        let xi_se = if draws > 1 {
            let mut var: DVector<f64> = DVector::zeros(dw);
            for acc_d in &acc {
                let dev = &acc_d[ti] - &mean;
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

/// Exact bias of the linked extrapolated estimator at one mask scale.
#[allow(clippy::too_many_arguments)]
pub fn richardson_bias(
    family: &GlmFamily,
    imputer: &dyn Imputer,
    ds: &ObservedDataset,
    mech: &MechanismSpec,
    config: &RichardsonConfig,
    source: IntensitySource,
    w: &DVector<f64>,
    t: f64,
    xi: &XiAveraging,
) -> Result<BiasReport> {
    Ok(richardson_bias_sweep(family, imputer, ds, mech, config, source, w, &[t], xi)?.remove(0))
}

/// Exact bias of the unlinked estimator: each scale is an independent plain
/// imputed gradient at marginal intensity `C_l * t`, with its own noise
/// stream (tag offset by the level index), combined with the ladder
/// weights.
#[allow(clippy::too_many_arguments)]
pub fn unlinked_bias_sweep(
    family: &GlmFamily,
    imputer: &dyn Imputer,
    ds: &ObservedDataset,
    mech: &MechanismSpec,
    config: &RichardsonConfig,
    w: &DVector<f64>,
    ts: &[f64],
    xi: &XiAveraging,
) -> Result<Vec<BiasReport>> {
    let scales = config.scales();
    let mut combined: Vec<DVector<f64>> = vec![DVector::zeros(w.len()); ts.len()];
    for (l, (&c, &alpha)) in scales.iter().zip(config.weights()).enumerate() {
        let ts_l: Vec<f64> = ts.iter().map(|&t| c * t).collect();
        let xi_l = xi.with_tag(xi.tag + l as u64);
        let reports = exact_bias_sweep(family, imputer, ds, mech, w, &ts_l, &xi_l)?;
        for (acc, rep) in combined.iter_mut().zip(&reports) {
            acc.axpy(alpha, &rep.bias, 1.0);
        }
    }
    Ok(ts
        .iter()
        .zip(combined)
        .map(|(&t, bias)| BiasReport {
            bias,
            method: BiasMethod::Enumerated,
            scale: t,
            sample_count: None,
            standard_error: None,
            xi_standard_error: None,
        })
        .collect())
}
