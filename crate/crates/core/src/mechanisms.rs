//! Missingness mechanisms and the intensity-rescaling construction.
//!
//! A mechanism assigns each maskable column `j` a per-row missingness
//! intensity `lambda_j(v) = p_j * q_j(v)`, where `v` is the always-observed
//! conditioning subvector. Homogeneous-probability MCAR uses `q_j == 1`;
//! the covariate-dependent variant uses normalized logistic intensities with
//! `mean q_j = 1` so `p_j` keeps its marginal-rate meaning.
//!
//! Thinning turns a realized mask at intensity `lambda` into one at
//! `C * lambda` without touching the data: each observed entry stays
//! observed with probability `(1 - C*lambda) / (1 - lambda)`, so the new
//! mask is nested above the old one and has exactly the rescaled
//! conditional marginal. Cascading the step produces the nested ladder of
//! masks that extrapolated gradient estimators combine.

use crate::data::{Mask, ObservedDataset};
use crate::error::{Error, Result};
use crate::numerics::sigmoid;
use crate::rng::StreamKey;

/// Per-column intensity profile `q_j(v)`; always normalized to mean 1 over
/// the calibration rows.
#[derive(Clone, Debug, PartialEq)]
pub enum Intensity {
    /// `q(v) == 1`; the covariate-independent case.
    Constant,
    /// `q(v) = scale * (sigmoid(weights . v + intercept) + shift)`.
    /// `sigma_mean` records the calibration-fold mean of the sigmoid part so
    /// the profile can be renormalized later without re-reading data.
    Logistic {
        weights: Vec<f64>,
        intercept: f64,
        shift: f64,
        scale: f64,
        sigma_mean: f64,
    },
}

impl Intensity {
    pub fn eval(&self, v: &[f64]) -> f64 {
        match self {
            Intensity::Constant => 1.0,
            Intensity::Logistic {
                weights,
                intercept,
                shift,
                scale,
                ..
            } => {
                debug_assert_eq!(weights.len(), v.len());
                let z: f64 = weights.iter().zip(v).map(|(w, x)| w * x).sum::<f64>() + intercept;
                scale * (sigmoid(z) + shift)
            }
        }
    }

    /// Rescale so the mean over `rows` (conditioning subvectors) is 1.
    pub fn normalized_on<'a, I>(&self, rows: I) -> Result<Intensity>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        match self {
            Intensity::Constant => Ok(Intensity::Constant),
            Intensity::Logistic {
                weights,
                intercept,
                shift,
                ..
            } => {
                let mut acc = 0.0;
                let mut n = 0usize;
                for v in rows {
                    let z: f64 = weights.iter().zip(v).map(|(w, x)| w * x).sum::<f64>() + intercept;
                    acc += sigmoid(z);
                    n += 1;
                }
                if n == 0 {
                    return Err(Error::Calibration(
                        "no rows to normalize intensity on".into(),
                    ));
                }
                let sigma_mean = acc / n as f64;
                let denom = sigma_mean + shift;
                if denom <= 0.0 {
                    return Err(Error::Calibration(format!(
                        "intensity mean {denom} not positive; cannot normalize"
                    )));
                }
                Ok(Intensity::Logistic {
                    weights: weights.clone(),
                    intercept: *intercept,
                    shift: *shift,
                    scale: 1.0 / denom,
                    sigma_mean,
                })
            }
        }
    }

    /// Additive perturbation `q <- q + delta`, renormalized back to mean 1
    /// using the stored calibration mean. Identity for constant profiles.
    pub fn perturbed(&self, delta: f64) -> Result<Intensity> {
        match self {
            Intensity::Constant => Ok(Intensity::Constant),
            Intensity::Logistic {
                weights,
                intercept,
                shift,
                scale,
                sigma_mean,
            } => {
                let new_shift = shift + delta / scale;
                let denom = sigma_mean + new_shift;
                if denom <= 0.0 {
                    return Err(Error::Calibration(format!(
                        "perturbation {delta} drives intensity mean to {denom}"
                    )));
                }
                Ok(Intensity::Logistic {
                    weights: weights.clone(),
                    intercept: *intercept,
                    shift: new_shift,
                    scale: 1.0 / denom,
                    sigma_mean: *sigma_mean,
                })
            }
        }
    }

    /// Re-express the profile on affinely transformed conditioning values
    /// `v_std = (v - mean) / scale_v`, exactly: the composition stays in the
    /// logistic family.
    pub fn compose_affine(&self, means: &[f64], scales: &[f64]) -> Intensity {
        match self {
            Intensity::Constant => Intensity::Constant,
            Intensity::Logistic {
                weights,
                intercept,
                shift,
                scale,
                sigma_mean,
            } => {
                let new_weights: Vec<f64> =
                    weights.iter().zip(scales).map(|(w, s)| w * s).collect();
                let new_intercept =
                    intercept + weights.iter().zip(means).map(|(w, m)| w * m).sum::<f64>();
                Intensity::Logistic {
                    weights: new_weights,
                    intercept: new_intercept,
                    shift: *shift,
                    scale: *scale,
                    sigma_mean: *sigma_mean,
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MechanismKind {
    Hmcar,
    Smar,
}

impl std::fmt::Display for MechanismKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MechanismKind::Hmcar => "hmcar",
            MechanismKind::Smar => "smar",
        })
    }
}

/// Ground-truth missingness mechanism.
#[derive(Clone, Debug)]
pub struct MechanismSpec {
    pub kind: MechanismKind,
    /// Per-column marginal probabilities; zero on the observed index set.
    pub p: Vec<f64>,
    /// Columns that never go missing; conditioning variables for `q`.
    pub observed_index_set: Vec<usize>,
    /// Per-column intensity profiles over the conditioning subvector.
    pub q: Vec<Intensity>,
}

impl MechanismSpec {
    pub fn hmcar(p: Vec<f64>) -> Result<Self> {
        let q = vec![Intensity::Constant; p.len()];
        Self::validated(MechanismKind::Hmcar, p, vec![], q)
    }

    pub fn smar(p: Vec<f64>, observed_index_set: Vec<usize>, q: Vec<Intensity>) -> Result<Self> {
        Self::validated(MechanismKind::Smar, p, observed_index_set, q)
    }

    fn validated(
        kind: MechanismKind,
        p: Vec<f64>,
        mut observed_index_set: Vec<usize>,
        q: Vec<Intensity>,
    ) -> Result<Self> {
        observed_index_set.sort_unstable();
        observed_index_set.dedup();
        if q.len() != p.len() {
            return Err(Error::Dimension(
                "intensity count differs from p length".into(),
            ));
        }
        for (j, &pj) in p.iter().enumerate() {
            if !(0.0..1.0).contains(&pj) {
                return Err(Error::InvalidArgument(format!(
                    "p[{}] = {pj} outside [0, 1)",
                    j + 1
                )));
            }
        }
        for &j in &observed_index_set {
            if j >= p.len() {
                return Err(Error::InvalidArgument(format!(
                    "observed column index {j} out of range"
                )));
            }
            if p[j] != 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "always-observed column {} must have p = 0, got {}",
                    j + 1,
                    p[j]
                )));
            }
        }
        Ok(MechanismSpec {
            kind,
            p,
            observed_index_set,
            q,
        })
    }

    pub fn d(&self) -> usize {
        self.p.len()
    }

    /// Columns with positive missingness probability.
    pub fn maskable_columns(&self) -> Vec<usize> {
        (0..self.p.len()).filter(|&j| self.p[j] > 0.0).collect()
    }

    /// `lambda_j(v) = p_j * q_j(v)` for a conditioning subvector `v`.
    pub fn lambda(&self, v: &[f64], j: usize) -> f64 {
        if self.p[j] == 0.0 {
            0.0
        } else {
            self.p[j] * self.q[j].eval(v)
        }
    }

    /// `lambda_j` evaluated on row `i` of `ds`.
    pub fn lambda_row(&self, ds: &ObservedDataset, i: usize, j: usize) -> f64 {
        if self.p[j] == 0.0 {
            return 0.0;
        }
        let v = self.gather_v(ds, i);
        self.lambda(&v, j)
    }

    fn gather_v(&self, ds: &ObservedDataset, i: usize) -> Vec<f64> {
        let row = ds.masked_row(i);
        self.observed_index_set.iter().map(|&j| row[j]).collect()
    }

    /// Conditional marginal after thinning by factor `c`.
    pub fn marginal_intensity(&self, v: &[f64], c: f64, j: usize) -> f64 {
        c * self.lambda(v, j)
    }

    /// Joint probability that every column in `s` is missing given `v`;
    /// columns are masked independently, so this is the product of
    /// intensities. Empty set gives 1.
    pub fn co_missingness(&self, v: &[f64], s: &[usize]) -> f64 {
        s.iter().map(|&j| self.lambda(v, j)).product()
    }

    /// Check `scale * lambda_j(V_i) <= limit` (and `>= 0`) on every maskable
    /// entry; reports the worst violating column by name.
    pub fn validate_scaled(&self, ds: &ObservedDataset, scale: f64, limit: f64) -> Result<()> {
        let mut worst: Option<(usize, f64)> = None;
        for i in 0..ds.n() {
            let v = self.gather_v(ds, i);
            for &j in &self.maskable_columns() {
                let lam = scale * self.lambda(&v, j);
                if !(0.0..=limit).contains(&lam) && worst.map_or(true, |(_, w)| lam > w) {
                    worst = Some((j, lam));
                }
            }
        }
        match worst {
            Some((j, lam)) => Err(Error::MechanismInfeasible {
                column: ds.column_name(j).to_string(),
                lambda: lam,
                limit,
            }),
            None => Ok(()),
        }
    }

    /// Largest `lambda_j(V_i)` over maskable entries of `ds`.
    pub fn max_lambda(&self, ds: &ObservedDataset) -> f64 {
        let cols = self.maskable_columns();
        let mut m: f64 = 0.0;
        for i in 0..ds.n() {
            let v = self.gather_v(ds, i);
            for &j in &cols {
                m = m.max(self.lambda(&v, j));
            }
        }
        m
    }

    /// Same mechanism with `p` multiplied by `t`; used for bias sweeps.
    pub fn scaled(&self, t: f64) -> Result<Self> {
        let p: Vec<f64> = self.p.iter().map(|&pj| pj * t).collect();
        Self::validated(
            self.kind,
            p,
            self.observed_index_set.clone(),
            self.q.clone(),
        )
    }

    /// Re-express intensities on columnwise standardized data. `means` and
    /// `scales` are full-width (length `d`); the observed subset is selected
    /// internally.
    pub fn compose_affine(&self, means: &[f64], scales: &[f64]) -> Self {
        let sub_means: Vec<f64> = self.observed_index_set.iter().map(|&j| means[j]).collect();
        let sub_scales: Vec<f64> = self.observed_index_set.iter().map(|&j| scales[j]).collect();
        let q = self
            .q
            .iter()
            .map(|qi| qi.compose_affine(&sub_means, &sub_scales))
            .collect();
        MechanismSpec {
            kind: self.kind,
            p: self.p.clone(),
            observed_index_set: self.observed_index_set.clone(),
            q,
        }
    }

    /// Rescale `p` (after renormalizing each `q_j` to sample mean 1 on `ds`)
    /// so the average intensity over maskable entries equals `target`.
    pub fn calibrate_mean_missingness(&self, ds: &ObservedDataset, target: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&target) {
            return Err(Error::Calibration(format!(
                "target {target} outside [0, 1)"
            )));
        }
        let cols = self.maskable_columns();
        if target == 0.0 {
            let mut spec = self.clone();
            spec.p.iter_mut().for_each(|p| *p = 0.0);
            return Ok(spec);
        }
        if cols.is_empty() {
            return Err(Error::Calibration(
                "no maskable columns but a positive target was requested".into(),
            ));
        }
        let vs: Vec<Vec<f64>> = (0..ds.n()).map(|i| self.gather_v(ds, i)).collect();
        let mut q = self.q.clone();
        for &j in &cols {
            q[j] = q[j].normalized_on(vs.iter().map(|v| v.as_slice()))?;
        }
        let normalized = MechanismSpec {
            kind: self.kind,
            p: self.p.clone(),
            observed_index_set: self.observed_index_set.clone(),
            q,
        };
        let mut acc = 0.0;
        for v in &vs {
            for &j in &cols {
                acc += normalized.lambda(v, j);
            }
        }
        let current = acc / (vs.len() * cols.len()) as f64;
        if current <= 0.0 {
            return Err(Error::Calibration("current mean intensity is zero".into()));
        }
        let factor = target / current;
        let mut spec = normalized;
        for &j in &cols {
            spec.p[j] *= factor;
            if spec.p[j] >= 1.0 {
                return Err(Error::Calibration(format!(
                    "target {target} needs p = {} at column {}",
                    spec.p[j],
                    ds.column_name(j)
                )));
            }
        }
        spec.validate_scaled(ds, 1.0, 1.0 - 1e-12)
            .map_err(|e| Error::Calibration(format!("target {target} infeasible: {e}")))?;
        Ok(spec)
    }

    /// Random heterogeneous MCAR: raw per-column scores uniform on
    /// [0, 1], rescaled so the mean probability equals `pbar`.
    pub fn random_hmcar(d: usize, pbar: f64, key: StreamKey) -> Result<Self> {
        let mut rng = key.stream();
        let raw: Vec<f64> = (0..d).map(|_| rng.next_f64()).collect();
        let m = crate::numerics::mean(&raw);
        if m <= 0.0 {
            return Err(Error::Calibration(
                "degenerate raw missingness scores".into(),
            ));
        }
        let p: Vec<f64> = raw.iter().map(|r| r * pbar / m).collect();
        Self::hmcar(p)
    }

    /// Covariate-dependent mechanism with per-column random logistic
    /// intensities `sigmoid(weight_scale * <a, v> + intercept)`, `a` uniform
    /// on [0, 1] per conditioning column, calibrated on `ds` to mean
    /// missingness `pbar`.
    pub fn random_smar(
        ds: &ObservedDataset,
        observed_index_set: Vec<usize>,
        pbar: f64,
        weight_scale: f64,
        intercept: f64,
        key: StreamKey,
    ) -> Result<Self> {
        let d = ds.d();
        let mut rng = key.stream();
        let mut p = vec![0.0; d];
        let mut q = vec![Intensity::Constant; d];
        for j in 0..d {
            if observed_index_set.contains(&j) {
                continue;
            }
            p[j] = rng.next_f64();
            let weights: Vec<f64> = (0..observed_index_set.len())
                .map(|_| weight_scale * rng.next_f64())
                .collect();
            q[j] = Intensity::Logistic {
                weights,
                intercept,
                shift: 0.0,
                scale: 1.0,
                sigma_mean: 0.5,
            };
        }
        // Guard against a degenerate all-zero draw before calibration.
        if p.iter().all(|&x| x == 0.0) {
            p.iter_mut()
                .enumerate()
                .filter(|(j, _)| !observed_index_set.contains(j))
                .for_each(|(_, x)| *x = 0.5);
        }
        let spec = Self::smar(p, observed_index_set, q)?;
        spec.calibrate_mean_missingness(ds, pbar)
    }
}

/// Validated thinning step from intensity scale `from_scale` to `to_scale`.
#[derive(Clone, Copy, Debug)]
pub struct ThinningPlan {
    pub from_scale: f64,
    pub to_scale: f64,
}

impl ThinningPlan {
    /// Eagerly checks feasibility on every maskable entry of `ds`:
    /// `to_scale * lambda <= 1` and `from_scale * lambda < 1`.
    pub fn new(
        spec: &MechanismSpec,
        ds: &ObservedDataset,
        from_scale: f64,
        to_scale: f64,
    ) -> Result<Self> {
        if !(from_scale > 0.0 && to_scale >= from_scale) {
            return Err(Error::InvalidArgument(format!(
                "thinning scales must satisfy 0 < from <= to, got {from_scale} -> {to_scale}"
            )));
        }
        spec.validate_scaled(ds, to_scale, 1.0)?;
        // from < to makes the strict bound implied by the check above except
        // at equality of scales, where the base-spec bound applies.
        spec.validate_scaled(ds, from_scale, 1.0 - f64::EPSILON)
            .map_err(|e| match e {
                Error::MechanismInfeasible { column, lambda, .. } => Error::MechanismInfeasible {
                    column,
                    lambda,
                    limit: 1.0,
                },
                other => other,
            })?;
        Ok(ThinningPlan {
            from_scale,
            to_scale,
        })
    }

    /// Probability that an entry observed at the base scale stays observed.
    #[inline]
    pub fn keep_prob(&self, lambda: f64) -> f64 {
        (1.0 - self.to_scale * lambda) / (1.0 - self.from_scale * lambda)
    }
}

/// Draw a base mask at scale 1. `key` should be
/// `StreamKey::root(seed).child(DOMAIN_MASK)`; each entry consumes one
/// Bernoulli from its own `(row, column)` substream.
pub fn sample_mask(spec: &MechanismSpec, ds: &ObservedDataset, key: StreamKey) -> Result<Mask> {
    if spec.d() != ds.d() {
        return Err(Error::Dimension(
            "mechanism width differs from dataset".into(),
        ));
    }
    spec.validate_scaled(ds, 1.0, 1.0 - f64::EPSILON)
        .map_err(|e| match e {
            Error::MechanismInfeasible { column, lambda, .. } => Error::MechanismInfeasible {
                column,
                lambda,
                limit: 1.0,
            },
            other => other,
        })?;
    let cols = spec.maskable_columns();
    let mut mask = Mask::zeros(ds.n(), ds.d());
    for i in 0..ds.n() {
        let v = spec.gather_v(ds, i);
        let row_key = key.child(i as u64);
        for &j in &cols {
            let lam = spec.lambda(&v, j);
            if row_key.child(j as u64).stream().bernoulli(lam) {
                mask.set(i, j, true);
            }
        }
    }
    Ok(mask)
}

/// Thin `mask` (at intensity scale `from_scale`) up to `to_scale`.
/// Observed entries flip to missing with probability `1 - keep_prob`; the
/// result is nested above the input by construction. The key must identify
/// the cascade level so repeated thinning stays replayable.
pub fn thin_mask_scaled(
    mask: &Mask,
    spec: &MechanismSpec,
    ds: &ObservedDataset,
    from_scale: f64,
    to_scale: f64,
    key: StreamKey,
) -> Result<Mask> {
    let plan = ThinningPlan::new(spec, ds, from_scale, to_scale)?;
    apply_thinning(
        mask,
        ds,
        key,
        |v, j| {
            let lam = spec.lambda(v, j);
            plan.keep_prob(lam)
        },
        &spec.maskable_columns(),
        |i| spec.gather_v(ds, i),
    )
}

fn apply_thinning<F, G>(
    mask: &Mask,
    ds: &ObservedDataset,
    key: StreamKey,
    keep_prob: F,
    cols: &[usize],
    gather: G,
) -> Result<Mask>
where
    F: Fn(&[f64], usize) -> f64,
    G: Fn(usize) -> Vec<f64>,
{
    let mut out = mask.clone();
    for i in 0..ds.n() {
        let v = gather(i);
        let row_key = key.child(i as u64);
        for &j in cols {
            if !mask.is_missing(i, j) {
                let keep = keep_prob(&v, j);
                if !row_key.child(j as u64).stream().bernoulli(keep) {
                    out.set(i, j, true);
                }
            }
        }
    }
    Ok(out)
}

/// One factor-`c` thinning of a scale-1 mask, keyed as cascade level 1.
pub fn thin_mask(
    mask: &Mask,
    spec: &MechanismSpec,
    ds: &ObservedDataset,
    c: f64,
    key: StreamKey,
) -> Result<Mask> {
    thin_mask_scaled(mask, spec, ds, 1.0, c, key.child(1))
}

/// Iterated thinning along a factor ladder `factors[0] <= factors[1] <= ...`
/// (relative to scale 1). Returns one mask per ladder level; each is nested
/// above the previous. Level `l` draws from `key.child(l + 1)`.
pub fn cascade_thin(
    mask: &Mask,
    spec: &MechanismSpec,
    ds: &ObservedDataset,
    factors: &[f64],
    key: StreamKey,
) -> Result<Vec<Mask>> {
    let mut out = Vec::with_capacity(factors.len());
    let mut current = mask.clone();
    let mut scale = 1.0;
    for (l, &c) in factors.iter().enumerate() {
        if c < scale {
            return Err(Error::InvalidArgument(format!(
                "cascade factors must be nondecreasing, got {c} after {scale}"
            )));
        }
        current = thin_mask_scaled(&current, spec, ds, scale, c, key.child(l as u64 + 1))?;
        scale = c;
        out.push(current.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::default_column_names;
    use crate::rng::{DOMAIN_MASK, DOMAIN_THIN};

    fn gaussian_ds(n: usize, d: usize, seed: u64) -> ObservedDataset {
        let mut rng = StreamKey::root(seed)
            .child(crate::rng::DOMAIN_DATA)
            .stream();
        let values: Vec<f64> = (0..n * d).map(|_| rng.normal()).collect();
        let ys = vec![0.0; n];
        ObservedDataset::complete(values, n, d, ys).unwrap()
    }

    #[test]
    fn sample_mask_is_replayable_and_respects_zero_p() {
        let ds = gaussian_ds(500, 4, 1);
        let spec = MechanismSpec::hmcar(vec![0.3, 0.0, 0.5, 0.1]).unwrap();
        let key = StreamKey::root(9).child(DOMAIN_MASK);
        let a = sample_mask(&spec, &ds, key).unwrap();
        let b = sample_mask(&spec, &ds, key).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.column_mean(1), 0.0);
    }

    #[test]
    fn sample_mask_frequency_matches_p() {
        let ds = gaussian_ds(20_000, 3, 2);
        let spec = MechanismSpec::hmcar(vec![0.2, 0.05, 0.6]).unwrap();
        let mask = sample_mask(&spec, &ds, StreamKey::root(3).child(DOMAIN_MASK)).unwrap();
        for (j, &p) in spec.p.iter().enumerate() {
            let se = (p * (1.0 - p) / 20_000.0).sqrt();
            assert!(
                (mask.column_mean(j) - p).abs() < 4.0 * se,
                "col {j}: {} vs {p}",
                mask.column_mean(j)
            );
        }
    }

    #[test]
    fn thinning_is_nested_and_never_unmasks() {
        let ds = gaussian_ds(2_000, 3, 4);
        let spec = MechanismSpec::hmcar(vec![0.2, 0.1, 0.3]).unwrap();
        let base = sample_mask(&spec, &ds, StreamKey::root(5).child(DOMAIN_MASK)).unwrap();
        let thinned = thin_mask(
            &base,
            &spec,
            &ds,
            2.0,
            StreamKey::root(5).child(DOMAIN_THIN),
        )
        .unwrap();
        assert_eq!(base.nesting_violation(&thinned), None);
        assert!(thinned.count_missing() >= base.count_missing());
    }

    #[test]
    fn thinning_marginal_matches_rescaled_intensity_across_seeds() {
        // 20 seeds x 5 columns; at least 95% of (seed, column) checks must
        // land inside the 3-sigma binomial band for the thinned marginal.
        let n = 100_000;
        let d = 5;
        let ds = gaussian_ds(n, d, 6);
        let p = vec![0.25, 0.1, 0.3, 0.05, 0.18];
        let spec = MechanismSpec::hmcar(p.clone()).unwrap();
        let c = 2.0;
        let mut pass = 0;
        let mut total = 0;
        for seed in 0..20u64 {
            let base = sample_mask(&spec, &ds, StreamKey::root(seed).child(DOMAIN_MASK)).unwrap();
            let thinned = thin_mask(
                &base,
                &spec,
                &ds,
                c,
                StreamKey::root(seed).child(DOMAIN_THIN),
            )
            .unwrap();
            for j in 0..d {
                let target = c * p[j];
                let se = (target * (1.0 - target) / n as f64).sqrt();
                total += 1;
                if (thinned.column_mean(j) - target).abs() < 3.0 * se {
                    pass += 1;
                }
            }
        }
        assert!(
            pass as f64 >= 0.95 * total as f64,
            "only {pass}/{total} within 3 sigma"
        );
    }

    #[test]
    fn cascade_with_unit_first_factor_matches_single_thin_distributionally() {
        let n = 100_000;
        let ds = gaussian_ds(n, 2, 7);
        let spec = MechanismSpec::hmcar(vec![0.2, 0.15]).unwrap();
        let base = sample_mask(&spec, &ds, StreamKey::root(11).child(DOMAIN_MASK)).unwrap();
        let key = StreamKey::root(11).child(DOMAIN_THIN);
        let cascade = cascade_thin(&base, &spec, &ds, &[1.0, 2.0], key).unwrap();
        let single = thin_mask(&base, &spec, &ds, 2.0, key).unwrap();
        for j in 0..2 {
            let target = 2.0 * spec.p[j];
            let se = (target * (1.0 - target) / n as f64).sqrt();
            let fc = cascade[1].column_mean(j);
            let fs = single.column_mean(j);
            assert!((fc - target).abs() < 3.0 * se, "cascade col {j}: {fc}");
            assert!((fs - target).abs() < 3.0 * se, "single col {j}: {fs}");
        }
    }

    #[test]
    fn infeasible_thinning_names_the_worst_column() {
        let ds = gaussian_ds(100, 2, 8);
        let spec = MechanismSpec::hmcar(vec![0.2, 0.6]).unwrap();
        let base = sample_mask(&spec, &ds, StreamKey::root(1).child(DOMAIN_MASK)).unwrap();
        let err = thin_mask(
            &base,
            &spec,
            &ds,
            2.0,
            StreamKey::root(1).child(DOMAIN_THIN),
        )
        .unwrap_err();
        match err {
            Error::MechanismInfeasible { column, lambda, .. } => {
                assert_eq!(column, "x2");
                assert!((lambda - 1.2).abs() < 1e-12);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn smar_lambda_depends_on_conditioning_values() {
        let q = Intensity::Logistic {
            weights: vec![2.0],
            intercept: 0.0,
            shift: 0.0,
            scale: 1.0,
            sigma_mean: 0.5,
        };
        let spec =
            MechanismSpec::smar(vec![0.0, 0.3], vec![0], vec![Intensity::Constant, q]).unwrap();
        let lo = spec.lambda(&[-2.0], 1);
        let hi = spec.lambda(&[2.0], 1);
        assert!(lo < 0.3 * 0.05);
        assert!(hi > 0.3 * 0.95);
    }

    #[test]
    fn calibration_hits_target_and_is_idempotent() {
        let ds = gaussian_ds(4_000, 4, 9);
        let spec = MechanismSpec::random_smar(
            &ds,
            vec![0, 1],
            0.2,
            1.6,
            -0.3,
            StreamKey::root(13).child(crate::rng::DOMAIN_PERTURB),
        )
        .unwrap();
        let cols = spec.maskable_columns();
        let mut acc = 0.0;
        for i in 0..ds.n() {
            for &j in &cols {
                acc += spec.lambda_row(&ds, i, j);
            }
        }
        let mean = acc / (ds.n() * cols.len()) as f64;
        assert!((mean - 0.2).abs() < 1e-4, "mean {mean}");
        // Per-column q means are 1.
        for &j in &cols {
            let qs: Vec<f64> = (0..ds.n())
                .map(|i| spec.lambda_row(&ds, i, j) / spec.p[j])
                .collect();
            assert!((crate::numerics::mean(&qs) - 1.0).abs() < 1e-10);
        }
        let again = spec.calibrate_mean_missingness(&ds, 0.2).unwrap();
        for j in 0..4 {
            assert!((again.p[j] - spec.p[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn calibration_rejects_unattainable_targets() {
        let ds = gaussian_ds(100, 2, 10);
        let spec = MechanismSpec::hmcar(vec![0.9, 0.001]).unwrap();
        // Mean target 0.9 forces the first column's p far above 1.
        assert!(spec.calibrate_mean_missingness(&ds, 0.9).is_err());
        // Target zero wipes every p.
        let zero = spec.calibrate_mean_missingness(&ds, 0.0).unwrap();
        assert!(zero.p.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn co_missingness_is_a_product_with_empty_set_one() {
        let spec = MechanismSpec::hmcar(vec![0.2, 0.5]).unwrap();
        assert_eq!(spec.co_missingness(&[], &[]), 1.0);
        assert!((spec.co_missingness(&[], &[0, 1]) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn intensity_normalization_and_affine_composition_are_exact() {
        let raw = Intensity::Logistic {
            weights: vec![1.2, -0.7],
            intercept: 0.4,
            shift: 0.0,
            scale: 1.0,
            sigma_mean: 0.5,
        };
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|i| {
                vec![
                    (i as f64 / 100.0) - 1.0,
                    ((i * 7) % 200) as f64 / 100.0 - 1.0,
                ]
            })
            .collect();
        let norm = raw
            .normalized_on(rows.iter().map(|r| r.as_slice()))
            .unwrap();
        let mean: f64 = rows.iter().map(|r| norm.eval(r)).sum::<f64>() / rows.len() as f64;
        assert!((mean - 1.0).abs() < 1e-12);
        // Composing with an affine map reproduces raw-space values exactly.
        let means = [0.3, -0.1];
        let scales = [1.7, 0.6];
        let composed = norm.compose_affine(&means, &scales);
        for r in rows.iter().take(20) {
            let std: Vec<f64> = r
                .iter()
                .zip(means.iter().zip(scales))
                .map(|(x, (m, s))| (x - m) / s)
                .collect();
            assert!((composed.eval(&std) - norm.eval(r)).abs() < 1e-12);
        }
    }

    #[test]
    fn perturbed_intensity_keeps_mean_one_and_shrinks_variation() {
        let raw = Intensity::Logistic {
            weights: vec![2.0],
            intercept: 0.0,
            shift: 0.0,
            scale: 1.0,
            sigma_mean: 0.5,
        };
        let rows: Vec<Vec<f64>> = (0..400).map(|i| vec![(i as f64 / 200.0) - 1.0]).collect();
        let norm = raw
            .normalized_on(rows.iter().map(|r| r.as_slice()))
            .unwrap();
        let pert = norm.perturbed(0.3).unwrap();
        let mean: f64 = rows.iter().map(|r| pert.eval(r)).sum::<f64>() / rows.len() as f64;
        assert!((mean - 1.0).abs() < 1e-10);
        let dev = |q: &Intensity| -> f64 {
            rows.iter()
                .map(|r| (q.eval(r) - 1.0).abs())
                .fold(0.0, f64::max)
        };
        assert!(dev(&pert) < dev(&norm));
        // Constant profiles are unaffected by q perturbations.
        assert_eq!(
            Intensity::Constant.perturbed(0.3).unwrap(),
            Intensity::Constant
        );
    }

    #[test]
    fn eager_validation_blocks_invalid_base_intensity() {
        let n = 50;
        let d = 2;
        let mut values = vec![0.0; n * d];
        values[0] = 50.0; // drives the logistic intensity to ~1 at row 0
        let ds = ObservedDataset::new(
            values,
            n,
            d,
            vec![0.0; n],
            Mask::zeros(n, d),
            vec![0],
            default_column_names(d),
        )
        .unwrap();
        let q = Intensity::Logistic {
            weights: vec![3.0],
            intercept: 0.0,
            shift: 0.0,
            scale: 2.0,
            sigma_mean: 0.5,
        };
        let spec =
            MechanismSpec::smar(vec![0.0, 0.6], vec![0], vec![Intensity::Constant, q]).unwrap();
        assert!(matches!(
            sample_mask(&spec, &ds, StreamKey::root(1).child(DOMAIN_MASK)),
            Err(Error::MechanismInfeasible { .. })
        ));
    }
}
