//! GLM losses and per-sample gradients for linear, logistic, and Poisson
//! regression, the empirical second-moment model used by the closed-form
//! linear-regression bias, and that closed form itself.
//!
//! Conventions: logistic labels live in {-1, +1}; Poisson responses are
//! nonnegative counts; every family carries an L2 penalty `ridge` applied to
//! the full parameter vector. The penalty has no covariate factor, so it
//! cancels in every imputation-bias difference.

use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::data::ObservedDataset;
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, softplus};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FamilyKind {
    Linear,
    Logistic,
    Poisson,
}

impl FromStr for FamilyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(FamilyKind::Linear),
            "logistic" => Ok(FamilyKind::Logistic),
            "poisson" => Ok(FamilyKind::Poisson),
            other => Err(Error::InvalidConfig(format!(
                "unknown family '{other}' (expected linear|logistic|poisson)"
            ))),
        }
    }
}

impl std::fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FamilyKind::Linear => "linear",
            FamilyKind::Logistic => "logistic",
            FamilyKind::Poisson => "poisson",
        })
    }
}

/// Exponent bound for the Poisson mean; linear predictors beyond it are
/// clamped and counted.
pub const POISSON_CLIP: f64 = 30.0;

#[derive(Clone, Debug)]
pub struct GlmFamily {
    pub kind: FamilyKind,
    pub ridge: f64,
    clip_events: Arc<AtomicU64>,
}

impl GlmFamily {
    pub fn new(kind: FamilyKind, ridge: f64) -> Result<Self> {
        if !(ridge >= 0.0 && ridge.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "ridge must be >= 0, got {ridge}"
            )));
        }
        Ok(GlmFamily {
            kind,
            ridge,
            clip_events: Arc::new(AtomicU64::new(0)),
        })
    }

    /// Times a Poisson linear predictor hit the clip bound.
    pub fn poisson_clip_events(&self) -> u64 {
        self.clip_events.load(Ordering::Relaxed)
    }

    fn clipped_eta(&self, eta: f64) -> f64 {
        if eta.abs() > POISSON_CLIP {
            self.clip_events.fetch_add(1, Ordering::Relaxed);
            eta.clamp(-POISSON_CLIP, POISSON_CLIP)
        } else {
            eta
        }
    }

    pub fn validate_response(&self, y: f64) -> Result<()> {
        let ok = match self.kind {
            FamilyKind::Linear => y.is_finite(),
            FamilyKind::Logistic => y == 1.0 || y == -1.0,
            FamilyKind::Poisson => y.is_finite() && y >= 0.0 && y.fract() == 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "response {y} invalid for {} family",
                self.kind
            )))
        }
    }

    pub fn validate_responses(&self, ds: &ObservedDataset) -> Result<()> {
        for (i, &y) in ds.responses().iter().enumerate() {
            self.validate_response(y).map_err(|_| {
                Error::InvalidArgument(format!(
                    "response {y} at row {} invalid for {} family",
                    i + 1,
                    self.kind
                ))
            })?;
        }
        Ok(())
    }

    fn plain_loss(&self, eta: f64, y: f64) -> f64 {
        match self.kind {
            FamilyKind::Linear => 0.5 * (eta - y) * (eta - y),
            FamilyKind::Logistic => softplus(-y * eta),
            FamilyKind::Poisson => {
                let e = self.clipped_eta(eta);
                e.exp() - y * e
            }
        }
    }

    /// dl/d(eta); multiply by x to get the covariate part of the gradient.
    fn link_gradient(&self, eta: f64, y: f64) -> f64 {
        match self.kind {
            FamilyKind::Linear => eta - y,
            FamilyKind::Logistic => -y * sigmoid(-y * eta),
            FamilyKind::Poisson => self.clipped_eta(eta).exp() - y,
        }
    }

    pub fn loss(&self, w: &DVector<f64>, x: &[f64], y: f64) -> f64 {
        let eta = dot(w, x);
        self.plain_loss(eta, y) + 0.5 * self.ridge * w.norm_squared()
    }

    /// Per-sample gradient of [`loss`](Self::loss).
    pub fn gradient(&self, w: &DVector<f64>, x: &[f64], y: f64) -> DVector<f64> {
        let eta = dot(w, x);
        let s = self.link_gradient(eta, y);
        let mut g = DVector::from_fn(w.len(), |j, _| s * x[j]);
        if self.ridge != 0.0 {
            g.axpy(self.ridge, w, 1.0);
        }
        g
    }

    /// Ridge-penalized mean loss over the true (oracle) rows.
    pub fn empirical_risk(&self, w: &DVector<f64>, ds: &ObservedDataset) -> Result<f64> {
        let mut acc = 0.0;
        for i in 0..ds.n() {
            let x = oracle(ds, i)?;
            acc += self.plain_loss(dot(w, x), ds.y(i));
        }
        Ok(acc / ds.n() as f64 + 0.5 * self.ridge * w.norm_squared())
    }

    /// Gradient of [`empirical_risk`](Self::empirical_risk).
    pub fn empirical_risk_gradient(
        &self,
        w: &DVector<f64>,
        ds: &ObservedDataset,
    ) -> Result<DVector<f64>> {
        let mut g = DVector::zeros(w.len());
        for i in 0..ds.n() {
            let x = oracle(ds, i)?;
            let s = self.link_gradient(dot(w, x), ds.y(i));
            for j in 0..w.len() {
                g[j] += s * x[j];
            }
        }
        g /= ds.n() as f64;
        if self.ridge != 0.0 {
            g.axpy(self.ridge, w, 1.0);
        }
        Ok(g)
    }

    /// Unpenalized mean loss; the held-out test metric.
    pub fn mean_plain_loss(&self, w: &DVector<f64>, ds: &ObservedDataset) -> Result<f64> {
        let mut acc = 0.0;
        for i in 0..ds.n() {
            let x = oracle(ds, i)?;
            acc += self.plain_loss(dot(w, x), ds.y(i));
        }
        Ok(acc / ds.n() as f64)
    }
}

fn oracle(ds: &ObservedDataset, i: usize) -> Result<&[f64]> {
    ds.oracle_row(i).ok_or_else(|| {
        Error::InvalidArgument(
            "operation needs ground-truth values but the dataset has unknown entries".into(),
        )
    })
}

#[inline]
pub fn dot(w: &DVector<f64>, x: &[f64]) -> f64 {
    debug_assert_eq!(w.len(), x.len());
    w.iter().zip(x).map(|(a, b)| a * b).sum()
}

/// Empirical design moments `S = mean[x x^T]`, `b = mean[y x]` of a
/// ground-truth dataset. The unpenalized squared-loss risk gradient is
/// `S w - b`.
#[derive(Clone, Debug)]
pub struct PopulationModel {
    s: DMatrix<f64>,
    b: DVector<f64>,
}

impl PopulationModel {
    pub fn from_dataset(ds: &ObservedDataset) -> Result<Self> {
        let d = ds.d();
        let mut s = DMatrix::zeros(d, d);
        let mut b = DVector::zeros(d);
        for i in 0..ds.n() {
            let x = oracle(ds, i)?;
            let y = ds.y(i);
            for j in 0..d {
                b[j] += y * x[j];
                for k in 0..d {
                    s[(j, k)] += x[j] * x[k];
                }
            }
        }
        s /= ds.n() as f64;
        b /= ds.n() as f64;
        let min_eig = s.clone().symmetric_eigen().eigenvalues.min();
        if min_eig < -1e-8 {
            return Err(Error::InvalidArgument(format!(
                "second-moment matrix has eigenvalue {min_eig} below -1e-8"
            )));
        }
        Ok(PopulationModel { s, b })
    }

    pub fn second_moment(&self) -> &DMatrix<f64> {
        &self.s
    }

    pub fn cross_moment(&self) -> &DVector<f64> {
        &self.b
    }

    /// Unpenalized risk gradient `S w - b`.
    pub fn risk_gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.s * w - &self.b
    }

    /// (smallest, largest) eigenvalue of `S`; curvature bounds for step-size
    /// safety checks.
    pub fn eigen_range(&self) -> (f64, f64) {
        let ev = self.s.clone().symmetric_eigen().eigenvalues;
        (ev.min(), ev.max())
    }

    /// Ridge minimizer `(S + ridge I)^-1 b`.
    pub fn ridge_minimizer(&self, ridge: f64) -> Result<DVector<f64>> {
        let d = self.s.nrows();
        let a = &self.s + DMatrix::identity(d, d) * ridge;
        a.cholesky()
            .map(|c| c.solve(&self.b))
            .ok_or_else(|| Error::Singular("S + ridge I is not positive definite".into()))
    }
}

/// Population-level bias of the zero-imputed squared-loss gradient under
/// independent per-column missingness with probabilities `p`:
/// `B_j = -p_j (Sw - b)_j - (1 - p_j) sum_{k != j} p_k S_jk w_k`.
pub fn linear_population_bias(
    model: &PopulationModel,
    w: &DVector<f64>,
    p: &[f64],
) -> DVector<f64> {
    let grad = model.risk_gradient(w);
    let s = model.second_moment();
    let d = w.len();
    DVector::from_fn(d, |j, _| {
        let cross: f64 = (0..d)
            .filter(|&k| k != j)
            .map(|k| p[k] * s[(j, k)] * w[k])
            .sum();
        -p[j] * grad[j] - (1.0 - p[j]) * cross
    })
}

/// Quadratic part of [`linear_population_bias`]:
/// `Q_j = p_j sum_{k != j} p_k S_jk w_k`. The residual bias of the
/// first-order extrapolated gradient with factor `C` is exactly `-C * Q`.
pub fn linear_quadratic_bias_term(
    model: &PopulationModel,
    w: &DVector<f64>,
    p: &[f64],
) -> DVector<f64> {
    let s = model.second_moment();
    let d = w.len();
    DVector::from_fn(d, |j, _| {
        p[j] * (0..d)
            .filter(|&k| k != j)
            .map(|k| p[k] * s[(j, k)] * w[k])
            .sum::<f64>()
    })
}

/// Mask-expectation of the zero-imputed squared-loss gradient bias for a
/// single sample, conditional on `(x, y)`:
/// `-p_j x_j^2 w_j - sum_{k != j} (p_j + p_k - p_j p_k) x_j x_k w_k + p_j y x_j`.
pub fn sample_conditional_bias_linear(
    x: &[f64],
    y: f64,
    w: &DVector<f64>,
    p: &[f64],
) -> DVector<f64> {
    let d = w.len();
    DVector::from_fn(d, |j, _| {
        let cross: f64 = (0..d)
            .filter(|&k| k != j)
            .map(|k| (p[j] + p[k] - p[j] * p[k]) * x[j] * x[k] * w[k])
            .sum();
        -p[j] * x[j] * x[j] * w[j] - cross + p[j] * y * x[j]
    })
}
