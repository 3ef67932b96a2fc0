//! Synthetic benchmark datasets with known generating parameters.

use nalgebra::{DMatrix, DVector};

use crate::data::ObservedDataset;
use crate::error::{Error, Result};
use crate::glm::{FamilyKind, POISSON_CLIP};
use crate::numerics::sigmoid;
use crate::rng::{StreamKey, DOMAIN_DATA};

/// Covariate covariance structure.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CovarianceKind {
    /// Independent standard normal columns.
    Identity,
    /// First-order autoregressive correlation `rho^|j - k|`.
    Ar { rho: f64 },
}

/// Recipe for one synthetic benchmark.
#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub name: String,
    pub family: FamilyKind,
    pub d: usize,
    pub covariance: CovarianceKind,
    /// Residual standard deviation (linear family only).
    pub noise_sd: f64,
    /// Euclidean norm of the generating parameter.
    pub signal_scale: f64,
}

/// Names accepted by [`SyntheticSpec::preset`].
pub const PRESET_NAMES: [&str; 5] = [
    "synth_a_linear",
    "synth_b_linear",
    "synth_a_logistic",
    "synth_a_poisson",
    "synth_b_poisson",
];

impl SyntheticSpec {
    /// Built-in benchmark recipes. The Poisson signal scale `sqrt(2 ln 2)`
    /// puts the marginal mean count at 2 under independent covariates.
    pub fn preset(name: &str) -> Result<Self> {
        let poisson_scale = (2.0 * 2.0_f64.ln()).sqrt();
        let spec = match name {
            "synth_a_linear" => SyntheticSpec {
                name: name.into(),
                family: FamilyKind::Linear,
                d: 10,
                covariance: CovarianceKind::Identity,
                noise_sd: 0.5,
                signal_scale: 1.0,
            },
            "synth_b_linear" => SyntheticSpec {
                name: name.into(),
                family: FamilyKind::Linear,
                d: 15,
                covariance: CovarianceKind::Ar { rho: 0.9 },
                noise_sd: 0.5,
                signal_scale: 1.0,
            },
            "synth_a_logistic" => SyntheticSpec {
                name: name.into(),
                family: FamilyKind::Logistic,
                d: 10,
                covariance: CovarianceKind::Identity,
                noise_sd: 0.0,
                signal_scale: 1.0,
            },
            "synth_a_poisson" => SyntheticSpec {
                name: name.into(),
                family: FamilyKind::Poisson,
                d: 10,
                covariance: CovarianceKind::Identity,
                noise_sd: 0.0,
                signal_scale: poisson_scale,
            },
            "synth_b_poisson" => SyntheticSpec {
                name: name.into(),
                family: FamilyKind::Poisson,
                d: 8,
                covariance: CovarianceKind::Ar { rho: 0.9 },
                noise_sd: 0.0,
                signal_scale: poisson_scale,
            },
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown synthetic preset '{other}' (available: {})",
                    PRESET_NAMES.join(", ")
                )))
            }
        };
        Ok(spec)
    }

    fn cholesky_factor(&self) -> Result<DMatrix<f64>> {
        match self.covariance {
            CovarianceKind::Identity => Ok(DMatrix::identity(self.d, self.d)),
            CovarianceKind::Ar { rho } => {
                if !(-1.0..1.0).contains(&rho) {
                    return Err(Error::InvalidConfig(format!(
                        "autoregressive correlation must lie in (-1, 1), got {rho}"
                    )));
                }
                let sigma =
                    DMatrix::from_fn(self.d, self.d, |j, k| rho.powi((j as i32 - k as i32).abs()));
                sigma
                    .cholesky()
                    .map(|c| c.l())
                    .ok_or_else(|| Error::Singular("covariance is not positive definite".into()))
            }
        }
    }

    /// Draw the generating parameter: a Gaussian direction scaled to
    /// `signal_scale`.
    pub fn draw_parameter(&self, seed: u64) -> DVector<f64> {
        let mut rng = StreamKey::root(seed).child(DOMAIN_DATA).child(0).stream();
        let mut z = DVector::from_fn(self.d, |_, _| rng.normal());
        let norm = z.norm();
        if norm > 0.0 {
            z *= self.signal_scale / norm;
        }
        z
    }

    /// Generate `n` rows and responses; returns the fully observed dataset
    /// together with the generating parameter.
    pub fn generate(&self, n: usize, seed: u64) -> Result<(ObservedDataset, DVector<f64>)> {
        if n == 0 || self.d == 0 {
            return Err(Error::InvalidArgument(
                "need at least one row and one column".into(),
            ));
        }
        let w_star = self.draw_parameter(seed);
        let l = self.cholesky_factor()?;
        let key = StreamKey::root(seed).child(DOMAIN_DATA);
        let mut x_rng = key.child(1).stream();
        let mut y_rng = key.child(2).stream();
        let mut values = Vec::with_capacity(n * self.d);
        let mut ys = Vec::with_capacity(n);
        let mut z = DVector::zeros(self.d);
        for _ in 0..n {
            for item in z.iter_mut() {
                *item = x_rng.normal();
            }
            let x = &l * &z;
            let eta: f64 = w_star.dot(&x);
            let y = match self.family {
                FamilyKind::Linear => eta + self.noise_sd * y_rng.normal(),
                FamilyKind::Logistic => {
                    if y_rng.bernoulli(sigmoid(eta)) {
                        1.0
                    } else {
                        -1.0
                    }
                }
                FamilyKind::Poisson => {
                    let mean = eta.clamp(-POISSON_CLIP, POISSON_CLIP).exp();
                    sample_poisson(mean, &mut y_rng)
                }
            };
            values.extend(x.iter().copied());
            ys.push(y);
        }
        let ds = ObservedDataset::complete(values, n, self.d, ys)?;
        Ok((ds, w_star))
    }
}

fn sample_poisson(mean: f64, rng: &mut crate::rng::DetRng) -> f64 {
    use rand_distr::{Distribution, Poisson};
    let dist = Poisson::new(mean.max(1e-12)).expect("positive mean");
    dist.sample(rng)
}
