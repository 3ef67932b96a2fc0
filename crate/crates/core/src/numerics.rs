//! Shared numerical helpers: stable link functions, least-squares polynomial
//! fits, slope estimation, and a deterministic backtracking gradient descent
//! used wherever a full-batch minimizer is required.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^z)`.
#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample standard deviation.
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Least-squares fit of `y ~ sum_k c_k t^k`; returns coefficients in
/// ascending degree order.
pub fn polyfit(ts: &[f64], ys: &[f64], degree: usize) -> Result<Vec<f64>> {
    if ts.len() != ys.len() || ts.len() <= degree {
        return Err(Error::InvalidArgument(format!(
            "polyfit needs more than {} points, got {}",
            degree,
            ts.len()
        )));
    }
    let n = ts.len();
    let a = DMatrix::from_fn(n, degree + 1, |i, j| ts[i].powi(j as i32));
    let b = DVector::from_column_slice(ys);
    let svd = a.svd(true, true);
    let c = svd
        .solve(&b, 1e-13)
        .map_err(|e| Error::Singular(e.to_string()))?;
    Ok(c.iter().copied().collect())
}

/// OLS slope of `ln y` against `ln t`. Points with non-positive `y` are
/// dropped; at least two must survive.
pub fn loglog_slope(ts: &[f64], ys: &[f64]) -> Result<f64> {
    let pts: Vec<(f64, f64)> = ts
        .iter()
        .zip(ys)
        .filter(|(_, &y)| y > 0.0)
        .map(|(&t, &y)| (t.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return Err(Error::InvalidArgument(
            "log-log slope needs at least two positive points".into(),
        ));
    }
    let mx = mean(&pts.iter().map(|p| p.0).collect::<Vec<_>>());
    let my = mean(&pts.iter().map(|p| p.1).collect::<Vec<_>>());
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Ok(sxy / sxx)
}

pub struct GdOptions {
    /// Stop once the gradient norm falls below this.
    pub tol: f64,
    pub max_iters: usize,
    pub initial_step: f64,
}

impl Default for GdOptions {
    fn default() -> Self {
        GdOptions {
            tol: 1e-9,
            max_iters: 200_000,
            initial_step: 1.0,
        }
    }
}

/// Deterministic full-batch gradient descent with Armijo backtracking.
/// Returns the minimizer, the final gradient norm, and the iteration count.
pub fn minimize_gd<F>(
    mut fg: F,
    w0: &DVector<f64>,
    opts: &GdOptions,
) -> Result<(DVector<f64>, f64, usize)>
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    const C1: f64 = 1e-4;
    let mut w = w0.clone();
    let mut step = opts.initial_step;
    for iter in 0..opts.max_iters {
        let (f, g) = fg(&w);
        let gnorm = g.norm();
        if !gnorm.is_finite() {
            return Err(Error::Divergence {
                step: iter,
                detail: "non-finite gradient".into(),
            });
        }
        if gnorm <= opts.tol {
            return Ok((w, gnorm, iter));
        }
        // Warm-start the line search from slightly above the last accepted step.
        step = (step * 2.0).min(opts.initial_step.max(1.0));
        let gsq = gnorm * gnorm;
        loop {
            let cand = &w - step * &g;
            let (fc, gc) = fg(&cand);
            let margin = C1 * step * gsq;
            // Near the minimum the sufficient-decrease margin drops below the
            // resolution of the objective in double precision and the Armijo
            // test turns into rounding noise. The analytic gradient stays
            // accurate to relative rounding error, so switch the acceptance
            // to strict gradient-norm descent in that regime.
            let accepted = if margin > 8.0 * f64::EPSILON * (f.abs() + fc.abs()) {
                fc <= f - margin
            } else {
                gc.norm() < gnorm
            };
            if accepted {
                w = cand;
                break;
            }
            step *= 0.5;
            if step < 1e-18 {
                return Err(Error::NoConvergence {
                    grad_norm: gnorm,
                    iters: iter,
                });
            }
        }
    }
    let (_, g) = fg(&w);
    Err(Error::NoConvergence {
        grad_norm: g.norm(),
        iters: opts.max_iters,
    })
}

/// Central-difference gradient; test oracle for analytic gradients.
pub fn central_diff_gradient<F>(f: F, w: &DVector<f64>, h: f64) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let mut g = DVector::zeros(w.len());
    for j in 0..w.len() {
        let mut wp = w.clone();
        let mut wm = w.clone();
        wp[j] += h;
        wm[j] -= h;
        g[j] = (f(&wp) - f(&wm)) / (2.0 * h);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_and_softplus_are_stable_at_extremes() {
        assert!((sigmoid(800.0) - 1.0).abs() < 1e-15);
        assert!(sigmoid(-700.0) > 0.0);
        assert!(sigmoid(-700.0) < 1e-300);
        assert_eq!(sigmoid(-800.0), 0.0); // graceful underflow, no NaN
        assert!((softplus(1000.0) - 1000.0).abs() < 1e-9);
        assert!(softplus(-700.0) > 0.0);
        assert!(softplus(-700.0) < 1e-300);
        assert!((sigmoid(0.3) + sigmoid(-0.3) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn polyfit_recovers_exact_polynomial() {
        let ts = [0.2, 0.4, 0.6, 0.8, 1.0, 1.3];
        let ys: Vec<f64> = ts
            .iter()
            .map(|t| 0.5 - 1.25 * t + 2.0 * t * t * t)
            .collect();
        let c = polyfit(&ts, &ys, 3).unwrap();
        for (got, want) in c.iter().zip([0.5, -1.25, 0.0, 2.0]) {
            assert!((got - want).abs() < 1e-10, "{c:?}");
        }
    }

    #[test]
    fn loglog_slope_of_pure_power_is_exact() {
        let ts: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];
        let ys: Vec<f64> = ts.iter().map(|&t| 3.0 * t.powf(2.5)).collect();
        assert!((loglog_slope(&ts, &ys).unwrap() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn gd_minimizes_quadratic_to_closed_form() {
        // f(w) = 1/2 w'Aw - b'w with A = [[2, 0.3], [0.3, 1]], b = (1, -2).
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let b = DVector::from_column_slice(&[1.0, -2.0]);
        let (w, gnorm, _) = minimize_gd(
            |w| {
                let aw = &a * w;
                (0.5 * w.dot(&aw) - b.dot(w), aw - &b)
            },
            &DVector::zeros(2),
            &GdOptions::default(),
        )
        .unwrap();
        let exact = a.clone().lu().solve(&b).unwrap();
        assert!(gnorm <= 1e-9);
        assert!((w - exact).norm() < 1e-8);
    }

    #[test]
    fn gd_is_idempotent_at_the_optimum() {
        let (w1, _, _) = minimize_gd(
            |w| {
                (
                    (w[0] - 3.0).powi(2),
                    DVector::from_column_slice(&[2.0 * (w[0] - 3.0)]),
                )
            },
            &DVector::zeros(1),
            &GdOptions::default(),
        )
        .unwrap();
        let (w2, _, iters) = minimize_gd(
            |w| {
                (
                    (w[0] - 3.0).powi(2),
                    DVector::from_column_slice(&[2.0 * (w[0] - 3.0)]),
                )
            },
            &w1,
            &GdOptions::default(),
        )
        .unwrap();
        assert_eq!(iters, 0);
        assert_eq!(w1, w2);
    }

    #[test]
    fn central_diff_matches_analytic_gradient() {
        let f = |w: &DVector<f64>| (w[0] * w[1]).sin() + w[0] * w[0];
        let w = DVector::from_column_slice(&[0.7, -0.4]);
        let g = central_diff_gradient(f, &w, 1e-6);
        let gx = (w[0] * w[1]).cos() * w[1] + 2.0 * w[0];
        let gy = (w[0] * w[1]).cos() * w[0];
        assert!((g[0] - gx).abs() < 1e-8);
        assert!((g[1] - gy).abs() < 1e-8);
    }
}
