//! Stochastic gradient descent over per-sample strategies, with step-size
//! schedules, deterministic shuffling, calibration, and reference solves.

use nalgebra::DVector;

use crate::data::ObservedDataset;
use crate::error::{Error, Result};
use crate::estimators::{GradientEstimator, VisitCtx};
use crate::glm::{FamilyKind, GlmFamily, PopulationModel};
use crate::numerics::{minimize_gd, GdOptions};
use crate::rng::{permutation, StreamKey, DOMAIN_SHUFFLE};

/// Iterate-norm ceiling beyond which a run is declared divergent.
pub const DIVERGENCE_NORM: f64 = 1e8;

/// Step-size schedule indexed by the global step counter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepSchedule {
    Constant {
        eta: f64,
    },
    /// `eta_i = c / (i + gamma)`.
    InverseTime {
        c: f64,
        gamma: f64,
    },
}

impl StepSchedule {
    pub fn rate(&self, step: u64) -> f64 {
        match self {
            StepSchedule::Constant { eta } => *eta,
            StepSchedule::InverseTime { c, gamma } => c / (step as f64 + gamma),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SgdOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: StepSchedule,
    pub seed: u64,
}

impl Default for SgdOptions {
    fn default() -> Self {
        SgdOptions {
            epochs: 5,
            batch_size: 64,
            schedule: StepSchedule::InverseTime {
                c: 1e-2,
                gamma: 64.0,
            },
            seed: 0,
        }
    }
}

/// Optional per-epoch evaluation targets.
#[derive(Clone, Copy, Default)]
pub struct EpochEval<'a> {
    /// Parameter to measure squared distance against.
    pub target: Option<&'a DVector<f64>>,
    /// Held-out data for unpenalized loss.
    pub test: Option<&'a ObservedDataset>,
}

/// Trajectory of one training run.
#[derive(Clone, Debug)]
pub struct RunRecord {
    /// Iterate at the end of every epoch.
    pub epoch_iterates: Vec<DVector<f64>>,
    pub final_w: DVector<f64>,
    /// `|w - target|^2 / d` per epoch, when a target was supplied.
    pub pmse: Vec<f64>,
    /// Mean unpenalized test loss per epoch, when test data was supplied.
    pub test_loss: Vec<f64>,
    pub steps: u64,
}

/// Mean squared parameter error `|w - target|^2 / d`.
pub fn pmse(w: &DVector<f64>, target: &DVector<f64>) -> f64 {
    (w - target).norm_squared() / w.len() as f64
}

/// A conservative safe initial rate for the linear family,
/// `(min eig + ridge) / (6 (max eig + ridge)^2)` of the second-moment
/// curvature. Used only to warn, never to silently clamp.
pub fn linear_safe_rate(model: &PopulationModel, ridge: f64) -> f64 {
    let (lo, hi) = model.eigen_range();
    let alpha = lo + ridge;
    let beta = hi + ridge;
    alpha / (6.0 * beta * beta)
}

/// Run minibatch SGD with one full pass per epoch in a fresh deterministic
/// shuffle, a global step counter feeding the schedule, and divergence
/// detection.
pub fn run_sgd(
    family: &GlmFamily,
    ds: &ObservedDataset,
    estimator: &dyn GradientEstimator,
    w0: &DVector<f64>,
    opts: &SgdOptions,
    eval: &EpochEval,
) -> Result<RunRecord> {
    if opts.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if estimator.requires_ground_truth() && !ds.has_ground_truth() {
        return Err(Error::InvalidArgument(
            "strategy needs ground truth the dataset does not have".into(),
        ));
    }
    if family.kind == FamilyKind::Linear && ds.has_ground_truth() {
        if let Ok(model) = PopulationModel::from_dataset(ds) {
            let safe = linear_safe_rate(&model, family.ridge);
            let eta0 = opts.schedule.rate(0);
            if eta0 > safe {
                log::warn!(
                    "initial step size {eta0:.3e} exceeds the conservative \
                     stability bound {safe:.3e} for this design"
                );
            }
        }
    }
    let n = ds.n();
    let d = ds.d();
    let mut w = w0.clone();
    if w.len() != d {
        return Err(Error::Dimension(format!(
            "initial parameter has {} entries for width {d}",
            w.len()
        )));
    }
    let mut record = RunRecord {
        epoch_iterates: Vec::with_capacity(opts.epochs),
        final_w: w.clone(),
        pmse: Vec::new(),
        test_loss: Vec::new(),
        steps: 0,
    };
    let mut step: u64 = 0;
    let mut batch_grad = DVector::zeros(d);
    for epoch in 0..opts.epochs {
        let order = permutation(
            StreamKey::root(opts.seed)
                .child(DOMAIN_SHUFFLE)
                .child(epoch as u64),
            n,
        );
        let mut visited = 0usize;
        for batch in order.chunks(opts.batch_size) {
            batch_grad.iter_mut().for_each(|g| *g = 0.0);
            for &row in batch {
                let ctx = VisitCtx {
                    seed: opts.seed,
                    epoch: epoch as u64,
                    row: row as u64,
                };
                let g = estimator.gradient(family, ds, row, &w, &ctx)?;
                batch_grad += g;
                visited += 1;
            }
            batch_grad /= batch.len() as f64;
            let eta = opts.schedule.rate(step);
            w.axpy(-eta, &batch_grad, 1.0);
            step += 1;
            let norm = w.norm();
            if !norm.is_finite() || norm > DIVERGENCE_NORM {
                return Err(Error::Divergence {
                    step: step as usize,
                    detail: format!("iterate norm {norm:.3e} after epoch {epoch}"),
                });
            }
        }
        assert_eq!(visited, n, "every row must be visited exactly once");
        record.epoch_iterates.push(w.clone());
        if let Some(target) = eval.target {
            record.pmse.push(pmse(&w, target));
        }
        if let Some(test) = eval.test {
            record.test_loss.push(family.mean_plain_loss(&w, test)?);
        }
    }
    record.final_w = w;
    record.steps = step;
    Ok(record)
}

/// Penalized empirical-risk minimizer on the (ground-truth) dataset,
/// solved by deterministic gradient descent to tight tolerance.
pub fn reference_parameter(family: &GlmFamily, ds: &ObservedDataset) -> Result<DVector<f64>> {
    if !ds.has_ground_truth() {
        return Err(Error::InvalidArgument(
            "reference solve needs ground-truth values".into(),
        ));
    }
    let d = ds.d();
    let opts = GdOptions {
        tol: 1e-9,
        ..GdOptions::default()
    };
    let fg = |w: &DVector<f64>| {
        let loss = family.empirical_risk(w, ds).expect("validated dataset");
        let grad = family
            .empirical_risk_gradient(w, ds)
            .expect("validated dataset");
        (loss, grad)
    };
    let (w, _, _) = minimize_gd(fg, &DVector::zeros(d), &opts)?;
    Ok(w)
}

/// Pick the inverse-time constant `c` from a grid by final squared
/// parameter distance after complete-data training; deterministic given
/// the seed, ties resolved toward the smaller constant.
pub fn calibrate_learning_rate(
    family: &GlmFamily,
    ds: &ObservedDataset,
    estimator: &dyn GradientEstimator,
    target: &DVector<f64>,
    base: &SgdOptions,
    grid: &[f64],
) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::Calibration("empty learning-rate grid".into()));
    }
    let gamma = match base.schedule {
        StepSchedule::InverseTime { gamma, .. } => gamma,
        StepSchedule::Constant { .. } => {
            return Err(Error::Calibration(
                "calibration only applies to the inverse-time schedule".into(),
            ))
        }
    };
    let mut best: Option<(f64, f64)> = None;
    let w0 = DVector::zeros(ds.d());
    let mut sorted = grid.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite grid"));
    for &c in &sorted {
        let opts = SgdOptions {
            schedule: StepSchedule::InverseTime { c, gamma },
            ..base.clone()
        };
        let run = run_sgd(family, ds, estimator, &w0, &opts, &EpochEval::default());
        let score = match run {
            Ok(rec) => pmse(&rec.final_w, target),
            Err(Error::Divergence { .. }) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        let better = match best {
            None => true,
            Some((_, s)) => score < s,
        };
        if better {
            best = Some((c, score));
        }
    }
    let (c, score) = best.expect("nonempty grid");
    if !score.is_finite() {
        return Err(Error::Calibration(
            "every learning rate in the grid diverged".into(),
        ));
    }
    Ok(c)
}
