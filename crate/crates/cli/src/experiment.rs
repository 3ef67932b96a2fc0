//! End-to-end experiment pipelines behind the subcommands: paired-seed
//! training, bias sweeps, mechanism estimation, and the robustness grid.

use std::path::Path;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;

use richsgd::bias_oracle::{exact_bias_sweep, XiAveraging};
use richsgd::data::ObservedDataset;
use richsgd::estimators::{build_estimator, EstimatorBuild, MethodSpec};
use richsgd::glm::GlmFamily;
use richsgd::imputation::fit_imputer;
use richsgd::mech_estimation::{estimate_mechanism, perturb_mechanism, MechanismEstimate};
use richsgd::mechanisms::{sample_mask, MechanismKind, MechanismSpec};
use richsgd::numerics::{loglog_slope, mean, sample_sd};
use richsgd::preprocess::{standardize, TransformRecord};
use richsgd::richardson::{richardson_bias_sweep, IntensitySource, RichardsonConfig};
use richsgd::rng::{StreamKey, DOMAIN_MASK};
use richsgd::sgd::{
    calibrate_learning_rate, reference_parameter, run_sgd, EpochEval, SgdOptions, StepSchedule,
};
use richsgd::synth::SyntheticSpec;
use richsgd::verification::{run_all_checks, TheoremCheck};
use richsgd::{Error, Result};

use crate::config::{mechanism_lines, write_resolved, ExperimentConfig, SourceKind};
use crate::io::{
    save_dataset_csv, write_results_csv, write_robustness_csv, write_summary_csv, write_sweep_csv,
    ResultRow, RobustnessRow, SummaryRow, SweepRow,
};

/// Independent well-mixed seed for one replication index.
fn derived_seed(master: u64, index: usize) -> u64 {
    StreamKey::root(master)
        .child(index as u64)
        .stream()
        .next_u64()
}

fn synthetic_spec(cfg: &ExperimentConfig) -> Result<SyntheticSpec> {
    if cfg.data_name == "custom" {
        Ok(SyntheticSpec {
            name: "custom".into(),
            family: cfg.custom_family,
            d: cfg.custom_d,
            covariance: cfg.custom_covariance,
            noise_sd: cfg.custom_noise_sd,
            signal_scale: cfg.custom_signal_scale,
        })
    } else {
        SyntheticSpec::preset(&cfg.data_name)
    }
}

fn raw_mechanism(
    cfg: &ExperimentConfig,
    raw_train: &ObservedDataset,
    seed: u64,
) -> Result<MechanismSpec> {
    let key = StreamKey::root(seed).child(DOMAIN_MASK).child(1);
    match (cfg.mech_kind, &cfg.p_explicit) {
        (MechanismKind::Hmcar, Some(p)) => {
            if p.len() != raw_train.d() {
                return Err(Error::InvalidConfig(format!(
                    "mechanism.p has {} entries for width {}",
                    p.len(),
                    raw_train.d()
                )));
            }
            MechanismSpec::hmcar(p.clone())
        }
        (MechanismKind::Hmcar, None) => MechanismSpec::random_hmcar(raw_train.d(), cfg.p_mean, key),
        (MechanismKind::Smar, Some(_)) => Err(Error::InvalidConfig(
            "explicit mechanism.p is only supported with mechanism.kind = hmcar".into(),
        )),
        (MechanismKind::Smar, None) => MechanismSpec::random_smar(
            raw_train,
            cfg.observed.clone(),
            cfg.p_mean,
            cfg.q_scale,
            cfg.q_intercept,
            key,
        ),
    }
}

fn subset_rows(ds: &ObservedDataset, range: std::ops::Range<usize>) -> Result<ObservedDataset> {
    let d = ds.d();
    let mut values = Vec::with_capacity(range.len() * d);
    let mut ys = Vec::with_capacity(range.len());
    for i in range {
        values.extend_from_slice(ds.oracle_row(i).expect("synthetic data is complete"));
        ys.push(ds.responses()[i]);
    }
    let n = ys.len();
    ObservedDataset::complete(values, n, d, ys)
}

fn transform_complete(ds: &ObservedDataset, record: &TransformRecord) -> Result<ObservedDataset> {
    let d = ds.d();
    let mut values = Vec::with_capacity(ds.n() * d);
    let mut ys = Vec::with_capacity(ds.n());
    for i in 0..ds.n() {
        values.extend(record.apply_row(ds.oracle_row(i).expect("complete data")));
        let mut y = ds.responses()[i];
        if record.response_rescaled {
            y = (y - record.response_mean) / record.response_scale;
        }
        ys.push(y);
    }
    ObservedDataset::complete(values, ds.n(), d, ys)
}

fn complete_view(ds: &ObservedDataset) -> Result<ObservedDataset> {
    let d = ds.d();
    let mut values = Vec::with_capacity(ds.n() * d);
    for i in 0..ds.n() {
        values.extend_from_slice(ds.oracle_row(i).expect("ground truth required"));
    }
    ObservedDataset::complete(values, ds.n(), d, ds.responses().to_vec())
}

/// Everything one replication shares across methods: data, realized mask,
/// mechanism on the standardized scale, reference target, learning rate.
pub struct PreparedSeed {
    pub seed: u64,
    pub seed_index: usize,
    pub family: GlmFamily,
    pub train: ObservedDataset,
    pub complete_train: ObservedDataset,
    pub test: ObservedDataset,
    pub mechanism: MechanismSpec,
    pub assumed: Option<MechanismSpec>,
    pub target: DVector<f64>,
    pub lr_c: f64,
    pub gamma: f64,
    pub family_name: String,
    pub mech_name: String,
}

pub fn prepare_seed(cfg: &ExperimentConfig, seed_index: usize) -> Result<PreparedSeed> {
    let spec = synthetic_spec(cfg)?;
    let seed = derived_seed(cfg.seed, seed_index);
    let total = cfg.n_train + cfg.n_test;
    let (raw_all, _) = spec.generate(total, seed)?;
    let raw_train = subset_rows(&raw_all, 0..cfg.n_train)?;
    let raw_test = subset_rows(&raw_all, cfg.n_train..total)?;

    let mech_raw = raw_mechanism(cfg, &raw_train, seed)?;
    let mask = sample_mask(
        &mech_raw,
        &raw_train,
        StreamKey::root(seed).child(DOMAIN_MASK).child(0),
    )?;
    let masked = raw_train.with_mask(mask)?;
    let (train, record) = standardize(&masked, spec.family)?;
    let mechanism = mech_raw.compose_affine(&record.means, &record.scales);
    let test = transform_complete(&raw_test, &record)?;
    let complete_train = complete_view(&train)?;
    let family = GlmFamily::new(spec.family, cfg.ridge)?;
    let target = reference_parameter(&family, &train)?;

    let assumed = match cfg.mech_source {
        SourceKind::True => None,
        SourceKind::Estimated => {
            Some(estimate_mechanism(&train, cfg.mech_kind, &cfg.observed)?.spec)
        }
    };

    let steps_per_epoch = cfg.n_train.div_ceil(cfg.batch_size);
    let gamma = cfg.gamma.unwrap_or(steps_per_epoch as f64);
    // Configured rates are initial step sizes; the inverse-time constant is
    // `rate * gamma` so that `rate(0)` matches the configured value.
    let lr_c = match cfg.learning_rate {
        Some(eta0) => eta0 * gamma,
        None => {
            let base = SgdOptions {
                epochs: cfg.epochs,
                batch_size: cfg.batch_size,
                schedule: StepSchedule::InverseTime { c: 0.0, gamma },
                seed,
            };
            let complete_est = build_estimator(
                &MethodSpec::Complete,
                &EstimatorBuild::new(&complete_train, &mechanism),
            )?;
            let grid_abs: Vec<f64> = cfg.lr_grid.iter().map(|g| g * gamma).collect();
            calibrate_learning_rate(
                &family,
                &complete_train,
                &*complete_est,
                &target,
                &base,
                &grid_abs,
            )?
        }
    };

    Ok(PreparedSeed {
        seed,
        seed_index,
        family,
        train,
        complete_train,
        test,
        mechanism,
        assumed,
        target,
        lr_c,
        gamma,
        family_name: spec.family.to_string(),
        mech_name: cfg.mech_kind.to_string(),
    })
}

/// Trajectory of one method under one replication.
#[derive(Clone, Debug)]
pub struct MethodOutcome {
    pub seed_index: usize,
    pub method: MethodSpec,
    /// `ok` or `diverged`.
    pub status: String,
    pub pmse: Vec<f64>,
    pub test_loss: Vec<f64>,
    pub wall_ms: u64,
}

impl MethodOutcome {
    pub fn final_pmse(&self) -> f64 {
        self.pmse.last().copied().unwrap_or(f64::INFINITY)
    }
}

/// Run one method on a prepared replication. An override for the assumed
/// mechanism lets the robustness grid inject perturbed intensities.
pub fn run_method(
    cfg: &ExperimentConfig,
    prep: &PreparedSeed,
    method: &MethodSpec,
    assumed_override: Option<&MechanismSpec>,
) -> Result<MethodOutcome> {
    let build = EstimatorBuild {
        ds: &prep.train,
        mechanism: &prep.mechanism,
        assumed: assumed_override.or(prep.assumed.as_ref()),
        imputer_params: cfg.imputer_params.clone(),
        ladder_ratio: cfg.ladder_ratio,
        linked: cfg.linked,
    };
    let est = build_estimator(method, &build)?;
    let opts = SgdOptions {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        schedule: StepSchedule::InverseTime {
            c: prep.lr_c,
            gamma: prep.gamma,
        },
        seed: prep.seed,
    };
    let eval = EpochEval {
        target: Some(&prep.target),
        test: Some(&prep.test),
    };
    let start = Instant::now();
    let run = run_sgd(
        &prep.family,
        &prep.train,
        &*est,
        &DVector::zeros(prep.train.d()),
        &opts,
        &eval,
    );
    let wall_ms = if cfg.timing {
        start.elapsed().as_millis() as u64
    } else {
        0
    };
    match run {
        Ok(rec) => Ok(MethodOutcome {
            seed_index: prep.seed_index,
            method: method.clone(),
            status: "ok".into(),
            pmse: rec.pmse,
            test_loss: rec.test_loss,
            wall_ms,
        }),
        Err(Error::Divergence { .. }) => Ok(MethodOutcome {
            seed_index: prep.seed_index,
            method: method.clone(),
            status: "diverged".into(),
            pmse: Vec::new(),
            test_loss: Vec::new(),
            wall_ms,
        }),
        Err(e) => Err(e),
    }
}

/// Paired replications: every method under a replication shares the data,
/// the realized mask, the shuffles, and the learning rate.
pub fn run_training(cfg: &ExperimentConfig) -> Result<Vec<MethodOutcome>> {
    let per_seed: Vec<Result<Vec<MethodOutcome>>> = (0..cfg.seeds)
        .into_par_iter()
        .map(|idx| {
            let prep = prepare_seed(cfg, idx)?;
            cfg.methods
                .iter()
                .map(|m| run_method(cfg, &prep, m, None))
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    for seed_outcomes in per_seed {
        out.extend(seed_outcomes?);
    }
    Ok(out)
}

fn method_imputer_name(method: &MethodSpec) -> String {
    match method {
        MethodSpec::Complete => "none".into(),
        MethodSpec::Imputed(k) => k.to_string(),
        MethodSpec::Richardson { imputer, .. } => imputer.to_string(),
    }
}

fn method_order(method: &MethodSpec) -> usize {
    match method {
        MethodSpec::Richardson { order, .. } => *order,
        _ => 0,
    }
}

pub fn outcomes_to_rows(cfg: &ExperimentConfig, outcomes: &[MethodOutcome]) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    for oc in outcomes {
        let method = oc.method.canonical();
        for (e, (&pmse, &test_loss)) in oc.pmse.iter().zip(&oc.test_loss).enumerate() {
            rows.push(ResultRow {
                run_id: format!(
                    "{}-{}-s{}-{}",
                    cfg.data_name, cfg.mech_kind, oc.seed_index, method
                ),
                seed: oc.seed_index as u64,
                family: family_name(cfg),
                dataset: cfg.data_name.clone(),
                mechanism: cfg.mech_kind.to_string(),
                imputer: method_imputer_name(&oc.method),
                method: method.clone(),
                order: method_order(&oc.method),
                epoch: e + 1,
                pmse,
                test_loss,
                wall_ms: oc.wall_ms,
            });
        }
    }
    rows
}

fn family_name(cfg: &ExperimentConfig) -> String {
    synthetic_spec(cfg)
        .map(|s| s.family.to_string())
        .unwrap_or_else(|_| "unknown".into())
}

pub fn summarize(cfg: &ExperimentConfig, outcomes: &[MethodOutcome]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for method in &cfg.methods {
        let finals: Vec<f64> = outcomes
            .iter()
            .filter(|o| &o.method == method && o.status == "ok")
            .map(|o| o.final_pmse())
            .collect();
        let losses: Vec<f64> = outcomes
            .iter()
            .filter(|o| &o.method == method && o.status == "ok")
            .map(|o| o.test_loss.last().copied().unwrap_or(f64::INFINITY))
            .collect();
        if finals.is_empty() {
            continue;
        }
        rows.push(SummaryRow {
            family: family_name(cfg),
            dataset: cfg.data_name.clone(),
            mechanism: cfg.mech_kind.to_string(),
            imputer: method_imputer_name(method),
            method: method.canonical(),
            order: method_order(method),
            seeds: finals.len(),
            mean_pmse: mean(&finals),
            sd_pmse: sample_sd(&finals),
            mean_test_loss: mean(&losses),
        });
    }
    rows
}

pub fn run_train_command(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)
        .map_err(|e| Error::InvalidArgument(format!("cannot create {}: {e}", out.display())))?;
    let outcomes = run_training(cfg)?;
    for oc in &outcomes {
        if oc.status != "ok" {
            log::warn!(
                "replication {} method {} ended with status {}",
                oc.seed_index,
                oc.method.canonical(),
                oc.status
            );
        }
    }
    write_results_csv(&out.join("results.csv"), &outcomes_to_rows(cfg, &outcomes))?;
    write_summary_csv(&out.join("summary.csv"), &summarize(cfg, &outcomes))?;
    write_resolved(cfg, &out.join("resolved.cfg"))?;
    Ok(())
}

pub fn run_generate(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)
        .map_err(|e| Error::InvalidArgument(format!("cannot create {}: {e}", out.display())))?;
    let spec = synthetic_spec(cfg)?;
    let seed = derived_seed(cfg.seed, 0);
    let total = cfg.n_train + cfg.n_test;
    let (raw_all, _) = spec.generate(total, seed)?;
    let raw_train = subset_rows(&raw_all, 0..cfg.n_train)?;
    let raw_test = subset_rows(&raw_all, cfg.n_train..total)?;
    let mech = raw_mechanism(cfg, &raw_train, seed)?;
    let mask = sample_mask(
        &mech,
        &raw_train,
        StreamKey::root(seed).child(DOMAIN_MASK).child(0),
    )?;
    let masked = raw_train.with_mask(mask)?;
    save_dataset_csv(&out.join("train.csv"), &masked, true)?;
    save_dataset_csv(&out.join("train_complete.csv"), &masked, false)?;
    save_dataset_csv(&out.join("test.csv"), &raw_test, false)?;
    let mut mech_text = mechanism_lines(&mech).join("\n");
    mech_text.push('\n');
    std::fs::write(out.join("mechanism.txt"), mech_text)
        .map_err(|e| Error::InvalidArgument(format!("cannot write mechanism.txt: {e}")))?;
    write_resolved(cfg, &out.join("resolved.cfg"))?;
    Ok(())
}

/// Exact bias of each configured method across the masking scales; the
/// fitted log-log slope per method is returned alongside the rows.
pub fn run_bias_sweep(cfg: &ExperimentConfig) -> Result<(Vec<SweepRow>, Vec<(String, f64)>)> {
    let spec = synthetic_spec(cfg)?;
    let seed = derived_seed(cfg.seed, 0);
    let (raw, _) = spec.generate(cfg.n_train, seed)?;
    let (ds, record) = standardize(&raw, spec.family)?;
    let mech_raw = raw_mechanism(cfg, &raw, seed)?;
    let mechanism = mech_raw.compose_affine(&record.means, &record.scales);
    let family = GlmFamily::new(spec.family, cfg.ridge)?;
    let w = reference_parameter(&family, &ds)?;

    let assumed = match cfg.mech_source {
        SourceKind::True => None,
        SourceKind::Estimated => {
            let mask = sample_mask(
                &mechanism,
                &ds,
                StreamKey::root(seed).child(DOMAIN_MASK).child(0),
            )?;
            let masked = ds.with_mask(mask)?;
            Some(estimate_mechanism(&masked, cfg.mech_kind, &cfg.observed)?.spec)
        }
    };

    let lambda_max = mechanism.max_lambda(&ds);
    let mut rows = Vec::new();
    let mut slopes = Vec::new();
    for method in &cfg.methods {
        let (imputer_kind, order) = match method {
            MethodSpec::Complete => continue,
            MethodSpec::Imputed(k) => (*k, None),
            MethodSpec::Richardson { order, imputer } => (*imputer, Some(*order)),
        };
        let imputer = fit_imputer(imputer_kind, &ds, &cfg.imputer_params)?;
        let xi = if imputer.is_stochastic() {
            XiAveraging::new(seed, cfg.sweep_draws)
        } else {
            XiAveraging::deterministic()
        };
        let reports = match order {
            None => exact_bias_sweep(&family, &*imputer, &ds, &mechanism, &w, &cfg.sweep_ts, &xi)?,
            Some(k) => {
                let config = RichardsonConfig::geometric_feasible(k, cfg.ladder_ratio, lambda_max)?;
                let source = match &assumed {
                    None => IntensitySource::True,
                    Some(spec) => IntensitySource::Estimated(spec),
                };
                richardson_bias_sweep(
                    &family,
                    &*imputer,
                    &ds,
                    &mechanism,
                    &config,
                    source,
                    &w,
                    &cfg.sweep_ts,
                    &xi,
                )?
            }
        };
        let norms: Vec<f64> = reports.iter().map(|r| r.norm()).collect();
        for (t, report) in cfg.sweep_ts.iter().zip(&reports) {
            rows.push(SweepRow {
                dataset: cfg.data_name.clone(),
                family: spec.family.to_string(),
                mechanism: cfg.mech_kind.to_string(),
                method: method.canonical(),
                t: *t,
                bias_norm: report.norm(),
                xi_se: report
                    .xi_standard_error
                    .as_ref()
                    .map(|v| v.amax())
                    .unwrap_or(0.0),
            });
        }
        let slope = loglog_slope(&cfg.sweep_ts, &norms).unwrap_or(f64::NAN);
        slopes.push((method.canonical(), slope));
    }
    Ok((rows, slopes))
}

pub fn run_bias_sweep_command(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)
        .map_err(|e| Error::InvalidArgument(format!("cannot create {}: {e}", out.display())))?;
    let (rows, slopes) = run_bias_sweep(cfg)?;
    write_sweep_csv(&out.join("sweep.csv"), &rows)?;
    write_resolved(cfg, &out.join("resolved.cfg"))?;
    for (method, slope) in &slopes {
        println!("{method}: fitted bias slope {slope:.3}");
    }
    Ok(())
}

/// The misspecification grid: for each perturbation magnitude, train the
/// extrapolated methods with intensities that are deliberately wrong.
pub fn run_robustness(cfg: &ExperimentConfig) -> Result<Vec<RobustnessRow>> {
    let per_seed: Vec<Result<Vec<RobustnessRow>>> = (0..cfg.seeds)
        .into_par_iter()
        .map(|idx| {
            let prep = prepare_seed(cfg, idx)?;
            let mut rows = Vec::new();
            for &dp in &cfg.delta_p {
                for &dq in &cfg.delta_q {
                    // `None` marks a perturbation rejected as infeasible.
                    let perturbed: Option<MechanismSpec> = if dp == 0.0 && dq == 0.0 {
                        Some(prep.mechanism.clone())
                    } else {
                        match perturb_mechanism(&prep.mechanism, dp, dq, prep.seed) {
                            Ok(spec) => Some(spec),
                            Err(Error::MechanismInfeasible { .. }) => None,
                            Err(e) => return Err(e),
                        }
                    };
                    for method in &cfg.methods {
                        let uses_assumed = matches!(method, MethodSpec::Richardson { .. });
                        let (status, final_pmse) = match (&perturbed, uses_assumed) {
                            (None, true) => ("infeasible".to_string(), f64::INFINITY),
                            (Some(spec), true) => {
                                let oc = run_method(cfg, &prep, method, Some(spec))?;
                                let final_pmse = oc.final_pmse();
                                (oc.status, final_pmse)
                            }
                            (_, false) => {
                                let oc = run_method(cfg, &prep, method, None)?;
                                let final_pmse = oc.final_pmse();
                                (oc.status, final_pmse)
                            }
                        };
                        rows.push(RobustnessRow {
                            delta_p: dp,
                            delta_q: dq,
                            seed: idx as u64,
                            method: method.canonical(),
                            status,
                            final_pmse,
                        });
                    }
                }
            }
            Ok(rows)
        })
        .collect();
    let mut out = Vec::new();
    for rows in per_seed {
        out.extend(rows?);
    }
    Ok(out)
}

pub fn run_robustness_command(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)
        .map_err(|e| Error::InvalidArgument(format!("cannot create {}: {e}", out.display())))?;
    let rows = run_robustness(cfg)?;
    write_robustness_csv(&out.join("robustness.csv"), &rows)?;
    write_resolved(cfg, &out.join("resolved.cfg"))?;
    Ok(())
}

/// Fit the missingness mechanism from one masked replication and report
/// the recovered profile with per-column diagnostics.
pub fn run_estimate_mech(cfg: &ExperimentConfig) -> Result<(MechanismEstimate, MechanismSpec)> {
    let spec = synthetic_spec(cfg)?;
    let seed = derived_seed(cfg.seed, 0);
    let (raw, _) = spec.generate(cfg.n_train, seed)?;
    let mech = raw_mechanism(cfg, &raw, seed)?;
    let mask = sample_mask(
        &mech,
        &raw,
        StreamKey::root(seed).child(DOMAIN_MASK).child(0),
    )?;
    let masked = raw.with_mask(mask)?;
    let estimate = estimate_mechanism(&masked, cfg.mech_kind, &cfg.observed)?;
    Ok((estimate, mech))
}

pub fn run_estimate_mech_command(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)
        .map_err(|e| Error::InvalidArgument(format!("cannot create {}: {e}", out.display())))?;
    let (estimate, truth) = run_estimate_mech(cfg)?;
    let mut text = mechanism_lines(&estimate.spec).join("\n");
    text.push('\n');
    std::fs::write(out.join("mechanism.txt"), text)
        .map_err(|e| Error::InvalidArgument(format!("cannot write mechanism.txt: {e}")))?;
    let mut diag = Vec::new();
    for d in &estimate.diagnostics {
        diag.push(format!(
            "column {}: p_hat = {:.6}, degenerate = {}, q_converged = {}",
            d.column, d.p_hat, d.degenerate, d.q_converged
        ));
    }
    let max_dev = truth
        .p
        .iter()
        .zip(&estimate.spec.p)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    diag.push(format!("max marginal deviation from truth = {max_dev:.6}"));
    let mut diag_text = diag.join("\n");
    diag_text.push('\n');
    std::fs::write(out.join("diagnostics.txt"), &diag_text)
        .map_err(|e| Error::InvalidArgument(format!("cannot write diagnostics.txt: {e}")))?;
    write_resolved(cfg, &out.join("resolved.cfg"))?;
    println!("{diag_text}");
    Ok(())
}

/// Run the identity battery, write the verdicts, and return overall pass.
pub fn run_verify_command(out: Option<&Path>) -> Result<bool> {
    let checks: Vec<TheoremCheck> = run_all_checks()?;
    for check in &checks {
        println!("{}", check.summary_line());
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::InvalidArgument(format!("cannot create {}: {e}", dir.display())))?;
        let json = serde_json::to_string_pretty(&checks)
            .map_err(|e| Error::InvalidArgument(format!("cannot serialize verdicts: {e}")))?;
        std::fs::write(dir.join("verify.json"), json)
            .map_err(|e| Error::InvalidArgument(format!("cannot write verify.json: {e}")))?;
    }
    Ok(checks.iter().all(|c| c.pass))
}
