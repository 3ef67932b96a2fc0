//! Flat `key = value` experiment configuration with strict key checking
//! and a round-trippable resolved form.

use std::collections::BTreeSet;
use std::path::Path;

use richsgd::estimators::MethodSpec;
use richsgd::glm::FamilyKind;
use richsgd::imputation::ImputerParams;
use richsgd::mechanisms::{Intensity, MechanismKind, MechanismSpec};
use richsgd::synth::CovarianceKind;
use richsgd::{Error, Result};

/// Where the thinning step takes its intensities from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceKind {
    True,
    Estimated,
}

/// Fully-typed experiment settings, one flat namespace of dotted keys.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Preset name, or "custom" with the `data.*` shape keys filled in.
    pub data_name: String,
    pub n_train: usize,
    pub n_test: usize,
    pub custom_family: FamilyKind,
    pub custom_d: usize,
    pub custom_covariance: CovarianceKind,
    pub custom_noise_sd: f64,
    pub custom_signal_scale: f64,
    pub mech_kind: MechanismKind,
    pub p_mean: f64,
    /// Explicit per-column intensities; overrides `p_mean` calibration.
    pub p_explicit: Option<Vec<f64>>,
    pub observed: Vec<usize>,
    pub q_scale: f64,
    pub q_intercept: f64,
    pub mech_source: SourceKind,
    pub methods: Vec<MethodSpec>,
    pub imputer_params: ImputerParams,
    pub ladder_ratio: f64,
    pub linked: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub seeds: usize,
    pub ridge: f64,
    /// Fixed inverse-time constant; absent means calibrate per seed.
    pub learning_rate: Option<f64>,
    pub lr_grid: Vec<f64>,
    /// Inverse-time offset; absent means one epoch worth of steps.
    pub gamma: Option<f64>,
    pub sweep_ts: Vec<f64>,
    pub sweep_draws: usize,
    pub delta_p: Vec<f64>,
    pub delta_q: Vec<f64>,
    pub timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            data_name: "synth_a_linear".into(),
            n_train: 2000,
            n_test: 1000,
            custom_family: FamilyKind::Linear,
            custom_d: 4,
            custom_covariance: CovarianceKind::Identity,
            custom_noise_sd: 0.5,
            custom_signal_scale: 2.0,
            mech_kind: MechanismKind::Hmcar,
            p_mean: 0.2,
            p_explicit: None,
            observed: Vec::new(),
            q_scale: 1.0,
            q_intercept: 0.0,
            mech_source: SourceKind::True,
            methods: vec![
                MethodSpec::Complete,
                MethodSpec::parse("zero").unwrap(),
                MethodSpec::parse("rich-zero").unwrap(),
            ],
            imputer_params: ImputerParams::default(),
            ladder_ratio: 2.0,
            linked: true,
            epochs: 5,
            batch_size: 64,
            seeds: 20,
            ridge: 1e-3,
            learning_rate: None,
            lr_grid: vec![0.25e-2, 0.5e-2, 1e-2, 2e-2, 4e-2],
            gamma: None,
            sweep_ts: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            sweep_draws: 8,
            delta_p: vec![0.0, 0.05, 0.1, 0.15, 0.2, 0.3],
            delta_q: vec![0.0],
            timing: false,
        }
    }
}

fn bad(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::InvalidConfig(format!("line {line}: {msg}"))
}

fn parse_f64(line: usize, key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| bad(line, format!("{key}: expected a number, got '{v}'")))
}

fn parse_usize(line: usize, key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| {
        bad(
            line,
            format!("{key}: expected a nonnegative integer, got '{v}'"),
        )
    })
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(
            line,
            format!("{key}: expected true or false, got '{v}'"),
        )),
    }
}

fn parse_f64_list(line: usize, key: &str, v: &str) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| parse_f64(line, key, s.trim()))
        .collect()
}

fn parse_usize_list(line: usize, key: &str, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| parse_usize(line, key, s.trim()))
        .collect()
}

/// Parse configuration text. Every key must be known, and no key may
/// repeat; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut seen = BTreeSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| bad(line, format!("expected 'key = value', got '{content}'")))?;
        let key = key.trim();
        let value = value.trim();
        if !seen.insert(key.to_string()) {
            return Err(bad(line, format!("duplicate key '{key}'")));
        }
        match key {
            "seed" => {
                cfg.seed = value
                    .parse()
                    .map_err(|_| bad(line, format!("seed: expected an integer, got '{value}'")))?
            }
            "data.name" => cfg.data_name = value.to_string(),
            "data.n" => cfg.n_train = parse_usize(line, key, value)?,
            "data.n_test" => cfg.n_test = parse_usize(line, key, value)?,
            "data.family" => {
                cfg.custom_family = value
                    .parse()
                    .map_err(|e| bad(line, format!("data.family: {e}")))?
            }
            "data.d" => cfg.custom_d = parse_usize(line, key, value)?,
            "data.covariance" => {
                cfg.custom_covariance = if value == "identity" {
                    CovarianceKind::Identity
                } else if let Some(rho) = value.strip_prefix("ar:") {
                    CovarianceKind::Ar {
                        rho: parse_f64(line, key, rho)?,
                    }
                } else {
                    return Err(bad(
                        line,
                        format!("data.covariance: expected 'identity' or 'ar:RHO', got '{value}'"),
                    ));
                }
            }
            "data.noise_sd" => cfg.custom_noise_sd = parse_f64(line, key, value)?,
            "data.signal_scale" => cfg.custom_signal_scale = parse_f64(line, key, value)?,
            "mechanism.kind" => {
                cfg.mech_kind = match value {
                    "hmcar" => MechanismKind::Hmcar,
                    "smar" => MechanismKind::Smar,
                    _ => {
                        return Err(bad(
                            line,
                            format!("mechanism.kind: expected hmcar or smar, got '{value}'"),
                        ))
                    }
                }
            }
            "mechanism.p_mean" => cfg.p_mean = parse_f64(line, key, value)?,
            "mechanism.p" => {
                let p = parse_f64_list(line, key, value)?;
                cfg.p_explicit = if p.is_empty() { None } else { Some(p) };
            }
            "mechanism.observed" => cfg.observed = parse_usize_list(line, key, value)?,
            "mechanism.q_scale" => cfg.q_scale = parse_f64(line, key, value)?,
            "mechanism.q_intercept" => cfg.q_intercept = parse_f64(line, key, value)?,
            "mechanism.source" => {
                cfg.mech_source = match value {
                    "true" => SourceKind::True,
                    "estimated" => SourceKind::Estimated,
                    _ => {
                        return Err(bad(
                            line,
                            format!("mechanism.source: expected true or estimated, got '{value}'"),
                        ))
                    }
                }
            }
            "methods" => {
                cfg.methods = value
                    .split(',')
                    .map(|s| MethodSpec::parse(s.trim()))
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| bad(line, e))?;
                if cfg.methods.is_empty() {
                    return Err(bad(line, "methods: at least one method is required"));
                }
            }
            "imputer.knn_k" => cfg.imputer_params.knn_k = parse_usize(line, key, value)?,
            "imputer.rounds" => cfg.imputer_params.rounds = parse_usize(line, key, value)?,
            "imputer.penalty" => cfg.imputer_params.penalty = parse_f64(line, key, value)?,
            "imputer.noise_scale" => cfg.imputer_params.noise_scale = parse_f64(line, key, value)?,
            "richardson.ratio" => cfg.ladder_ratio = parse_f64(line, key, value)?,
            "richardson.linked" => cfg.linked = parse_bool(line, key, value)?,
            "train.epochs" => cfg.epochs = parse_usize(line, key, value)?,
            "train.batch" => cfg.batch_size = parse_usize(line, key, value)?,
            "train.seeds" => cfg.seeds = parse_usize(line, key, value)?,
            "train.ridge" => cfg.ridge = parse_f64(line, key, value)?,
            "train.lr" => {
                cfg.learning_rate = if value.is_empty() {
                    None
                } else {
                    Some(parse_f64(line, key, value)?)
                }
            }
            "train.lr_grid" => {
                cfg.lr_grid = parse_f64_list(line, key, value)?;
                if cfg.lr_grid.is_empty() {
                    return Err(bad(line, "train.lr_grid: at least one rate is required"));
                }
            }
            "train.gamma" => {
                cfg.gamma = if value.is_empty() {
                    None
                } else {
                    Some(parse_f64(line, key, value)?)
                }
            }
            "sweep.ts" => {
                cfg.sweep_ts = parse_f64_list(line, key, value)?;
                if cfg.sweep_ts.is_empty() {
                    return Err(bad(line, "sweep.ts: at least one scale is required"));
                }
            }
            "sweep.draws" => cfg.sweep_draws = parse_usize(line, key, value)?,
            "robustness.delta_p" => cfg.delta_p = parse_f64_list(line, key, value)?,
            "robustness.delta_q" => cfg.delta_q = parse_f64_list(line, key, value)?,
            "output.timing" => cfg.timing = parse_bool(line, key, value)?,
            _ => return Err(bad(line, format!("unknown key '{key}'"))),
        }
    }
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &ExperimentConfig) -> Result<()> {
    let fail = |msg: String| Err(Error::InvalidConfig(msg));
    if cfg.n_train == 0 {
        return fail("data.n must be positive".into());
    }
    if cfg.batch_size == 0 {
        return fail("train.batch must be positive".into());
    }
    if cfg.epochs == 0 {
        return fail("train.epochs must be positive".into());
    }
    if cfg.seeds == 0 {
        return fail("train.seeds must be positive".into());
    }
    if !(0.0..1.0).contains(&cfg.p_mean) {
        return fail(format!("mechanism.p_mean {} outside [0, 1)", cfg.p_mean));
    }
    if let Some(p) = &cfg.p_explicit {
        if p.iter().any(|&v| !(0.0..1.0).contains(&v)) {
            return fail("mechanism.p entries must lie in [0, 1)".into());
        }
    }
    if cfg.ladder_ratio <= 1.0 {
        return fail(format!(
            "richardson.ratio must exceed 1, got {}",
            cfg.ladder_ratio
        ));
    }
    if cfg.ridge < 0.0 {
        return fail("train.ridge must be nonnegative".into());
    }
    if cfg.mech_kind == MechanismKind::Smar && cfg.observed.is_empty() {
        return fail("mechanism.kind = smar requires mechanism.observed columns".into());
    }
    Ok(())
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidConfig(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}

fn fmt_f64(x: f64) -> String {
    // Shortest representation that round-trips.
    format!("{x}")
}

fn fmt_f64_list(xs: &[f64]) -> String {
    xs.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(",")
}

fn fmt_usize_list(xs: &[usize]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Render the full resolved configuration, every key explicit, parseable
/// back into an equal `ExperimentConfig`.
pub fn resolved_lines(cfg: &ExperimentConfig) -> Vec<String> {
    let cov = match cfg.custom_covariance {
        CovarianceKind::Identity => "identity".to_string(),
        CovarianceKind::Ar { rho } => format!("ar:{}", fmt_f64(rho)),
    };
    vec![
        format!("seed = {}", cfg.seed),
        format!("data.name = {}", cfg.data_name),
        format!("data.n = {}", cfg.n_train),
        format!("data.n_test = {}", cfg.n_test),
        format!("data.family = {}", cfg.custom_family),
        format!("data.d = {}", cfg.custom_d),
        format!("data.covariance = {cov}"),
        format!("data.noise_sd = {}", fmt_f64(cfg.custom_noise_sd)),
        format!("data.signal_scale = {}", fmt_f64(cfg.custom_signal_scale)),
        format!("mechanism.kind = {}", cfg.mech_kind),
        format!("mechanism.p_mean = {}", fmt_f64(cfg.p_mean)),
        format!(
            "mechanism.p = {}",
            cfg.p_explicit
                .as_deref()
                .map(fmt_f64_list)
                .unwrap_or_default()
        ),
        format!("mechanism.observed = {}", fmt_usize_list(&cfg.observed)),
        format!("mechanism.q_scale = {}", fmt_f64(cfg.q_scale)),
        format!("mechanism.q_intercept = {}", fmt_f64(cfg.q_intercept)),
        format!(
            "mechanism.source = {}",
            match cfg.mech_source {
                SourceKind::True => "true",
                SourceKind::Estimated => "estimated",
            }
        ),
        format!(
            "methods = {}",
            cfg.methods
                .iter()
                .map(|m| m.canonical())
                .collect::<Vec<_>>()
                .join(",")
        ),
        format!("imputer.knn_k = {}", cfg.imputer_params.knn_k),
        format!("imputer.rounds = {}", cfg.imputer_params.rounds),
        format!("imputer.penalty = {}", fmt_f64(cfg.imputer_params.penalty)),
        format!(
            "imputer.noise_scale = {}",
            fmt_f64(cfg.imputer_params.noise_scale)
        ),
        format!("richardson.ratio = {}", fmt_f64(cfg.ladder_ratio)),
        format!("richardson.linked = {}", cfg.linked),
        format!("train.epochs = {}", cfg.epochs),
        format!("train.batch = {}", cfg.batch_size),
        format!("train.seeds = {}", cfg.seeds),
        format!("train.ridge = {}", fmt_f64(cfg.ridge)),
        format!(
            "train.lr = {}",
            cfg.learning_rate.map(fmt_f64).unwrap_or_default()
        ),
        format!("train.lr_grid = {}", fmt_f64_list(&cfg.lr_grid)),
        format!(
            "train.gamma = {}",
            cfg.gamma.map(fmt_f64).unwrap_or_default()
        ),
        format!("sweep.ts = {}", fmt_f64_list(&cfg.sweep_ts)),
        format!("sweep.draws = {}", cfg.sweep_draws),
        format!("robustness.delta_p = {}", fmt_f64_list(&cfg.delta_p)),
        format!("robustness.delta_q = {}", fmt_f64_list(&cfg.delta_q)),
        format!("output.timing = {}", cfg.timing),
    ]
}

pub fn write_resolved(cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    let mut text = resolved_lines(cfg).join("\n");
    text.push('\n');
    std::fs::write(path, text)
        .map_err(|e| Error::InvalidConfig(format!("cannot write {}: {e}", path.display())))
}

/// Materialize a mechanism, including any fitted intensity-profile
/// coefficients, as informational flat keys (not a parseable config).
pub fn mechanism_lines(spec: &MechanismSpec) -> Vec<String> {
    let mut lines = vec![
        format!("mechanism.kind = {}", spec.kind),
        format!(
            "mechanism.observed = {}",
            fmt_usize_list(&spec.observed_index_set)
        ),
    ];
    for (j, &pj) in spec.p.iter().enumerate() {
        lines.push(format!("mechanism.p.{j} = {}", fmt_f64(pj)));
    }
    for (j, q) in spec.q.iter().enumerate() {
        match q {
            Intensity::Constant => lines.push(format!("mechanism.q.{j}.kind = constant")),
            Intensity::Logistic {
                weights,
                intercept,
                shift,
                scale,
                sigma_mean,
            } => {
                lines.push(format!("mechanism.q.{j}.kind = logistic"));
                for (k, wk) in weights.iter().enumerate() {
                    lines.push(format!("mechanism.q.{j}.weight.{k} = {}", fmt_f64(*wk)));
                }
                lines.push(format!(
                    "mechanism.q.{j}.intercept = {}",
                    fmt_f64(*intercept)
                ));
                lines.push(format!("mechanism.q.{j}.shift = {}", fmt_f64(*shift)));
                lines.push(format!("mechanism.q.{j}.scale = {}", fmt_f64(*scale)));
                lines.push(format!(
                    "mechanism.q.{j}.sigma_mean = {}",
                    fmt_f64(*sigma_mean)
                ));
            }
        }
    }
    lines
}
