//! Configuration, pipeline and output files behind the `lpvgain` binary.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use lpvgain::lbopt::{self, LowerBoundResult, OptError, OptOptions, RestartEvent, SearchStop, Termination};
use lpvgain::lpv::{self, LpvError, LpvModel, ModelConfig, ScheduleSpec};
use lpvgain::par::Execution;
use lpvgain::pltv::{Epsilon, NormBracket};
use lpvgain::wcinput::{self, WorstCaseOptions, WorstCaseSignals};

/// Exit statuses of the binary.
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_INVALID_UPPER_BOUND: i32 = 4;

/// Marks errors caused by the user's input rather than by the numerics.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn is_config_lpv(e: &LpvError) -> bool {
    !matches!(e, LpvError::Lti(_) | LpvError::Pltv(_))
}

/// Exit status for an error chain.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return EXIT_CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<OptError>() {
            match e {
                OptError::InvalidUpperBound { .. } => return EXIT_INVALID_UPPER_BOUND,
                OptError::InfeasibleStart(_) | OptError::InvalidOptions(_) => return EXIT_CONFIG,
                OptError::Lpv(l) if is_config_lpv(l) => return EXIT_CONFIG,
                _ => return EXIT_NUMERIC,
            }
        }
        if let Some(e) = cause.downcast_ref::<LpvError>() {
            return if is_config_lpv(e) { EXIT_CONFIG } else { EXIT_NUMERIC };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return EXIT_CONFIG;
        }
    }
    EXIT_NUMERIC
}

/// Where γ_ub comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum GammaUbSource {
    Value(f64),
    File(PathBuf),
    Skip,
}

impl GammaUbSource {
    pub fn parse(text: &str) -> Self {
        if text.eq_ignore_ascii_case("skip") {
            GammaUbSource::Skip
        } else if let Ok(v) = text.parse::<f64>() {
            GammaUbSource::Value(v)
        } else {
            GammaUbSource::File(PathBuf::from(text))
        }
    }
}

impl Serialize for GammaUbSource {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            GammaUbSource::Value(v) => s.serialize_f64(*v),
            GammaUbSource::File(p) => s.serialize_str(&p.to_string_lossy()),
            GammaUbSource::Skip => s.serialize_str("skip"),
        }
    }
}

impl<'de> Deserialize<'de> for GammaUbSource {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        Ok(match Raw::deserialize(d)? {
            Raw::Num(v) => GammaUbSource::Value(v),
            Raw::Text(t) => GammaUbSource::parse(&t),
        })
    }
}

/// Upper-bound file written by the LMI tool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaUbFile {
    pub gamma_ub: f64,
    pub solver_status: String,
    #[serde(default)]
    pub grid_points: Option<usize>,
}

/// Resolve a γ_ub source to a number (`None` for "skip"). Relative file
/// paths are taken relative to `base`.
pub fn resolve_gamma_ub(src: &GammaUbSource, base: &Path) -> anyhow::Result<Option<f64>> {
    let value = match src {
        GammaUbSource::Skip => return Ok(None),
        GammaUbSource::Value(v) => *v,
        GammaUbSource::File(p) => {
            let path = if p.is_absolute() { p.clone() } else { base.join(p) };
            let text = fs::read_to_string(&path)
                .map_err(|e| config_err(format!("cannot read γ_ub file {}: {e}", path.display())))?;
            let file: GammaUbFile = serde_json::from_str(&text)
                .map_err(|e| config_err(format!("malformed γ_ub file {}: {e}", path.display())))?;
            let status = file.solver_status.to_ascii_lowercase();
            if status.contains("infeasible") || status.contains("error") || status.contains("fail") {
                return Err(config_err(format!(
                    "γ_ub file {} reports solver status '{}'",
                    path.display(),
                    file.solver_status
                )));
            }
            if status != "optimal" {
                log::warn!("γ_ub file reports solver status '{}'", file.solver_status);
            }
            file.gamma_ub
        }
    };
    if !(value > 0.0 && value.is_finite()) {
        return Err(config_err(format!("γ_ub = {value} must be a positive number")));
    }
    Ok(Some(value))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorstCaseConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_steps")]
    pub steps_per_period: usize,
}

fn default_k() -> usize {
    60
}

fn default_steps() -> usize {
    256
}

impl Default for WorstCaseConfig {
    fn default() -> Self {
        Self {
            k: default_k(),
            steps_per_period: default_steps(),
        }
    }
}

/// JSON run configuration. Exactly one of `example` and `model` is given.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub example: Option<String>,
    /// Rate bound of the scaled-LTI example.
    #[serde(default)]
    pub mu_bar: Option<f64>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub schedule: Option<ScheduleSpec>,
    /// Points per parameter of the frozen grid.
    #[serde(default)]
    pub grid: Option<Vec<usize>>,
    #[serde(default)]
    pub gamma_ub: Option<GammaUbSource>,
    /// Run the restart loop after the single optimization.
    #[serde(default = "yes")]
    pub refine: bool,
    /// Relative bisection tolerance.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub optimizer: OptOptions,
    #[serde(default)]
    pub worst_case: WorstCaseConfig,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn yes() -> bool {
    true
}

fn default_epsilon() -> f64 {
    1e-4
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            example: None,
            mu_bar: None,
            model: None,
            schedule: None,
            grid: None,
            gamma_ub: None,
            refine: true,
            epsilon: default_epsilon(),
            optimizer: OptOptions::default(),
            worst_case: WorstCaseConfig::default(),
            seed: None,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        serde_json::from_str(text).map_err(|e| config_err(format!("invalid run configuration: {e}")))
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn for_example(name: &str) -> Self {
        Self {
            example: Some(name.to_string()),
            ..Self::default()
        }
    }
}

/// Everything a run needs, validated.
#[derive(Debug, Clone)]
pub struct Setup {
    pub model: LpvModel,
    pub schedule: ScheduleSpec,
    pub grid: Vec<usize>,
    pub gamma_ub: Option<f64>,
    pub refine: bool,
    pub optimizer: OptOptions,
    pub worst_case: WorstCaseOptions,
}

impl Setup {
    /// `base` resolves relative γ_ub paths; `execution` overrides the
    /// optimizer's polling mode.
    pub fn new(cfg: &RunConfig, base: &Path, execution: Execution) -> anyhow::Result<Self> {
        let (model, schedule, grid) = match (&cfg.example, &cfg.model) {
            (Some(_), Some(_)) => return Err(config_err("give either 'example' or 'model', not both")),
            (None, None) => return Err(config_err("no model: give 'example' or 'model'")),
            (Some(name), None) => {
                let ex = lpv::example(name, cfg.mu_bar)?;
                (ex.model, ex.schedule, ex.grid)
            }
            (None, Some(m)) => {
                if cfg.mu_bar.is_some() {
                    return Err(config_err("'mu_bar' applies to the scaled-lti example only"));
                }
                let model = LpvModel::from_config(m.clone())?;
                let schedule = cfg
                    .schedule
                    .clone()
                    .ok_or_else(|| config_err("an inline model needs a 'schedule'"))?;
                let grid = cfg.grid.clone().unwrap_or_else(|| vec![20; model.arity()]);
                (model, schedule, grid)
            }
        };
        let schedule = cfg.schedule.clone().unwrap_or(schedule);
        schedule.validate(&model)?;
        let grid = cfg.grid.clone().unwrap_or(grid);
        if grid.len() != model.arity() {
            return Err(config_err(format!(
                "grid has {} entries for {} parameters",
                grid.len(),
                model.arity()
            )));
        }
        if !(cfg.epsilon > 0.0 && cfg.epsilon < 1.0) {
            return Err(config_err("'epsilon' must lie in (0, 1)"));
        }
        let gamma_ub = match &cfg.gamma_ub {
            Some(src) => resolve_gamma_ub(src, base)?,
            None => None,
        };
        let mut optimizer = cfg.optimizer.clone();
        optimizer.epsilon = Epsilon::Relative(cfg.epsilon);
        optimizer.execution = execution;
        if let Some(seed) = cfg.seed {
            optimizer.seed = seed;
        }
        if cfg.worst_case.k == 0 || cfg.worst_case.steps_per_period < 8 {
            return Err(config_err("worst_case needs k ≥ 1 and steps_per_period ≥ 8"));
        }
        let worst_case = WorstCaseOptions {
            k: cfg.worst_case.k,
            steps_per_period: cfg.worst_case.steps_per_period,
            ..WorstCaseOptions::default()
        };
        Ok(Self {
            model,
            schedule,
            grid,
            gamma_ub,
            refine: cfg.refine,
            optimizer,
            worst_case,
        })
    }

    /// Decision vector given on the command line, or the default one.
    pub fn decision(&self, given: Option<&[f64]>) -> anyhow::Result<Vec<f64>> {
        match given {
            Some(c) => {
                lpv::trajectory(&self.model, &self.schedule, c)?;
                Ok(c.to_vec())
            }
            None => Ok(lpv::default_decision(&self.model, &self.schedule)?),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenReport {
    pub gamma_lb_frozen: f64,
    pub argmax: Vec<f64>,
    pub grid_points: usize,
}

pub fn run_frozen(setup: &Setup) -> anyhow::Result<FrozenReport> {
    let grid = lpv::uniform_grid(&setup.model, &setup.grid)?;
    let fb = lpv::frozen_lower_bound(&setup.model, &grid, setup.optimizer.execution)
        .context("frozen-parameter bound")?;
    Ok(FrozenReport {
        gamma_lb_frozen: fb.gamma,
        argmax: fb.argmax,
        grid_points: grid.len(),
    })
}

pub fn run_pltv_norm(setup: &Setup, c: &[f64]) -> anyhow::Result<NormBracket> {
    lbopt::trajectory_norm(&setup.model, &setup.schedule, c, None, &setup.optimizer)
        .context("trajectory norm")
}

/// Single optimization with γ_ub, or the restart loop when γ_ub is absent;
/// then the restart loop as refinement if requested.
pub fn run_lower_bound(setup: &Setup, c0: &[f64]) -> anyhow::Result<LowerBoundResult> {
    let opts = &setup.optimizer;
    let first = match setup.gamma_ub {
        Some(g) => lbopt::algorithm_two(&setup.model, &setup.schedule, g, c0, opts)
            .context("single optimization at γ_ub")?,
        None => {
            return lbopt::algorithm_one(&setup.model, &setup.schedule, c0, opts)
                .context("restart loop")
        }
    };
    if !setup.refine {
        return Ok(first);
    }
    let refined = lbopt::algorithm_one(&setup.model, &setup.schedule, &first.c_star, opts)
        .context("refinement")?;
    if refined.gamma_lb > first.gamma_lb {
        let mut r = refined;
        r.evaluations += first.evaluations;
        Ok(r)
    } else {
        let mut r = first;
        r.evaluations += refined.evaluations;
        Ok(r)
    }
}

pub fn run_worst_case(setup: &Setup, c: &[f64], gamma: f64) -> anyhow::Result<WorstCaseSignals> {
    let traj = lpv::trajectory(&setup.model, &setup.schedule, c)?;
    let sys = lpv::evaluate_along(&setup.model, &traj)?;
    wcinput::worst_case_input(&sys, gamma, &setup.worst_case).context("worst-case input")
}

/// CSV with columns `t, rho_*, w_*, z_*`, values to 12 significant digits.
pub fn signals_csv(setup: &Setup, c: &[f64], sig: &WorstCaseSignals) -> anyhow::Result<String> {
    let traj = lpv::trajectory(&setup.model, &setup.schedule, c)?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=setup.model.arity()).map(|i| format!("rho_{i}")));
    header.extend((1..=sig.w.ncols()).map(|i| format!("w_{i}")));
    header.extend((1..=sig.z.ncols()).map(|i| format!("z_{i}")));
    let mut out = header.join(",");
    out.push('\n');
    let fmt = |v: f64| format!("{v:.11e}");
    for (i, &t) in sig.times.iter().enumerate() {
        let mut row = vec![fmt(t)];
        row.extend(traj.value(t).into_iter().map(fmt));
        row.extend(sig.w.row(i).iter().map(|&v| fmt(v)));
        row.extend(sig.z.row(i).iter().map(|&v| fmt(v)));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub frozen: f64,
    pub lower_bound: f64,
    pub worst_case: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminationReport {
    pub termination: Termination,
    pub search_stop: SearchStop,
    pub outer_iterations: usize,
    pub evaluations: usize,
    pub restarts: Vec<RestartEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub model: String,
    pub gamma_lb_frozen: f64,
    pub gamma_lb: f64,
    pub gamma_ub: Option<f64>,
    pub bracket: NormBracket,
    pub h_star: f64,
    pub c_star: Vec<f64>,
    /// `[re, im]` of the unit-modulus monodromy eigenvalue.
    pub eigenvalue: Option<[f64; 2]>,
    /// Start of the two-point window when no unit eigenvalue was resolvable.
    #[serde(default)]
    pub window_start: Option<f64>,
    pub achieved_ratio: Option<f64>,
    /// False when no constant trajectory is admissible, so the frozen bound
    /// need not lie below the trajectory bound.
    pub frozen_comparable: bool,
    pub timings: Timings,
    pub termination: TerminationReport,
}

impl Report {
    /// The report with timings zeroed, for reproducibility comparisons.
    pub fn without_timings(&self) -> Self {
        Self {
            timings: Timings::default(),
            ..self.clone()
        }
    }
}

/// A constant trajectory is admissible when every pattern can spend the
/// whole period on a zero-rate segment.
pub fn constant_trajectories_admissible(spec: &ScheduleSpec) -> bool {
    spec.patterns.iter().all(|p| p.contains(&0.0))
}

pub struct FullOutput {
    pub report: Report,
    pub signals: Option<WorstCaseSignals>,
    pub csv: Option<String>,
}

/// Frozen bound, lower bound and worst-case input at the optimum.
pub fn run_full(setup: &Setup, c0: Option<&[f64]>) -> anyhow::Result<FullOutput> {
    let start = Instant::now();
    let frozen = run_frozen(setup)?;
    let t_frozen = start.elapsed().as_secs_f64();

    let c0 = setup.decision(c0)?;
    let t = Instant::now();
    let lb = run_lower_bound(setup, &c0)?;
    let t_lb = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let (signals, csv) = match run_worst_case(setup, &lb.c_star, lb.gamma_lb) {
        Ok(sig) => {
            let csv = signals_csv(setup, &lb.c_star, &sig)?;
            (Some(sig), Some(csv))
        }
        Err(e) => {
            log::warn!("no worst-case input: {e:#}");
            (None, None)
        }
    };
    let t_wc = t.elapsed().as_secs_f64();

    let comparable = constant_trajectories_admissible(&setup.schedule);
    if comparable && frozen.gamma_lb_frozen > lb.gamma_lb {
        log::info!(
            "frozen bound {} exceeds the trajectory bound {}",
            frozen.gamma_lb_frozen,
            lb.gamma_lb
        );
    }
    let report = Report {
        model: setup.model.name().to_string(),
        gamma_lb_frozen: frozen.gamma_lb_frozen,
        gamma_lb: lb.gamma_lb,
        gamma_ub: setup.gamma_ub,
        bracket: lb.bracket,
        h_star: lb.h_star,
        c_star: lb.c_star.clone(),
        eigenvalue: signals
            .as_ref()
            .filter(|s| s.window_start.is_none())
            .map(|s| [s.lambda.re, s.lambda.im]),
        window_start: signals.as_ref().and_then(|s| s.window_start),
        achieved_ratio: signals.as_ref().map(|s| s.ratio),
        frozen_comparable: comparable,
        timings: Timings {
            frozen: t_frozen,
            lower_bound: t_lb,
            worst_case: t_wc,
            total: start.elapsed().as_secs_f64(),
        },
        termination: TerminationReport {
            termination: lb.termination,
            search_stop: lb.search_stop,
            outer_iterations: lb.outer_iterations,
            evaluations: lb.evaluations,
            restarts: lb.restarts,
        },
    };
    Ok(FullOutput { report, signals, csv })
}

/// Model file in the format read by the LMI upper-bound tool.
pub fn export_model(setup: &Setup) -> String {
    setup.model.to_json()
}

pub fn write_file(dir: &Path, name: &str, contents: &str) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// Parse `"1.5,2,0.25"`.
pub fn parse_vector(text: &str) -> anyhow::Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| config_err(format!("bad number '{s}' in decision vector: {e}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_ub_source_parsing() {
        assert_eq!(GammaUbSource::parse("skip"), GammaUbSource::Skip);
        assert_eq!(GammaUbSource::parse("2.964"), GammaUbSource::Value(2.964));
        assert_eq!(GammaUbSource::parse("ub.json"), GammaUbSource::File("ub.json".into()));
        let cfg: RunConfig = serde_json::from_str(r#"{"example":"harald","gamma_ub":3.1}"#).unwrap();
        assert_eq!(cfg.gamma_ub, Some(GammaUbSource::Value(3.1)));
        let cfg: RunConfig = serde_json::from_str(r#"{"example":"harald","gamma_ub":"skip"}"#).unwrap();
        assert_eq!(cfg.gamma_ub, Some(GammaUbSource::Skip));
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        let e = config_err("x").context("outer");
        assert_eq!(exit_code(&e), EXIT_CONFIG);
        let e = anyhow::Error::from(OptError::InvalidUpperBound {
            gamma_ub: 1.0,
            h: 2.0,
            certificate: vec![],
        });
        assert_eq!(exit_code(&e), EXIT_INVALID_UPPER_BOUND);
        let e = anyhow::Error::from(LpvError::UnknownExample("nope".into()));
        assert_eq!(exit_code(&e), EXIT_CONFIG);
        let e = anyhow::anyhow!("integration failed");
        assert_eq!(exit_code(&e), EXIT_NUMERIC);
    }

    #[test]
    fn model_sources_are_exclusive() {
        let mut cfg = RunConfig::for_example("harald");
        cfg.model = Some(lpv::example("rotated", None).unwrap().model.config().clone());
        let err = Setup::new(&cfg, Path::new("."), Execution::Sequential).unwrap_err();
        assert_eq!(exit_code(&err), EXIT_CONFIG);
        let err = Setup::new(&RunConfig::default(), Path::new("."), Execution::Sequential).unwrap_err();
        assert_eq!(exit_code(&err), EXIT_CONFIG);
    }

    #[test]
    fn constant_admissibility() {
        let ex = lpv::example("harald", None).unwrap();
        assert!(constant_trajectories_admissible(&ex.schedule));
        let spec = ScheduleSpec {
            patterns: vec![vec![1.0, -1.0]],
            h_min: 1.0,
            h_max: 2.0,
        };
        assert!(!constant_trajectories_admissible(&spec));
    }
}
