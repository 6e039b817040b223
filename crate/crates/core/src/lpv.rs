//! Gridded LPV models, piecewise-linear periodic scheduling trajectories
//! and the frozen-parameter lower bound.
//!
//! A trajectory for parameter `i` is described by a rate pattern
//! `r = (r₁ … r_R)` and a decision block `[ρ₀, c₁ … c_R]`: on the `j`-th
//! segment, of length `c_j`, the parameter moves with constant rate `r_j`.
//! Decision blocks of all parameters are concatenated into one vector.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{self, EvalError, Expr, ParseError};
use crate::linalg::Mat;
use crate::ltinorm::{self, ContinuousLti, LtiError};
use crate::par::{self, Execution};
use crate::pltv::{PeriodicSystem, PltvError, SystemMatrices};

/// Slack used when checking linear constraints.
pub const FEAS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LpvError {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("entry {entry}: {source}")]
    Parse {
        entry: String,
        #[source]
        source: ParseError,
    },
    #[error("entry {entry} at ρ = {point:?}: {source}")]
    Domain {
        entry: String,
        point: Vec<f64>,
        #[source]
        source: EvalError,
    },
    #[error("invalid schedule: {0}")]
    InvalidSpec(String),
    #[error("infeasible decision vector: {}", .0.join("; "))]
    InfeasibleDecision(Vec<String>),
    #[error("unknown example {0:?}")]
    UnknownExample(String),
    #[error(transparent)]
    Lti(#[from] LtiError),
    #[error(transparent)]
    Pltv(#[from] PltvError),
    #[error("malformed JSON: {0}")]
    Json(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub range: [f64; 2],
    pub rate: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Entry {
    Number(f64),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Definition {
    pub name: String,
    pub expr: String,
}

/// Serialized model: matrix entries are numbers or expressions in `r1 … rm`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub parameters: Vec<Parameter>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub definitions: Vec<Definition>,
    pub a: Vec<Vec<Entry>>,
    pub b: Vec<Vec<Entry>>,
    pub c: Vec<Vec<Entry>>,
    pub d: Vec<Vec<Entry>>,
}

#[derive(Debug)]
struct Entries {
    a: Vec<Expr>,
    b: Vec<Expr>,
    c: Vec<Expr>,
    d: Vec<Expr>,
}

#[derive(Debug, Clone)]
pub struct LpvModel {
    config: ModelConfig,
    dims: (usize, usize, usize),
    entries: Arc<Entries>,
}

fn parse_block(
    label: char,
    rows: &[Vec<Entry>],
    shape: (usize, usize),
    arity: usize,
    defs: &HashMap<String, Expr>,
) -> Result<Vec<Expr>, LpvError> {
    if rows.len() != shape.0 || rows.iter().any(|r| r.len() != shape.1) {
        return Err(LpvError::InvalidModel(format!(
            "matrix {label} must be {}×{}",
            shape.0, shape.1
        )));
    }
    let mut out = Vec::with_capacity(shape.0 * shape.1);
    for (i, row) in rows.iter().enumerate() {
        for (j, e) in row.iter().enumerate() {
            out.push(match e {
                Entry::Number(v) => Expr::Num(*v),
                Entry::Text(s) => expr::parse_with(s, arity, defs).map_err(|source| {
                    LpvError::Parse {
                        entry: format!("{label}[{}][{}]", i + 1, j + 1),
                        source,
                    }
                })?,
            });
        }
    }
    Ok(out)
}

impl LpvModel {
    pub fn from_config(config: ModelConfig) -> Result<Self, LpvError> {
        let m = config.parameters.len();
        if m == 0 {
            return Err(LpvError::InvalidModel("at least one parameter is required".into()));
        }
        for p in &config.parameters {
            if !(p.range[0] < p.range[1]) {
                return Err(LpvError::InvalidModel(format!("{}: empty range", p.name)));
            }
            if !(p.rate[0] <= 0.0 && 0.0 <= p.rate[1]) {
                return Err(LpvError::InvalidModel(format!(
                    "{}: rate bounds must contain 0",
                    p.name
                )));
            }
        }
        let n = config.a.len();
        let p = config.b.first().map_or(0, |r| r.len());
        let q = config.c.len();
        if n == 0 {
            return Err(LpvError::InvalidModel("A must be nonempty".into()));
        }
        let mut defs = HashMap::new();
        for d in &config.definitions {
            let e = expr::parse_with(&d.expr, m, &defs).map_err(|source| LpvError::Parse {
                entry: d.name.clone(),
                source,
            })?;
            defs.insert(d.name.clone(), e);
        }
        let entries = Entries {
            a: parse_block('A', &config.a, (n, n), m, &defs)?,
            b: parse_block('B', &config.b, (n, p), m, &defs)?,
            c: parse_block('C', &config.c, (q, n), m, &defs)?,
            d: parse_block('D', &config.d, (q, p), m, &defs)?,
        };
        Ok(Self {
            config,
            dims: (n, p, q),
            entries: Arc::new(entries),
        })
    }

    pub fn from_json(text: &str) -> Result<Self, LpvError> {
        let cfg: ModelConfig =
            serde_json::from_str(text).map_err(|e| LpvError::Json(e.to_string()))?;
        Self::from_config(cfg)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn name(&self) -> &str {
        &self.config.name
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.config.parameters
    }

    /// Number of scheduling parameters.
    pub fn arity(&self) -> usize {
        self.config.parameters.len()
    }

    /// `(n, p, q)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn in_range(&self, rho: &[f64]) -> bool {
        rho.len() == self.arity()
            && self
                .parameters()
                .iter()
                .zip(rho)
                .all(|(p, &v)| v >= p.range[0] - FEAS_TOL && v <= p.range[1] + FEAS_TOL)
    }

    /// All state-space matrices at the parameter point `rho`.
    pub fn matrices(&self, rho: &[f64]) -> Result<SystemMatrices, LpvError> {
        let (n, p, q) = self.dims;
        let block = |label: char, exprs: &[Expr], r: usize, c: usize| {
            let mut m = Mat::zeros(r, c);
            for i in 0..r {
                for j in 0..c {
                    m[(i, j)] = exprs[i * c + j].eval(rho).map_err(|source| LpvError::Domain {
                        entry: format!("{label}[{}][{}]", i + 1, j + 1),
                        point: rho.to_vec(),
                        source,
                    })?;
                }
            }
            Ok::<Mat, LpvError>(m)
        };
        Ok(SystemMatrices {
            a: block('A', &self.entries.a, n, n)?,
            b: block('B', &self.entries.b, n, p)?,
            c: block('C', &self.entries.c, q, n)?,
            d: block('D', &self.entries.d, q, p)?,
        })
    }

    /// Pretty JSON of the model, the format read back by `from_json`.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.config).expect("model config serializes")
    }
}

/// The LTI system at a frozen parameter value.
pub fn freeze(model: &LpvModel, rho: &[f64]) -> Result<ContinuousLti, LpvError> {
    if !model.in_range(rho) {
        return Err(LpvError::InvalidSpec(format!("ρ = {rho:?} outside the parameter range")));
    }
    let m = model.matrices(rho)?;
    Ok(ContinuousLti::new(m.a, m.b, m.c, m.d)?)
}

/// Cartesian grid with `counts[i]` evenly spaced points over each range.
pub fn uniform_grid(model: &LpvModel, counts: &[usize]) -> Result<Vec<Vec<f64>>, LpvError> {
    if counts.len() != model.arity() || counts.contains(&0) {
        return Err(LpvError::InvalidSpec(format!(
            "grid needs one positive count per parameter, got {counts:?}"
        )));
    }
    let axes: Vec<Vec<f64>> = model
        .parameters()
        .iter()
        .zip(counts)
        .map(|(p, &k)| {
            if k == 1 {
                vec![0.5 * (p.range[0] + p.range[1])]
            } else {
                (0..k)
                    .map(|i| p.range[0] + (p.range[1] - p.range[0]) * i as f64 / (k - 1) as f64)
                    .collect()
            }
        })
        .collect();
    let mut points = vec![Vec::new()];
    for axis in &axes {
        points = points
            .into_iter()
            .flat_map(|pt| {
                axis.iter().map(move |&v| {
                    let mut next = pt.clone();
                    next.push(v);
                    next
                })
            })
            .collect();
    }
    Ok(points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenBound {
    pub gamma: f64,
    pub argmax: Vec<f64>,
}

/// `max_k ‖G(ρ_k)‖∞` over the grid.
pub fn frozen_lower_bound(
    model: &LpvModel,
    grid: &[Vec<f64>],
    exec: Execution,
) -> Result<FrozenBound, LpvError> {
    if grid.is_empty() {
        return Err(LpvError::InvalidSpec("empty grid".into()));
    }
    let norms = par::map(exec, grid, |rho| {
        let sys = freeze(model, rho)?;
        Ok::<f64, LpvError>(ltinorm::hinf_continuous(&sys, 1e-9)?)
    });
    let mut best = FrozenBound {
        gamma: f64::NEG_INFINITY,
        argmax: Vec::new(),
    };
    for (rho, g) in grid.iter().zip(norms) {
        let g = g?;
        if g > best.gamma {
            best = FrozenBound {
                gamma: g,
                argmax: rho.clone(),
            };
        }
    }
    Ok(best)
}

/// Rate patterns (one per parameter) and the admissible period interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub patterns: Vec<Vec<f64>>,
    pub h_min: f64,
    pub h_max: f64,
}

impl ScheduleSpec {
    pub fn validate(&self, model: &LpvModel) -> Result<(), LpvError> {
        if self.patterns.len() != model.arity() {
            return Err(LpvError::InvalidSpec(format!(
                "{} patterns for {} parameters",
                self.patterns.len(),
                model.arity()
            )));
        }
        if !(self.h_min > 0.0 && self.h_min <= self.h_max && self.h_max.is_finite()) {
            return Err(LpvError::InvalidSpec(format!(
                "period bounds [{}, {}] invalid",
                self.h_min, self.h_max
            )));
        }
        for (pat, par) in self.patterns.iter().zip(model.parameters()) {
            if pat.is_empty() {
                return Err(LpvError::InvalidSpec(format!("{}: empty pattern", par.name)));
            }
            for &r in pat {
                if !(r >= par.rate[0] - FEAS_TOL && r <= par.rate[1] + FEAS_TOL) {
                    return Err(LpvError::InvalidSpec(format!(
                        "{}: rate {r} outside [{}, {}]",
                        par.name, par.rate[0], par.rate[1]
                    )));
                }
            }
            let up = pat.iter().any(|&r| r > 0.0);
            let down = pat.iter().any(|&r| r < 0.0);
            if up != down {
                return Err(LpvError::InvalidSpec(format!(
                    "{}: pattern needs both rising and falling segments to close",
                    par.name
                )));
            }
        }
        Ok(())
    }

    /// Length of the flattened decision vector.
    pub fn dimension(&self) -> usize {
        self.patterns.iter().map(|p| p.len() + 1).sum()
    }

    /// Start of parameter `i`'s block `[ρ₀, c₁ … c_R]`.
    pub fn block_start(&self, i: usize) -> usize {
        self.patterns[..i].iter().map(|p| p.len() + 1).sum()
    }
}

/// Linear constraints `G c ≤ g`, `E c = e` with one label per row.
#[derive(Debug, Clone)]
pub struct LinearConstraints {
    pub ineq: Mat,
    pub ineq_rhs: DVector<f64>,
    pub ineq_labels: Vec<String>,
    pub eq: Mat,
    pub eq_rhs: DVector<f64>,
    pub eq_labels: Vec<String>,
}

impl LinearConstraints {
    pub fn dimension(&self) -> usize {
        self.ineq.ncols()
    }

    /// Labels of rows violated by more than `tol`.
    pub fn violations(&self, c: &[f64], tol: f64) -> Vec<String> {
        let x = DVector::from_column_slice(c);
        let mut out = Vec::new();
        let gi = &self.ineq * &x;
        for (k, label) in self.ineq_labels.iter().enumerate() {
            if gi[k] > self.ineq_rhs[k] + tol {
                out.push(format!("{label} (excess {:.3e})", gi[k] - self.ineq_rhs[k]));
            }
        }
        let ge = &self.eq * &x;
        for (k, label) in self.eq_labels.iter().enumerate() {
            if (ge[k] - self.eq_rhs[k]).abs() > tol {
                out.push(format!("{label} (residual {:.3e})", ge[k] - self.eq_rhs[k]));
            }
        }
        out
    }

    pub fn is_feasible(&self, c: &[f64], tol: f64) -> bool {
        c.len() == self.dimension() && self.violations(c, tol).is_empty()
    }
}

/// Range inequalities at every breakpoint, closure and period-tying
/// equalities, nonnegative segments and `h_min ≤ h ≤ h_max`.
pub fn constraint_set(model: &LpvModel, spec: &ScheduleSpec) -> Result<LinearConstraints, LpvError> {
    spec.validate(model)?;
    let dim = spec.dimension();
    let mut ineq: Vec<(Vec<f64>, f64, String)> = Vec::new();
    let mut eq: Vec<(Vec<f64>, f64, String)> = Vec::new();
    for (i, (pat, par)) in spec.patterns.iter().zip(model.parameters()).enumerate() {
        let s = spec.block_start(i);
        for j in 0..=pat.len() {
            let mut row = vec![0.0; dim];
            row[s] = 1.0;
            for (k, &r) in pat[..j].iter().enumerate() {
                row[s + 1 + k] = r;
            }
            let neg: Vec<f64> = row.iter().map(|v| -v).collect();
            ineq.push((row, par.range[1], format!("{} ≤ {} at breakpoint {j}", par.name, par.range[1])));
            ineq.push((neg, -par.range[0], format!("{} ≥ {} at breakpoint {j}", par.name, par.range[0])));
        }
        let mut closure = vec![0.0; dim];
        for (k, &r) in pat.iter().enumerate() {
            closure[s + 1 + k] = r;
        }
        eq.push((closure, 0.0, format!("{} closure", par.name)));
    }
    let period_row = |i: usize| {
        let mut row = vec![0.0; dim];
        let s = spec.block_start(i);
        for k in 0..spec.patterns[i].len() {
            row[s + 1 + k] = 1.0;
        }
        row
    };
    let h1 = period_row(0);
    for i in 1..spec.patterns.len() {
        let hi = period_row(i);
        let row: Vec<f64> = h1.iter().zip(&hi).map(|(a, b)| a - b).collect();
        eq.push((row, 0.0, format!("common period 1 = {}", i + 1)));
    }
    ineq.push((h1.clone(), spec.h_max, format!("h ≤ {}", spec.h_max)));
    ineq.push((
        h1.iter().map(|v| -v).collect(),
        -spec.h_min,
        format!("h ≥ {}", spec.h_min),
    ));
    for (i, pat) in spec.patterns.iter().enumerate() {
        let s = spec.block_start(i);
        for k in 0..pat.len() {
            let mut row = vec![0.0; dim];
            row[s + 1 + k] = -1.0;
            ineq.push((row, 0.0, format!("segment {} of parameter {} ≥ 0", k + 1, i + 1)));
        }
    }
    let to_mat = |rows: &[(Vec<f64>, f64, String)]| {
        let mut m = Mat::zeros(rows.len(), dim);
        for (k, (row, _, _)) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                m[(k, j)] = v;
            }
        }
        (
            m,
            DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1)),
            rows.iter().map(|r| r.2.clone()).collect(),
        )
    };
    let (ineq_m, ineq_rhs, ineq_labels) = to_mat(&ineq);
    let (eq_m, eq_rhs, eq_labels) = to_mat(&eq);
    Ok(LinearConstraints {
        ineq: ineq_m,
        ineq_rhs,
        ineq_labels,
        eq: eq_m,
        eq_rhs,
        eq_labels,
    })
}

/// Segment lengths for one pattern with total `h`, closing exactly, and
/// with total excursion at most `max_swing`. Returns `None` if impossible.
fn pattern_lengths(pat: &[f64], h: f64, max_swing: f64) -> Option<Vec<f64>> {
    let r = pat.len();
    let zeros = pat.iter().filter(|&&v| v == 0.0).count();
    let up: f64 = pat.iter().filter(|&&v| v > 0.0).sum();
    let down: f64 = -pat.iter().filter(|&&v| v < 0.0).sum::<f64>();
    let n_up = pat.iter().filter(|&&v| v > 0.0).count() as f64;
    let n_down = pat.iter().filter(|&&v| v < 0.0).count() as f64;
    if zeros == r {
        return Some(vec![h / r as f64; r]);
    }
    // flat segments take an equal share, rising and falling split the rest
    // with lengths a, b such that a·up = b·down
    let flat = if zeros > 0 { h / r as f64 } else { 0.0 };
    let moving = h - flat * zeros as f64;
    let a = moving / (n_up + n_down * up / down);
    let b = a * up / down;
    let mut lens: Vec<f64> = pat
        .iter()
        .map(|&v| if v > 0.0 { a } else if v < 0.0 { b } else { flat })
        .collect();
    let sw = swing(pat, &lens);
    if sw > max_swing {
        if zeros == 0 {
            return None;
        }
        let f = max_swing / sw;
        let freed: f64 = lens
            .iter()
            .zip(pat)
            .filter(|(_, &v)| v != 0.0)
            .map(|(l, _)| l * (1.0 - f))
            .sum();
        for (l, &v) in lens.iter_mut().zip(pat) {
            if v != 0.0 {
                *l *= f;
            } else {
                *l += freed / zeros as f64;
            }
        }
    }
    Some(lens)
}

/// `(min, max)` of the cumulative excursion over the breakpoints.
fn excursion(pat: &[f64], lens: &[f64]) -> (f64, f64) {
    let mut acc = 0.0;
    let (mut lo, mut hi) = (0.0f64, 0.0f64);
    for (r, c) in pat.iter().zip(lens) {
        acc += r * c;
        lo = lo.min(acc);
        hi = hi.max(acc);
    }
    (lo, hi)
}

fn swing(pat: &[f64], lens: &[f64]) -> f64 {
    let (lo, hi) = excursion(pat, lens);
    hi - lo
}

/// A feasible starting point: period at the middle of `[h_min, h_max]`
/// (shortened if the excursion does not fit the range), closing segment
/// lengths, and offsets that centre each trajectory in its range.
pub fn default_decision(model: &LpvModel, spec: &ScheduleSpec) -> Result<Vec<f64>, LpvError> {
    spec.validate(model)?;
    let widths: Vec<f64> = model
        .parameters()
        .iter()
        .map(|p| 0.9 * (p.range[1] - p.range[0]))
        .collect();
    let mut h = 0.5 * (spec.h_min + spec.h_max);
    let mut lens: Option<Vec<Vec<f64>>> = None;
    for _ in 0..60 {
        let attempt: Option<Vec<Vec<f64>>> = spec
            .patterns
            .iter()
            .zip(&widths)
            .map(|(pat, &w)| pattern_lengths(pat, h, w))
            .collect();
        if attempt.is_some() {
            lens = attempt;
            break;
        }
        if h <= spec.h_min {
            break;
        }
        h = (0.8 * h).max(spec.h_min);
    }
    let lens = lens.ok_or_else(|| {
        LpvError::InvalidSpec("no closing trajectory fits the parameter range".into())
    })?;
    let mut c = Vec::with_capacity(spec.dimension());
    for ((pat, l), par) in spec.patterns.iter().zip(&lens).zip(model.parameters()) {
        let (lo, hi) = excursion(pat, l);
        let mid = 0.5 * (par.range[0] + par.range[1]);
        c.push(mid - 0.5 * (lo + hi));
        c.extend(l);
    }
    Ok(c)
}

/// A random feasible decision vector: random period and segment weights,
/// closed and fitted into the range, with a random admissible offset.
/// About a third of the draws span the whole range.
pub fn random_decision<R: rand::Rng>(
    model: &LpvModel,
    spec: &ScheduleSpec,
    rng: &mut R,
) -> Result<Vec<f64>, LpvError> {
    let cons = constraint_set(model, spec)?;
    'attempt: for _ in 0..200 {
        let h = rng.gen_range(spec.h_min..=spec.h_max);
        let mut c = Vec::with_capacity(spec.dimension());
        for (pat, par) in spec.patterns.iter().zip(model.parameters()) {
            let mut w: Vec<f64> = pat.iter().map(|_| rng.gen_range(0.05..1.0)).collect();
            let up: f64 = pat.iter().zip(&w).filter(|(r, _)| **r > 0.0).map(|(r, x)| r * x).sum();
            let down: f64 = -pat.iter().zip(&w).filter(|(r, _)| **r < 0.0).map(|(r, x)| r * x).sum::<f64>();
            if up > 0.0 {
                for (x, r) in w.iter_mut().zip(pat) {
                    if *r > 0.0 {
                        *x *= down / up;
                    }
                }
            }
            let total: f64 = w.iter().sum();
            let mut lens: Vec<f64> = w.iter().map(|x| x * h / total).collect();
            let width = par.range[1] - par.range[0];
            let sw = swing(pat, &lens);
            // a share of the draws use the full range, where optima often sit
            let target = if rng.gen_bool(0.3) { 1.0 } else { rng.gen_range(0.3..0.95) } * width;
            if sw > target {
                let zeros = pat.iter().filter(|&&r| r == 0.0).count();
                if zeros == 0 {
                    continue 'attempt;
                }
                let f = target / sw;
                let mut freed = 0.0;
                for (l, &r) in lens.iter_mut().zip(pat) {
                    if r != 0.0 {
                        freed += *l * (1.0 - f);
                        *l *= f;
                    }
                }
                for (l, &r) in lens.iter_mut().zip(pat) {
                    if r == 0.0 {
                        *l += freed / zeros as f64;
                    }
                }
            }
            let (lo, hi) = excursion(pat, &lens);
            let (a, b) = (par.range[0] - lo, par.range[1] - hi);
            c.push(if b > a { rng.gen_range(a..=b) } else { 0.5 * (a + b) });
            c.extend(lens);
        }
        if cons.is_feasible(&c, FEAS_TOL * (1.0 + spec.h_max)) {
            return Ok(c);
        }
    }
    Err(LpvError::InvalidSpec("could not draw a feasible trajectory".into()))
}

/// Piecewise-linear h-periodic scheduling trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub period: f64,
    pub offsets: Vec<f64>,
    pub patterns: Vec<Vec<f64>>,
    pub lengths: Vec<Vec<f64>>,
    knots: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl Trajectory {
    /// Parameter values at `t`, taken modulo the period.
    pub fn value(&self, t: f64) -> Vec<f64> {
        let t = self.reduce(t);
        (0..self.offsets.len())
            .map(|i| {
                if t >= self.period {
                    return self.offsets[i];
                }
                let j = self.segment(i, t);
                self.values[i][j] + (t - self.knots[i][j]) * self.patterns[i][j]
            })
            .collect()
    }

    /// Right-continuous rates at `t`.
    pub fn rate(&self, t: f64) -> Vec<f64> {
        let t = self.reduce(t);
        (0..self.offsets.len())
            .map(|i| self.patterns[i][self.segment(i, t.min(self.period * (1.0 - 1e-15)))])
            .collect()
    }

    fn reduce(&self, t: f64) -> f64 {
        if (0.0..=self.period).contains(&t) {
            t
        } else {
            t.rem_euclid(self.period)
        }
    }

    fn segment(&self, i: usize, t: f64) -> usize {
        let knots = &self.knots[i];
        let r = self.patterns[i].len();
        // last j with knots[j] ≤ t, skipping empty segments
        let mut j = knots.partition_point(|&k| k <= t).saturating_sub(1).min(r - 1);
        while j + 1 < r && knots[j + 1] <= t {
            j += 1;
        }
        j
    }

    /// Segment boundaries in `(0, h)` over all parameters.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut b: Vec<f64> = self
            .knots
            .iter()
            .flat_map(|k| k.iter().copied())
            .filter(|&t| t > 0.0 && t < self.period)
            .collect();
        b.sort_by(|a, c| a.partial_cmp(c).unwrap());
        b.dedup_by(|a, c| (*a - *c).abs() <= 1e-12 * self.period);
        b
    }
}

/// Build the trajectory for a decision vector, checking every constraint.
pub fn trajectory(
    model: &LpvModel,
    spec: &ScheduleSpec,
    c: &[f64],
) -> Result<Trajectory, LpvError> {
    let cons = constraint_set(model, spec)?;
    if c.len() != spec.dimension() {
        return Err(LpvError::InfeasibleDecision(vec![format!(
            "expected {} entries, got {}",
            spec.dimension(),
            c.len()
        )]));
    }
    let bad = cons.violations(c, FEAS_TOL * (1.0 + spec.h_max));
    if !bad.is_empty() {
        return Err(LpvError::InfeasibleDecision(bad));
    }
    Ok(trajectory_unchecked(spec, c))
}

pub(crate) fn trajectory_unchecked(spec: &ScheduleSpec, c: &[f64]) -> Trajectory {
    let mut offsets = Vec::new();
    let mut lengths = Vec::new();
    let mut knots = Vec::new();
    let mut values = Vec::new();
    for (i, pat) in spec.patterns.iter().enumerate() {
        let s = spec.block_start(i);
        let rho0 = c[s];
        let l: Vec<f64> = c[s + 1..s + 1 + pat.len()].iter().map(|v| v.max(0.0)).collect();
        let mut t = 0.0;
        let mut v = rho0;
        let mut ks = Vec::with_capacity(pat.len() + 1);
        let mut vs = Vec::with_capacity(pat.len() + 1);
        for (r, len) in pat.iter().zip(&l) {
            ks.push(t);
            vs.push(v);
            t += len;
            v += r * len;
        }
        ks.push(t);
        vs.push(v);
        offsets.push(rho0);
        lengths.push(l);
        knots.push(ks);
        values.push(vs);
    }
    let period = knots[0].last().copied().unwrap_or(0.0);
    Trajectory {
        period,
        offsets,
        patterns: spec.patterns.clone(),
        lengths,
        knots,
        values,
    }
}

/// The periodic system obtained by evaluating the model along a trajectory.
pub fn evaluate_along(model: &LpvModel, traj: &Trajectory) -> Result<PeriodicSystem, LpvError> {
    let probe = PeriodicSystem::constant(model.matrices(&traj.value(0.0))?, traj.period)?;
    for t in probe
        .sample_times(64)
        .into_iter()
        .chain(traj.breakpoints())
    {
        model.matrices(&traj.value(t))?;
    }
    let model = model.clone();
    let tr = traj.clone();
    let (n, p, q) = model.dims();
    Ok(PeriodicSystem::new(
        traj.period,
        traj.breakpoints(),
        Arc::new(move |t| {
            model.matrices(&tr.value(t)).unwrap_or_else(|_| SystemMatrices {
                a: Mat::from_element(n, n, f64::NAN),
                b: Mat::from_element(n, p, f64::NAN),
                c: Mat::from_element(q, n, f64::NAN),
                d: Mat::from_element(q, p, f64::NAN),
            })
        }),
    )?)
}

/// Model, default schedule and frozen grid bundled in one file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleSpec,
    pub grid: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Example {
    pub model: LpvModel,
    pub schedule: ScheduleSpec,
    pub grid: Vec<usize>,
}

impl Example {
    pub fn from_config(cfg: ExampleConfig) -> Result<Self, LpvError> {
        let model = LpvModel::from_config(cfg.model)?;
        cfg.schedule.validate(&model)?;
        Ok(Self {
            model,
            schedule: cfg.schedule,
            grid: cfg.grid,
        })
    }
}

pub const EXAMPLES: [&str; 4] = ["harald", "scaled-lti", "rotated", "twopar"];

fn example_source(name: &str) -> Option<&'static str> {
    Some(match name {
        "harald" => include_str!("../models/harald.json"),
        "scaled-lti" => include_str!("../models/scaled-lti.json"),
        "rotated" => include_str!("../models/rotated.json"),
        "twopar" => include_str!("../models/twopar.json"),
        _ => return None,
    })
}

/// Period window used for the scaled-LTI example at rate bound `mu_bar`.
pub fn scaled_lti_period_window(mu_bar: f64) -> (f64, f64) {
    if mu_bar <= 0.4 {
        (0.5, 50.0)
    } else if mu_bar <= 0.7 {
        (0.5, 20.0)
    } else {
        (0.5, 6.0)
    }
}

/// Built-in example. `mu_bar` sets the rate bound of `scaled-lti`
/// (default 1.6) and is rejected for the others.
pub fn example(name: &str, mu_bar: Option<f64>) -> Result<Example, LpvError> {
    let src = example_source(name).ok_or_else(|| LpvError::UnknownExample(name.to_string()))?;
    let mut cfg: ExampleConfig =
        serde_json::from_str(src).map_err(|e| LpvError::Json(e.to_string()))?;
    if let Some(mu) = mu_bar {
        if name != "scaled-lti" {
            return Err(LpvError::InvalidSpec(format!("{name} has no adjustable rate bound")));
        }
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(LpvError::InvalidSpec(format!("rate bound {mu} must be positive")));
        }
        cfg.model.parameters[0].rate = [-mu, mu];
        cfg.schedule.patterns = vec![vec![mu, 0.0, -mu, 0.0, mu, 0.0]];
        let (lo, hi) = scaled_lti_period_window(mu);
        cfg.schedule.h_min = lo;
        cfg.schedule.h_max = hi;
    }
    Example::from_config(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pltv::{norm_bisect, pltv_norm, Epsilon, NormOptions};
    use proptest::prelude::*;

    fn single(pattern: Vec<f64>, range: [f64; 2], h: (f64, f64)) -> (LpvModel, ScheduleSpec) {
        let model = LpvModel::from_config(ModelConfig {
            name: "t".into(),
            parameters: vec![Parameter {
                name: "rho".into(),
                range,
                rate: [-1.0, 1.0],
            }],
            definitions: vec![],
            a: vec![vec![Entry::Text("-1 - 0.1*r1".into())]],
            b: vec![vec![Entry::Number(1.0)]],
            c: vec![vec![Entry::Text("r1".into())]],
            d: vec![vec![Entry::Number(0.0)]],
        })
        .unwrap();
        let spec = ScheduleSpec {
            patterns: vec![pattern],
            h_min: h.0,
            h_max: h.1,
        };
        (model, spec)
    }

    #[test]
    fn explicit_trajectory_values() {
        let (model, spec) = single(vec![1.0, 0.0, -1.0, 0.0], [0.0, 5.0], (1.0, 10.0));
        let tr = trajectory(&model, &spec, &[2.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(tr.period, 4.0);
        for (t, want) in [(0.0, 2.0), (1.0, 3.0), (2.0, 3.0), (3.0, 2.0), (4.0, 2.0), (0.5, 2.5)] {
            assert!((tr.value(t)[0] - want).abs() < 1e-15, "t={t}");
        }
        assert_eq!(tr.rate(0.5), vec![1.0]);
        assert_eq!(tr.rate(2.5), vec![-1.0]);
        assert_eq!(tr.breakpoints(), vec![1.0, 2.0, 3.0]);
        assert!((tr.value(5.0)[0] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn flat_pattern_is_constant() {
        let (model, spec) = single(vec![0.0, 0.0], [0.0, 5.0], (1.0, 10.0));
        let tr = trajectory(&model, &spec, &[1.5, 2.0, 3.0]).unwrap();
        for k in 0..50 {
            assert_eq!(tr.value(k as f64 * 0.1)[0], 1.5);
        }
    }

    #[test]
    fn constraint_counts() {
        let (model, spec) = single(vec![1.0, 0.0, -1.0, 0.0], [0.0, 5.0], (1.0, 10.0));
        let cons = constraint_set(&model, &spec).unwrap();
        assert_eq!(cons.ineq.nrows(), 10 + 2 + 4);
        assert_eq!(cons.eq.nrows(), 1);
        let range_rows = cons.ineq_labels.iter().filter(|l| l.contains("breakpoint")).count();
        assert_eq!(range_rows, 10);

        let ex = example("twopar", None).unwrap();
        let cons = constraint_set(&ex.model, &ex.schedule).unwrap();
        assert_eq!(cons.eq.nrows(), 3);
        assert_eq!(cons.dimension(), 7 + 8);
        assert!(cons.eq_labels.iter().any(|l| l.starts_with("common period")));
    }

    #[test]
    fn infeasible_decisions_are_reported() {
        let (model, spec) = single(vec![1.0, 0.0, -1.0, 0.0], [0.0, 5.0], (1.0, 10.0));
        // does not close
        let err = trajectory(&model, &spec, &[2.0, 1.0, 1.0, 2.0, 1.0]).unwrap_err();
        match err {
            LpvError::InfeasibleDecision(v) => assert!(v.iter().any(|s| s.contains("closure"))),
            e => panic!("{e}"),
        }
        // leaves the range
        assert!(trajectory(&model, &spec, &[4.5, 1.0, 1.0, 1.0, 1.0]).is_err());
        // period too short
        assert!(trajectory(&model, &spec, &[2.0, 0.2, 0.1, 0.2, 0.1]).is_err());
    }

    #[test]
    fn spec_validation() {
        let (model, _) = single(vec![1.0], [0.0, 5.0], (1.0, 10.0));
        let bad = |patterns: Vec<Vec<f64>>, h_min, h_max| ScheduleSpec { patterns, h_min, h_max };
        assert!(bad(vec![vec![1.0, 0.0]], 1.0, 2.0).validate(&model).is_err());
        assert!(bad(vec![vec![2.0, -1.0]], 1.0, 2.0).validate(&model).is_err());
        assert!(bad(vec![vec![1.0, -1.0]], 3.0, 2.0).validate(&model).is_err());
        assert!(bad(vec![vec![0.0, 0.0]], 1.0, 2.0).validate(&model).is_ok());
    }

    #[test]
    fn default_decisions_are_feasible() {
        for name in EXAMPLES {
            let ex = example(name, None).unwrap();
            let c = default_decision(&ex.model, &ex.schedule).unwrap();
            let tr = trajectory(&ex.model, &ex.schedule, &c).unwrap();
            assert!(tr.period >= ex.schedule.h_min && tr.period <= ex.schedule.h_max);
        }
        for mu in [0.1, 0.4, 0.7, 1.0, 2.0] {
            let ex = example("scaled-lti", Some(mu)).unwrap();
            let c = default_decision(&ex.model, &ex.schedule).unwrap();
            trajectory(&ex.model, &ex.schedule, &c).unwrap();
        }
    }

    #[test]
    fn registry_round_trip_and_errors() {
        let ex = example("rotated", None).unwrap();
        let back = LpvModel::from_json(&ex.model.to_json()).unwrap();
        let rho = [1.0];
        assert_eq!(ex.model.matrices(&rho).unwrap(), back.matrices(&rho).unwrap());
        assert!(matches!(example("nope", None), Err(LpvError::UnknownExample(_))));
        assert!(example("harald", Some(1.0)).is_err());
        let s = example("scaled-lti", Some(0.4)).unwrap();
        assert_eq!(s.schedule.h_max, 50.0);
        assert_eq!(s.model.parameters()[0].rate, [-0.4, 0.4]);
    }

    #[test]
    fn domain_errors_name_the_entry() {
        let ex = example("harald", None).unwrap();
        // K has a negative radicand below ρ = 8.6/4.8
        let err = ex.model.matrices(&[1.0]).unwrap_err();
        match err {
            LpvError::Domain { entry, .. } => assert!(entry.starts_with('A') || entry.starts_with('B')),
            e => panic!("{e}"),
        }
        assert!(freeze(&ex.model, &[1.0]).is_err());
    }

    #[test]
    fn rotated_matrix_is_similar_to_nominal() {
        let ex = example("rotated", None).unwrap();
        for rho in [0.8, 1.1, 1.5] {
            let a = ex.model.matrices(&[rho]).unwrap().a;
            let (c, s) = (f64::cos(rho), f64::sin(rho));
            let r = Mat::from_row_slice(2, 2, &[c, s, -s, c]);
            let a0 = Mat::from_row_slice(2, 2, &[-0.5, -0.4, 3.0, -0.5]);
            assert!((a - r.transpose() * a0 * r).amax() < 1e-14);
        }
    }

    #[test]
    fn frozen_bounds_of_examples() {
        let ex = example("harald", None).unwrap();
        let grid = uniform_grid(&ex.model, &ex.grid).unwrap();
        assert_eq!(grid.len(), 100);
        let fb = frozen_lower_bound(&ex.model, &grid, Execution::default()).unwrap();
        assert!((fb.gamma - 1.1066).abs() < 1e-3, "{}", fb.gamma);

        let ex = example("scaled-lti", None).unwrap();
        let grid = uniform_grid(&ex.model, &ex.grid).unwrap();
        let fb = frozen_lower_bound(&ex.model, &grid, Execution::Sequential).unwrap();
        assert!(fb.gamma.abs() < 1e-9);

        let ex = example("twopar", None).unwrap();
        let grid = uniform_grid(&ex.model, &ex.grid).unwrap();
        assert_eq!(grid.len(), 300);
        let fb = frozen_lower_bound(&ex.model, &grid, Execution::default()).unwrap();
        assert!(fb.gamma.abs() < 1e-9);
    }

    #[test]
    fn parallel_and_sequential_frozen_bounds_agree() {
        let ex = example("rotated", None).unwrap();
        let grid = uniform_grid(&ex.model, &ex.grid).unwrap();
        let a = frozen_lower_bound(&ex.model, &grid, Execution::Sequential).unwrap();
        let b = frozen_lower_bound(&ex.model, &grid, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_trajectory_matches_frozen_norm() {
        let ex = example("rotated", None).unwrap();
        let spec = ScheduleSpec {
            patterns: vec![vec![0.0, 0.0]],
            h_min: 1.0,
            h_max: 5.0,
        };
        let rho = 1.2;
        let tr = trajectory(&ex.model, &spec, &[rho, 1.0, 1.0]).unwrap();
        let sys = evaluate_along(&ex.model, &tr).unwrap();
        let frozen = ex.model.matrices(&[rho]).unwrap();
        for t in [0.0, 0.3, 1.7] {
            assert_eq!(sys.matrices(t), frozen);
        }
        let lti = freeze(&ex.model, &[rho]).unwrap();
        let exact = ltinorm::hinf_continuous(&lti, 1e-10).unwrap();
        let br = norm_bisect(&sys, 0.5 * exact, 2.0 * exact, Epsilon::Relative(1e-5), &NormOptions::default())
            .unwrap();
        assert!(br.lower <= exact * (1.0 + 1e-6) && exact <= br.upper * (1.0 + 1e-6), "{br:?} {exact}");
    }

    #[test]
    fn scaled_lti_moving_trajectory_has_positive_norm() {
        let ex = example("scaled-lti", Some(1.0)).unwrap();
        let c = default_decision(&ex.model, &ex.schedule).unwrap();
        let tr = trajectory(&ex.model, &ex.schedule, &c).unwrap();
        let sys = evaluate_along(&ex.model, &tr).unwrap();
        let br = pltv_norm(&sys, Epsilon::Relative(1e-3), &NormOptions::default()).unwrap();
        assert!(br.lower > 0.05 && br.upper < 0.5766, "{br:?}");
    }

    #[test]
    fn random_decisions_are_feasible_and_seeded() {
        use rand::SeedableRng;
        for name in EXAMPLES {
            let ex = example(name, None).unwrap();
            let mut r1 = rand_chacha::ChaCha8Rng::seed_from_u64(3);
            let mut r2 = rand_chacha::ChaCha8Rng::seed_from_u64(3);
            for _ in 0..20 {
                let c = random_decision(&ex.model, &ex.schedule, &mut r1).unwrap();
                assert_eq!(c, random_decision(&ex.model, &ex.schedule, &mut r2).unwrap());
                trajectory(&ex.model, &ex.schedule, &c).unwrap();
            }
        }
    }

    proptest! {
        #[test]
        fn feasible_decisions_close_and_stay_in_range(
            rho0 in 0.0f64..5.0,
            up in 0.0f64..2.0,
            flat1 in 0.0f64..3.0,
            flat2 in 0.0f64..3.0,
            t in 0.0f64..30.0,
        ) {
            let (model, spec) = single(vec![1.0, 0.0, -0.5, 0.0], [0.0, 5.0], (0.0001, 100.0));
            let c = [rho0, up, flat1, 2.0 * up, flat2];
            let cons = constraint_set(&model, &spec).unwrap();
            prop_assume!(cons.is_feasible(&c, FEAS_TOL));
            let tr = trajectory(&model, &spec, &c).unwrap();
            prop_assert!((tr.value(0.0)[0] - tr.value(tr.period)[0]).abs() <= 1e-12);
            let v = tr.value(t)[0];
            prop_assert!((-1e-12..=5.0 + 1e-12).contains(&v));
            let r = tr.rate(t)[0];
            prop_assert!([1.0, 0.0, -0.5].contains(&r));
        }
    }
}
