//! Lower bounds on the LPV gain by maximizing over periodic trajectories.
//!
//! The surrogate objective is `ν(c, γ̄) = ‖G_γ̄‖∞` of the discrete plant
//! built along the trajectory `ρ(·, c)`: `ν < 1` exactly when the PLTV norm
//! of that trajectory is below γ̄. Maximizing `ν` therefore pushes the
//! trajectory towards larger gains with a single Riccati pass per
//! evaluation instead of a full bisection.
//!
//! The optimizer is a generalized pattern search over the polytope of
//! feasible decision vectors. Equalities are removed by working in a
//! null-space parametrization; inequalities are handled by rejecting
//! infeasible poll points, with tangent-cone directions added for nearly
//! active constraints so the poll can slide along the boundary.

use nalgebra::{DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Mat};
use crate::lpv::{self, LinearConstraints, LpvError, LpvModel, ScheduleSpec, FEAS_TOL};
use crate::ltinorm::{self, LtiError};
use crate::par::{self, Execution};
use crate::pltv::{self, Epsilon, NormBracket, NormOptions, PltvError};

/// Value of `ν` standing in for "γ̄ is not an upper bound here".
pub const SENTINEL: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptError {
    #[error("starting point is infeasible: {}", .0.join("; "))]
    InfeasibleStart(Vec<String>),
    #[error("γ_ub = {gamma_ub} is below the norm of a feasible trajectory (period {h})")]
    InvalidUpperBound {
        gamma_ub: f64,
        h: f64,
        certificate: Vec<f64>,
    },
    #[error("invalid options: {0}")]
    InvalidOptions(String),
    #[error(transparent)]
    Lpv(#[from] LpvError),
    #[error(transparent)]
    Pltv(#[from] PltvError),
    #[error(transparent)]
    Lti(#[from] LtiError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OptOptions {
    /// Initial mesh size relative to the variable scales.
    pub initial_mesh: f64,
    pub contraction: f64,
    pub expansion: f64,
    /// Stop once the mesh falls below this (relative) size.
    pub min_mesh: f64,
    /// Evaluation budget of one pattern search.
    pub max_evaluations: usize,
    /// Improvements smaller than this count as no progress.
    pub stall_tol: f64,
    /// Consecutive successful polls with negligible gain before stopping.
    pub stall_iterations: usize,
    pub max_outer: usize,
    /// Extra random starting points for the single-optimization algorithm.
    pub restarts: usize,
    pub seed: u64,
    #[serde(skip)]
    pub execution: Execution,
    #[serde(skip)]
    pub norm: NormOptions,
    #[serde(skip)]
    pub epsilon: Epsilon,
}

impl Default for OptOptions {
    fn default() -> Self {
        Self {
            initial_mesh: 0.1,
            contraction: 0.5,
            expansion: 2.0,
            min_mesh: 1e-6,
            max_evaluations: 10_000,
            stall_tol: 1e-5,
            stall_iterations: 12,
            max_outer: 20,
            restarts: 0,
            seed: 0,
            execution: Execution::default(),
            norm: NormOptions::default(),
            epsilon: Epsilon::default(),
        }
    }
}

impl OptOptions {
    fn validate(&self) -> Result<(), OptError> {
        if !(self.contraction > 0.0 && self.contraction < 1.0) {
            return Err(OptError::InvalidOptions("contraction must lie in (0, 1)".into()));
        }
        if !(self.expansion > 1.0) {
            return Err(OptError::InvalidOptions("expansion must exceed 1".into()));
        }
        if !(self.initial_mesh > 0.0 && self.min_mesh > 0.0) {
            return Err(OptError::InvalidOptions("mesh sizes must be positive".into()));
        }
        if self.max_evaluations == 0 {
            return Err(OptError::InvalidOptions("evaluation budget must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchStop {
    MeshConverged,
    Stalled,
    Budget,
    /// A point reaching the abort level was found.
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub evaluations: usize,
    pub best: f64,
    pub mesh: f64,
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    pub trace: Vec<TracePoint>,
    pub stop: SearchStop,
}

/// Unit-length columns spanning `{d : M d = 0}`.
fn null_space(m: &Mat, dim: usize) -> Mat {
    if m.nrows() == 0 {
        return Mat::identity(dim, dim);
    }
    let eig = SymmetricEigen::new(m.transpose() * m);
    let top = eig.eigenvalues.amax().max(1.0);
    let cols: Vec<DVector<f64>> = (0..dim)
        .filter(|&i| eig.eigenvalues[i].abs() <= 1e-10 * top)
        .map(|i| eig.eigenvectors.column(i).into_owned())
        .collect();
    if cols.is_empty() {
        Mat::zeros(dim, 0)
    } else {
        Mat::from_columns(&cols)
    }
}

/// Directions generating the cone `{d : V d ≤ 0}`, or `None` if the rows
/// of `V` are linearly dependent.
fn cone_generators(v: &Mat) -> Option<Vec<DVector<f64>>> {
    let k = v.ncols();
    let gram = v * v.transpose();
    let inv = gram.clone().try_inverse()?;
    if linalg::condition_number(&gram) > 1e10 {
        return None;
    }
    let pinv = v.transpose() * inv;
    let mut dirs: Vec<DVector<f64>> = pinv.column_iter().map(|c| -c.into_owned()).collect();
    let ns = null_space(v, k);
    for c in ns.column_iter() {
        dirs.push(c.into_owned());
        dirs.push(-c.into_owned());
    }
    Some(dirs)
}

fn rows_matrix(rows: &[DVector<f64>]) -> Mat {
    Mat::from_rows(&rows.iter().map(|r| r.transpose()).collect::<Vec<_>>())
}

fn independent(rows: &[DVector<f64>]) -> bool {
    let v = rows_matrix(rows);
    let gram = &v * v.transpose();
    gram.clone().try_inverse().is_some() && linalg::condition_number(&gram) <= 1e10
}

/// Feasible directions of the cone `{d : r·d ≤ 0 for all rows}`.
///
/// Parallel rows are merged first. If the rest are still dependent (a
/// degenerate vertex), generators of cones cut by greedy independent
/// subsets are collected and those leaving the full cone are dropped.
fn tangent_directions(rows: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let mut unit: Vec<DVector<f64>> = Vec::new();
    for r in rows {
        let r = r / r.norm();
        if unit.iter().all(|u| (u - &r).amax() > 1e-9) {
            unit.push(r);
        }
    }
    if let Some(gens) = cone_generators(&rows_matrix(&unit)) {
        return gens;
    }
    let inside = |d: &DVector<f64>| unit.iter().all(|u| u.dot(d) <= 1e-9 * d.norm());
    let m = unit.len();
    let mut dirs = Vec::new();
    for start in 0..m {
        let mut subset: Vec<DVector<f64>> = Vec::new();
        for i in (0..m).map(|j| (j + start) % m) {
            subset.push(unit[i].clone());
            if !independent(&subset) {
                subset.pop();
            }
        }
        if let Some(gens) = cone_generators(&rows_matrix(&subset)) {
            for d in gens.into_iter().filter(|d| inside(d)) {
                push_unique(&mut dirs, d);
            }
        }
    }
    dirs
}

fn push_unique(dirs: &mut Vec<DVector<f64>>, d: DVector<f64>) {
    let n = d.norm();
    if n < 1e-12 {
        return;
    }
    let d = d / n;
    if dirs.iter().all(|e| (e - &d).amax() > 1e-9) {
        dirs.push(d);
    }
}

/// Maximize `objective` over `constraints` from the feasible point `x0`.
///
/// Variables are divided by `scales` before polling so that mesh sizes are
/// comparable across coordinates. If `abort_at` is set, the search stops at
/// the first evaluated point whose value reaches it (lowest poll index in
/// case of several).
pub fn pattern_search<F>(
    objective: F,
    constraints: &LinearConstraints,
    x0: &[f64],
    scales: &[f64],
    abort_at: Option<f64>,
    opts: &OptOptions,
) -> Result<SearchResult, OptError>
where
    F: Fn(&[f64]) -> f64 + Sync + Send,
{
    opts.validate()?;
    let dim = constraints.dimension();
    assert_eq!(scales.len(), dim);
    let tol = FEAS_TOL * (1.0 + x0.iter().fold(0.0f64, |a, v| a.max(v.abs())));
    let bad = constraints.violations(x0, tol);
    if !bad.is_empty() || x0.len() != dim {
        return Err(OptError::InfeasibleStart(bad));
    }
    let s = DVector::from_column_slice(scales);
    let to_x = |u: &DVector<f64>| -> Vec<f64> { u.component_mul(&s).iter().copied().collect() };
    let value = |v: f64| if v.is_nan() { f64::NEG_INFINITY } else { v };

    // scaled constraints: (G S) u ≤ g, (E S) u = e
    let sdiag = Mat::from_diagonal(&s);
    let g = &constraints.ineq * &sdiag;
    let basis = null_space(&(&constraints.eq * &sdiag), dim);
    let gy = &g * &basis;
    let row_norms: Vec<f64> = gy.row_iter().map(|r| r.norm()).collect();

    let mut u = DVector::from_iterator(dim, x0.iter().zip(scales).map(|(x, s)| x / s));
    let mut best = value(objective(x0));
    let mut evaluations = 1usize;
    let mut mesh = opts.initial_mesh;
    let mut trace = vec![TracePoint {
        iteration: 0,
        evaluations,
        best,
        mesh,
    }];
    if abort_at.is_some_and(|a| best >= a) {
        return Ok(SearchResult {
            x: x0.to_vec(),
            value: best,
            evaluations,
            trace,
            stop: SearchStop::Aborted,
        });
    }
    let k = basis.ncols();
    let mut stall = 0usize;
    let mut iteration = 0usize;
    let stop = loop {
        if mesh < opts.min_mesh || k == 0 {
            break SearchStop::MeshConverged;
        }
        if evaluations >= opts.max_evaluations {
            break SearchStop::Budget;
        }
        if stall >= opts.stall_iterations {
            break SearchStop::Stalled;
        }
        iteration += 1;

        // coordinate directions of the null space plus tangent-cone
        // generators of ε-active inequalities
        let mut dirs: Vec<DVector<f64>> = Vec::with_capacity(2 * k);
        for i in 0..k {
            let mut e = DVector::zeros(k);
            e[i] = 1.0;
            dirs.push(e.clone());
            dirs.push(-e);
        }
        let slack = &constraints.ineq_rhs - &g * &u;
        let active: Vec<usize> = (0..gy.nrows())
            .filter(|&r| row_norms[r] > 1e-12 && slack[r] <= mesh * row_norms[r])
            .collect();
        if !active.is_empty() {
            let rows: Vec<DVector<f64>> = active.iter().map(|&r| gy.row(r).transpose()).collect();
            for d in tangent_directions(&rows) {
                push_unique(&mut dirs, d);
            }
        }

        let candidates: Vec<DVector<f64>> = dirs
            .iter()
            .map(|d| &u + &basis * d * mesh)
            .filter(|cand| constraints.is_feasible(&to_x(cand), tol))
            .collect();
        let budget = opts.max_evaluations - evaluations;
        let candidates = &candidates[..candidates.len().min(budget)];
        let values = par::map(opts.execution, candidates, |cand| value(objective(&to_x(cand))));
        evaluations += candidates.len();

        if let Some(a) = abort_at {
            if let Some(i) = values.iter().position(|&v| v >= a) {
                u = candidates[i].clone();
                best = values[i];
                trace.push(TracePoint {
                    iteration,
                    evaluations,
                    best,
                    mesh,
                });
                break SearchStop::Aborted;
            }
        }

        let mut pick: Option<usize> = None;
        for (i, &v) in values.iter().enumerate() {
            if v > best && pick.is_none_or(|j| v > values[j]) {
                pick = Some(i);
            }
        }
        match pick {
            Some(i) => {
                let gain = values[i] - best;
                u = candidates[i].clone();
                best = values[i];
                mesh *= opts.expansion;
                mesh = mesh.min(1.0);
                if gain < opts.stall_tol * best.abs().max(1.0) {
                    stall += 1;
                } else {
                    stall = 0;
                }
            }
            None => mesh *= opts.contraction,
        }
        trace.push(TracePoint {
            iteration,
            evaluations,
            best,
            mesh,
        });
    };
    Ok(SearchResult {
        x: to_x(&u),
        value: best,
        evaluations,
        trace,
        stop,
    })
}

/// Outcome of one `ν` evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NuValue {
    /// `‖G_γ̄‖∞`; below one certifies the trajectory norm is below γ̄.
    Gain(f64),
    /// `A_γ̄` is not Schur stable.
    Unstable(f64),
    /// Riccati solution escaped.
    Escape,
}

impl NuValue {
    pub fn value(self) -> f64 {
        match self {
            NuValue::Gain(v) => v,
            NuValue::Unstable(_) | NuValue::Escape => SENTINEL,
        }
    }
}

fn nu_detail_inner(
    model: &LpvModel,
    spec: &ScheduleSpec,
    c: &[f64],
    gamma_bar: f64,
    opts: &NormOptions,
) -> Result<NuValue, OptError> {
    let traj = lpv::trajectory(model, spec, c)?;
    let sys = lpv::evaluate_along(model, &traj)?;
    let plant = match pltv::lifted_plant(&sys, gamma_bar, opts) {
        Ok(p) => p,
        Err(PltvError::RiccatiEscape { .. }) => return Ok(NuValue::Escape),
        Err(PltvError::FeedthroughTooLarge { .. }) => return Ok(NuValue::Unstable(f64::INFINITY)),
        Err(e) => return Err(e.into()),
    };
    let radius = linalg::spectral_radius(&plant.a).ok_or(LtiError::EigenFailure)?;
    if radius >= 1.0 - 1e-10 {
        return Ok(NuValue::Unstable(radius));
    }
    Ok(NuValue::Gain(ltinorm::hinf_discrete(&plant.as_lti(), opts.hinf_tol)?))
}

pub fn nu_detail(
    model: &LpvModel,
    spec: &ScheduleSpec,
    c: &[f64],
    gamma_bar: f64,
    opts: &NormOptions,
) -> Result<NuValue, OptError> {
    nu_detail_inner(model, spec, c, gamma_bar, opts)
}

/// `ν(c, γ̄)`, with [`SENTINEL`] on escape or an unstable plant.
pub fn nu(
    model: &LpvModel,
    spec: &ScheduleSpec,
    c: &[f64],
    gamma_bar: f64,
    opts: &NormOptions,
) -> Result<f64, OptError> {
    nu_detail(model, spec, c, gamma_bar, opts).map(NuValue::value)
}

/// Variable scales: range widths for offsets, `h_max` for segment lengths.
pub fn decision_scales(model: &LpvModel, spec: &ScheduleSpec) -> Vec<f64> {
    let mut s = Vec::with_capacity(spec.dimension());
    for (pat, par) in spec.patterns.iter().zip(model.parameters()) {
        s.push(par.range[1] - par.range[0]);
        s.extend(std::iter::repeat_n(spec.h_max, pat.len()));
    }
    s
}

fn search_nu(
    model: &LpvModel,
    spec: &ScheduleSpec,
    c0: &[f64],
    gamma_bar: f64,
    opts: &OptOptions,
) -> Result<SearchResult, OptError> {
    let cons = lpv::constraint_set(model, spec)?;
    let scales = decision_scales(model, spec);
    let objective = |c: &[f64]| match nu(model, spec, c, gamma_bar, &opts.norm) {
        Ok(v) => v,
        Err(e) => {
            log::warn!("ν evaluation failed, point rejected: {e}");
            f64::NEG_INFINITY
        }
    };
    pattern_search(objective, &cons, c0, &scales, Some(1.0), opts)
}

/// Norm bracket of the trajectory `c`; `upper_hint` seeds the upper end.
pub fn trajectory_norm(
    model: &LpvModel,
    spec: &ScheduleSpec,
    c: &[f64],
    upper_hint: Option<f64>,
    opts: &OptOptions,
) -> Result<NormBracket, OptError> {
    let traj = lpv::trajectory(model, spec, c)?;
    let sys = lpv::evaluate_along(model, &traj)?;
    let lo = sys.feedthrough_bound();
    let hi = upper_hint.unwrap_or((2.0 * lo).max(1.0));
    Ok(pltv::norm_bisect(&sys, lo, hi, opts.epsilon, &opts.norm)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    /// `ν` stayed below one: γ̄ bounded every trajectory visited.
    CaseA,
    /// Outer loop cap reached.
    OuterLimit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RestartCase {
    /// `ν ≥ 1` with a stable plant, or `A_γ̄` unstable.
    CaseB,
    /// Riccati escape.
    CaseC,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartEvent {
    pub outer: usize,
    pub case: RestartCase,
    pub gamma_bar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowerBoundResult {
    pub gamma_lb: f64,
    pub bracket: NormBracket,
    pub c_star: Vec<f64>,
    pub h_star: f64,
    pub trace: Vec<TracePoint>,
    pub termination: Termination,
    pub search_stop: SearchStop,
    pub restarts: Vec<RestartEvent>,
    pub outer_iterations: usize,
    pub evaluations: usize,
}

fn period_of(spec: &ScheduleSpec, c: &[f64]) -> f64 {
    c[1..=spec.patterns[0].len()].iter().sum()
}

/// Outer loop with restarts: bisect at the current trajectory, maximize
/// `ν` at the resulting γ̄, restart whenever a trajectory exceeding γ̄
/// turns up, and finish with a bisection once `ν` stays below one.
pub fn algorithm_one(
    model: &LpvModel,
    spec: &ScheduleSpec,
    c0: &[f64],
    opts: &OptOptions,
) -> Result<LowerBoundResult, OptError> {
    opts.validate()?;
    let mut c = c0.to_vec();
    let mut bracket = trajectory_norm(model, spec, &c, None, opts)?;
    let mut trace = Vec::new();
    let mut restarts = Vec::new();
    let mut evaluations = 0usize;
    let mut offset = 0usize;
    for outer in 1..=opts.max_outer.max(1) {
        let gamma_bar = bracket.upper;
        let search = search_nu(model, spec, &c, gamma_bar, opts)?;
        evaluations += search.evaluations;
        trace.extend(search.trace.iter().map(|t| TracePoint {
            iteration: t.iteration + offset,
            ..*t
        }));
        offset = trace.last().map_or(0, |t| t.iteration + 1);
        c = search.x.clone();
        if search.stop == SearchStop::Aborted {
            let case = match nu_detail(model, spec, &c, gamma_bar, &opts.norm)? {
                NuValue::Escape => RestartCase::CaseC,
                _ => RestartCase::CaseB,
            };
            restarts.push(RestartEvent {
                outer,
                case,
                gamma_bar,
            });
            log::info!("outer iteration {outer}: {case:?} at γ̄ = {gamma_bar}, restarting");
            bracket = trajectory_norm(model, spec, &c, Some(gamma_bar * 1.5), opts)?;
            continue;
        }
        let final_bracket = trajectory_norm(model, spec, &c, Some(gamma_bar), opts)?;
        return Ok(LowerBoundResult {
            gamma_lb: final_bracket.lower,
            h_star: period_of(spec, &c),
            bracket: final_bracket,
            c_star: c,
            trace,
            termination: Termination::CaseA,
            search_stop: search.stop,
            restarts,
            outer_iterations: outer,
            evaluations,
        });
    }
    Ok(LowerBoundResult {
        gamma_lb: bracket.lower,
        h_star: period_of(spec, &c),
        bracket,
        c_star: c,
        trace,
        termination: Termination::OuterLimit,
        search_stop: SearchStop::Aborted,
        restarts,
        outer_iterations: opts.max_outer.max(1),
        evaluations,
    })
}

fn single_run(
    model: &LpvModel,
    spec: &ScheduleSpec,
    gamma_ub: f64,
    c0: &[f64],
    opts: &OptOptions,
) -> Result<LowerBoundResult, OptError> {
    let search = search_nu(model, spec, c0, gamma_ub, opts)?;
    if search.stop == SearchStop::Aborted {
        return Err(OptError::InvalidUpperBound {
            gamma_ub,
            h: period_of(spec, &search.x),
            certificate: search.x,
        });
    }
    let bracket = trajectory_norm(model, spec, &search.x, Some(gamma_ub), opts)?;
    Ok(LowerBoundResult {
        gamma_lb: bracket.lower,
        h_star: period_of(spec, &search.x),
        bracket,
        c_star: search.x,
        trace: search.trace,
        termination: Termination::CaseA,
        search_stop: search.stop,
        restarts: Vec::new(),
        outer_iterations: 1,
        evaluations: search.evaluations,
    })
}

/// Single maximization of `ν(·, γ_ub)` followed by one bisection. With
/// `opts.restarts > 0`, additional seeded random starts are tried and the
/// best bound is kept.
pub fn algorithm_two(
    model: &LpvModel,
    spec: &ScheduleSpec,
    gamma_ub: f64,
    c0: &[f64],
    opts: &OptOptions,
) -> Result<LowerBoundResult, OptError> {
    opts.validate()?;
    if !(gamma_ub > 0.0 && gamma_ub.is_finite()) {
        return Err(OptError::InvalidOptions(format!("γ_ub = {gamma_ub} must be positive")));
    }
    let mut best = single_run(model, spec, gamma_ub, c0, opts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.restarts {
        let start = lpv::random_decision(model, spec, &mut rng)?;
        let run = single_run(model, spec, gamma_ub, &start, opts)?;
        let evaluations = best.evaluations + run.evaluations;
        if run.gamma_lb > best.gamma_lb {
            best = run;
        }
        best.evaluations = evaluations;
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lpv::{example, Entry, ModelConfig, Parameter};

    fn box_constraints(lo: &[f64], hi: &[f64]) -> LinearConstraints {
        let d = lo.len();
        let mut ineq = Mat::zeros(2 * d, d);
        let mut rhs = DVector::zeros(2 * d);
        for i in 0..d {
            ineq[(2 * i, i)] = 1.0;
            rhs[2 * i] = hi[i];
            ineq[(2 * i + 1, i)] = -1.0;
            rhs[2 * i + 1] = -lo[i];
        }
        LinearConstraints {
            ineq,
            ineq_rhs: rhs,
            ineq_labels: (0..2 * d).map(|i| format!("row {i}")).collect(),
            eq: Mat::zeros(0, d),
            eq_rhs: DVector::zeros(0),
            eq_labels: vec![],
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]

        #[test]
        fn iterates_stay_feasible_and_improve(
            target in proptest::collection::vec(-0.5f64..1.5, 3),
            start in proptest::collection::vec(0.05f64..0.95, 3),
        ) {
            // box [0,1]³ plus x0 + x1 = const through the start
            let mut cons = box_constraints(&[0.0; 3], &[1.0; 3]);
            let x0 = start;
            let sum = x0[0] + x0[1];
            cons.eq = Mat::from_row_slice(1, 3, &[1.0, 1.0, 0.0]);
            cons.eq_rhs = DVector::from_element(1, sum);
            cons.eq_labels = vec!["sum".into()];
            let seen = std::sync::Mutex::new(Vec::new());
            let f = |x: &[f64]| {
                seen.lock().unwrap().push(x.to_vec());
                -x.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            };
            let opts = OptOptions { max_evaluations: 400, ..OptOptions::default() };
            let r = pattern_search(f, &cons, &x0, &[1.0; 3], None, &opts).unwrap();
            for x in seen.lock().unwrap().iter() {
                proptest::prop_assert!(cons.is_feasible(x, 1e-9), "{:?}", x);
            }
            for pair in r.trace.windows(2) {
                proptest::prop_assert!(pair[1].best >= pair[0].best);
            }
            proptest::prop_assert!(r.value >= f(&x0) - 1e-15);
        }
    }

    #[test]
    fn quadratic_interior_optimum() {
        let cons = box_constraints(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]);
        let target = [0.3, 0.71, 0.5];
        let f = |x: &[f64]| -x.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let opts = OptOptions {
            max_evaluations: 10_000,
            stall_iterations: 100,
            ..OptOptions::default()
        };
        let r = pattern_search(f, &cons, &[0.9, 0.1, 0.2], &[1.0; 3], None, &opts).unwrap();
        for (x, t) in r.x.iter().zip(&target) {
            assert!((x - t).abs() < 1e-4, "{:?}", r.x);
        }
        for w in r.trace.windows(2) {
            assert!(w[1].best >= w[0].best);
        }
    }

    #[test]
    fn linear_objective_reaches_vertex() {
        let cons = box_constraints(&[-1.0, 0.0], &[2.0, 3.0]);
        let f = |x: &[f64]| x[0] - 2.0 * x[1];
        let r = pattern_search(f, &cons, &[0.0, 1.0], &[1.0; 2], None, &OptOptions::default()).unwrap();
        assert!((r.x[0] - 2.0).abs() < 1e-5 && r.x[1].abs() < 1e-5, "{:?}", r.x);
    }

    #[test]
    fn equality_constrained_search_slides_along_simplex_edge() {
        // maximize x0 + 2 x1 on x0 + x1 + x2 = 1, x ≥ 0, x1 ≤ 0.6
        let mut cons = box_constraints(&[0.0, 0.0, 0.0], &[10.0, 0.6, 10.0]);
        cons.eq = Mat::from_row_slice(1, 3, &[1.0, 1.0, 1.0]);
        cons.eq_rhs = DVector::from_element(1, 1.0);
        cons.eq_labels = vec!["sum".into()];
        let f = |x: &[f64]| x[0] + 2.0 * x[1];
        let r = pattern_search(f, &cons, &[0.2, 0.2, 0.6], &[1.0; 3], None, &OptOptions::default())
            .unwrap();
        assert!((r.x[0] - 0.4).abs() < 1e-5 && (r.x[1] - 0.6).abs() < 1e-5, "{:?}", r.x);
        assert!(cons.is_feasible(&r.x, 1e-9));
    }

    #[test]
    fn infeasible_start_and_bad_options() {
        let cons = box_constraints(&[0.0], &[1.0]);
        let f = |x: &[f64]| x[0];
        assert!(matches!(
            pattern_search(f, &cons, &[2.0], &[1.0], None, &OptOptions::default()),
            Err(OptError::InfeasibleStart(_))
        ));
        let bad = OptOptions {
            contraction: 1.5,
            ..OptOptions::default()
        };
        assert!(pattern_search(f, &cons, &[0.5], &[1.0], None, &bad).is_err());
    }

    #[test]
    fn every_evaluated_point_is_feasible() {
        use std::sync::Mutex;
        let mut cons = box_constraints(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]);
        cons.eq = Mat::from_row_slice(1, 3, &[1.0, -1.0, 0.5]);
        cons.eq_rhs = DVector::from_element(1, 0.0);
        cons.eq_labels = vec!["tie".into()];
        let seen = Mutex::new(Vec::new());
        let f = |x: &[f64]| {
            seen.lock().unwrap().push(x.to_vec());
            (x[0] * 3.0).sin() + x[2]
        };
        pattern_search(f, &cons, &[0.2, 0.3, 0.2], &[1.0; 3], None, &OptOptions::default()).unwrap();
        for x in seen.into_inner().unwrap() {
            assert!(cons.is_feasible(&x, 1e-9), "{x:?}");
        }
    }

    #[test]
    fn abort_stops_at_first_hit() {
        let cons = box_constraints(&[0.0], &[10.0]);
        let f = |x: &[f64]| x[0];
        let r = pattern_search(f, &cons, &[0.5], &[10.0], Some(1.0), &OptOptions::default()).unwrap();
        assert_eq!(r.stop, SearchStop::Aborted);
        assert!(r.value >= 1.0);
    }

    #[test]
    fn parallel_and_sequential_searches_agree() {
        let cons = box_constraints(&[0.0, 0.0], &[1.0, 1.0]);
        let f = |x: &[f64]| (5.0 * x[0]).sin() * (3.0 * x[1]).cos();
        let mut opts = OptOptions {
            execution: Execution::Sequential,
            ..OptOptions::default()
        };
        let a = pattern_search(f, &cons, &[0.5, 0.5], &[1.0; 2], None, &opts).unwrap();
        opts.execution = Execution::Parallel;
        let b = pattern_search(f, &cons, &[0.5, 0.5], &[1.0; 2], None, &opts).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.trace, b.trace);
    }

    fn cheap_opts() -> OptOptions {
        OptOptions {
            max_evaluations: 300,
            epsilon: Epsilon::Relative(1e-3),
            ..OptOptions::default()
        }
    }

    #[test]
    fn nu_is_below_one_above_the_norm_and_zero_for_constant_scaled_lti() {
        let ex = example("scaled-lti", Some(1.0)).unwrap();
        let c = lpv::default_decision(&ex.model, &ex.schedule).unwrap();
        let br = trajectory_norm(&ex.model, &ex.schedule, &c, None, &cheap_opts()).unwrap();
        let v = nu(&ex.model, &ex.schedule, &c, br.upper * 1.01, &NormOptions::default()).unwrap();
        assert!(v < 1.0);
        let v = nu(&ex.model, &ex.schedule, &c, br.lower * 0.8, &NormOptions::default()).unwrap();
        assert!(v >= 1.0);

        let flat = ScheduleSpec {
            patterns: vec![vec![0.0, 0.0]],
            h_min: 0.5,
            h_max: 6.0,
        };
        let v = nu(&ex.model, &flat, &[0.3, 1.0, 1.0], 0.5, &NormOptions::default()).unwrap();
        assert!(v.abs() < 1e-9, "{v}");
    }

    #[test]
    fn algorithm_two_improves_on_the_start() {
        let ex = example("scaled-lti", Some(1.0)).unwrap();
        let c0 = lpv::default_decision(&ex.model, &ex.schedule).unwrap();
        let opts = cheap_opts();
        let start = trajectory_norm(&ex.model, &ex.schedule, &c0, None, &opts).unwrap();
        let r = algorithm_two(&ex.model, &ex.schedule, 0.5766, &c0, &opts).unwrap();
        assert!(r.gamma_lb >= start.lower, "{} < {}", r.gamma_lb, start.lower);
        assert!(r.gamma_lb <= 0.5766);
        lpv::trajectory(&ex.model, &ex.schedule, &r.c_star).unwrap();
    }

    #[test]
    fn algorithm_two_rejects_low_upper_bound() {
        let ex = example("scaled-lti", Some(1.0)).unwrap();
        let c0 = lpv::default_decision(&ex.model, &ex.schedule).unwrap();
        let err = algorithm_two(&ex.model, &ex.schedule, 0.2, &c0, &cheap_opts()).unwrap_err();
        assert!(matches!(err, OptError::InvalidUpperBound { .. }), "{err}");
    }

    #[test]
    fn algorithm_one_from_constant_start_finds_positive_gain() {
        let ex = example("scaled-lti", Some(1.0)).unwrap();
        // a trajectory that barely moves
        let c0 = vec![0.0, 0.01, 2.0, 0.01, 1.0, 0.0, 1.0];
        let opts = cheap_opts();
        let start = trajectory_norm(&ex.model, &ex.schedule, &c0, None, &opts).unwrap();
        let r = algorithm_one(&ex.model, &ex.schedule, &c0, &opts).unwrap();
        assert!(r.gamma_lb > start.upper, "{} vs {:?}", r.gamma_lb, start);
        assert!(!r.restarts.is_empty());
    }

    #[test]
    fn algorithm_one_with_budget_one_returns_start_bracket() {
        let ex = example("scaled-lti", Some(1.0)).unwrap();
        let c0 = lpv::default_decision(&ex.model, &ex.schedule).unwrap();
        let opts = OptOptions {
            max_evaluations: 1,
            ..cheap_opts()
        };
        let start = trajectory_norm(&ex.model, &ex.schedule, &c0, None, &opts).unwrap();
        let r = algorithm_one(&ex.model, &ex.schedule, &c0, &opts).unwrap();
        assert_eq!(r.c_star, c0);
        assert_eq!(r.outer_iterations, 1);
        assert!((r.gamma_lb - start.lower).abs() <= 2.0 * start.tolerance);
    }

    #[test]
    fn restarts_are_reproducible() {
        let ex = example("scaled-lti", Some(1.6)).unwrap();
        let c0 = lpv::default_decision(&ex.model, &ex.schedule).unwrap();
        let opts = OptOptions {
            restarts: 2,
            seed: 11,
            max_evaluations: 60,
            ..cheap_opts()
        };
        let a = algorithm_two(&ex.model, &ex.schedule, 0.6924, &c0, &opts).unwrap();
        let b = algorithm_two(&ex.model, &ex.schedule, 0.6924, &c0, &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scales_follow_layout() {
        let model = LpvModel::from_config(ModelConfig {
            name: "s".into(),
            parameters: vec![
                Parameter { name: "a".into(), range: [0.0, 2.0], rate: [-1.0, 1.0] },
                Parameter { name: "b".into(), range: [-1.0, 3.0], rate: [-1.0, 1.0] },
            ],
            definitions: vec![],
            a: vec![vec![Entry::Number(-1.0)]],
            b: vec![vec![Entry::Number(1.0)]],
            c: vec![vec![Entry::Number(1.0)]],
            d: vec![vec![Entry::Number(0.0)]],
        })
        .unwrap();
        let spec = ScheduleSpec {
            patterns: vec![vec![1.0, -1.0], vec![0.0]],
            h_min: 1.0,
            h_max: 4.0,
        };
        assert_eq!(decision_scales(&model, &spec), vec![2.0, 4.0, 4.0, 4.0, 4.0]);
    }
}
