//! Worst-case input synthesis.
//!
//! The Hamiltonian monodromy is rebuilt from the discrete plant without
//! integrating the (unstable) Hamiltonian system:
//!
//! ```text
//! Q = [[A⁻ᵀ,        −A⁻ᵀ CᵀC         ],
//!      [BBᵀ A⁻ᵀ,    A − BBᵀ A⁻ᵀ CᵀC  ]]      (A, B, C of the plant)
//! Q̃ = T⁻¹ Q T,   T = [[0, I], [γI, 0]]
//! ```
//!
//! `Q̃` is the monodromy of `ẽ = [x; x̂]` under `H̃`. For a unit-modulus
//! eigenpair `(λ, v)` of `Q̃`, the trajectory started at `v` produces an
//! input/output pair with `‖z‖ = γ‖w‖` over every period. Extending it by
//! `λᵏ`, truncating after `K` periods and taking the real part yields an
//! input whose gain approaches γ.

use nalgebra::DVector;
use num_complex::Complex64;
use thiserror::Error;

use crate::linalg::{self, Mat};
use crate::odeint::{self, IntegrateOptions, OdeError, Tolerances};
use crate::pltv::{self, DiscretePlant, NormOptions, PeriodicSystem, PltvError};

pub const MAX_PERIOD: f64 = 200.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WcError {
    #[error("A_γ is numerically singular (condition number {condition:.3e})")]
    SingularAgamma { condition: f64 },
    #[error("no eigenvalue on the unit circle (closest modulus {closest_modulus}); γ is above the norm")]
    NoUnitEigenvalue { closest_modulus: f64 },
    #[error("period {h} exceeds the cap of {MAX_PERIOD}")]
    PeriodTooLong { h: f64 },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("eigen decomposition failed")]
    EigenFailure,
    #[error(transparent)]
    Integration(#[from] OdeError),
    #[error(transparent)]
    Pltv(#[from] PltvError),
}

/// `Q` and `Q̃ = T⁻¹QT` at level γ.
#[derive(Debug, Clone)]
pub struct MonodromyPair {
    pub gamma: f64,
    pub q: Mat,
    pub q_tilde: Mat,
    pub t: Mat,
    /// Condition number of `A_γ` (1 when built by direct integration).
    pub condition: f64,
}

fn transformation(n: usize, gamma: f64) -> (Mat, Mat) {
    let i = Mat::identity(n, n);
    let z = Mat::zeros(n, n);
    let t = linalg::block2(&z, &i, &(&i * gamma), &z);
    let tinv = linalg::block2(&z, &(&i / gamma), &i, &z);
    (t, tinv)
}

pub fn reconstruct_monodromy(plant: &DiscretePlant) -> Result<MonodromyPair, WcError> {
    let n = plant.a.nrows();
    let condition = linalg::condition_number(&plant.a);
    if !(condition <= 1e12) {
        return Err(WcError::SingularAgamma { condition });
    }
    let ait = plant
        .a
        .clone()
        .try_inverse()
        .ok_or(WcError::SingularAgamma { condition })?
        .transpose();
    let q12 = -(&ait * &plant.ctc);
    let q21 = &plant.bbt * &ait;
    let q22 = &plant.a - &plant.bbt * &ait * &plant.ctc;
    let q = linalg::block2(&ait, &q12, &q21, &q22);
    let (t, tinv) = transformation(n, plant.gamma);
    let q_tilde = &tinv * &q * &t;
    Ok(MonodromyPair {
        gamma: plant.gamma,
        q,
        q_tilde,
        t,
        condition,
    })
}

impl MonodromyPair {
    /// Integrate the transformed Hamiltonian directly over one period.
    /// Used when the Riccati route is unavailable (escape).
    pub fn integrate(sys: &PeriodicSystem, gamma: f64, tol: Tolerances) -> Result<Self, WcError> {
        let n = sys.dims().0;
        let field = pltv::build_hamiltonian(sys, gamma)?;
        let opts = IntegrateOptions::default()
            .with_tol(tol)
            .with_breakpoints(sys.breakpoints().to_vec())
            .with_escape_threshold(1e300);
        let q_tilde = odeint::integrate(
            |t, e| field.transformed(t) * e,
            Mat::identity(2 * n, 2 * n),
            (0.0, sys.period()),
            &opts,
        )?
        .final_state()
        .clone();
        let (t, tinv) = transformation(n, gamma);
        let q = &t * &q_tilde * &tinv;
        Ok(Self {
            gamma,
            q,
            q_tilde,
            t,
            condition: 1.0,
        })
    }

    /// `‖QᵀJQ − J‖_F`.
    pub fn symplectic_residual(&self) -> f64 {
        symplectic_residual(&self.q)
    }
}

pub fn symplectic_residual(q: &Mat) -> f64 {
    let j = linalg::symplectic_j(q.nrows() / 2);
    (q.transpose() * &j * q - j).norm()
}

#[derive(Debug, Clone)]
pub struct UnitEigenpair {
    pub lambda: Complex64,
    /// Unit Euclidean norm; phase fixed so the largest entry is real positive.
    pub v: DVector<Complex64>,
    /// `||λ| − 1|`.
    pub modulus_gap: f64,
    /// Whether another eigenvalue was equally close to the circle.
    pub tie_broken: bool,
}

/// Eigenpair of `Q̃` closest to the unit circle. Ties (gaps within 1e-9)
/// go to the smallest phase `|arg λ|`, then to `Im λ ≥ 0`.
pub fn unit_eigenpair(mp: &MonodromyPair, unit_tol: f64) -> Result<UnitEigenpair, WcError> {
    let ev = linalg::eigenvalues(&mp.q_tilde).ok_or(WcError::EigenFailure)?;
    let gap = |z: &Complex64| (z.norm() - 1.0).abs();
    let best_gap = ev.iter().map(gap).fold(f64::INFINITY, f64::min);
    if !(best_gap <= unit_tol) {
        let closest = ev
            .iter()
            .min_by(|a, b| gap(a).partial_cmp(&gap(b)).unwrap())
            .map(|z| z.norm())
            .unwrap_or(f64::NAN);
        return Err(WcError::NoUnitEigenvalue {
            closest_modulus: closest,
        });
    }
    let mut tied: Vec<Complex64> = ev
        .iter()
        .copied()
        .filter(|z| gap(z) <= best_gap + 1e-9)
        .collect();
    let tie_broken = tied.len() > 1;
    tied.sort_by(|a, b| {
        let ka = (a.arg().abs(), a.im < 0.0);
        let kb = (b.arg().abs(), b.im < 0.0);
        ka.partial_cmp(&kb).unwrap()
    });
    let lambda = tied[0];
    let mut v = linalg::eigenvector(&mp.q_tilde, lambda).ok_or(WcError::EigenFailure)?;
    let (imax, _) = v
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.norm().partial_cmp(&b.1.norm()).unwrap())
        .unwrap();
    let phase = v[imax].conj() / v[imax].norm();
    v *= phase;
    v /= Complex64::new(v.norm(), 0.0);
    Ok(UnitEigenpair {
        lambda,
        v,
        modulus_gap: gap(&lambda),
        tie_broken,
    })
}

#[derive(Debug, Clone)]
pub struct WorstCaseSignals {
    pub dt: f64,
    pub times: Vec<f64>,
    /// One row per sample, `p` columns.
    pub w: Mat,
    /// One row per sample, `q` columns.
    pub z: Mat,
    /// Phase factor between periods; 1 for an escape-window input.
    pub lambda: Complex64,
    pub eigenvector: DVector<Complex64>,
    /// Set when no unit eigenvalue could be resolved and the input solves
    /// the two-point problem on `[start, h]` instead.
    pub window_start: Option<f64>,
    pub k: usize,
    pub ratio: f64,
    /// Complex pair over the first period, before truncation.
    pub period_w_norm: f64,
    pub period_z_norm: f64,
}

impl WorstCaseSignals {
    /// `|‖z‖ − γ‖w‖| / (γ‖w‖)` over the first period.
    pub fn identity_error(&self, gamma: f64) -> f64 {
        (self.period_z_norm - gamma * self.period_w_norm).abs() / (gamma * self.period_w_norm)
    }
}

/// Two-point problem on the window `[offset·dt, h]`.
#[derive(Debug, Clone)]
pub struct EscapeWindow {
    /// First grid step of the window.
    pub offset: usize,
    /// Hamiltonian state at the start of every segment of the window.
    pub starts: Vec<DVector<Complex64>>,
    /// Smallest singular value of the shooting matrix relative to its largest.
    pub residual: f64,
}

/// Hamiltonian trajectory with `x = 0` at the window start and `x̂ = 0` at
/// `h`, by multiple shooting over `segments` pieces. When the Riccati
/// solution escapes at `t_escape`, γ is a singular value of the system
/// restricted to `[t_escape, h]`, and this trajectory attains it.
pub fn escape_window(
    sys: &PeriodicSystem,
    gamma: f64,
    t_escape: f64,
    segments: usize,
    n_steps: usize,
) -> Result<EscapeWindow, WcError> {
    let h = sys.period();
    let n = sys.dims().0;
    let dim = 2 * n;
    let dt = h / n_steps as f64;
    let offset = ((t_escape / dt).floor().max(0.0) as usize).min(n_steps - 1);
    let width = n_steps - offset;
    let seg = width.div_ceil(segments.clamp(1, width));
    let m = width.div_ceil(seg);
    let field = pltv::build_hamiltonian(sys, gamma)?;
    let mut shoot = Mat::zeros((m + 1) * dim, (m + 1) * dim);
    for k in 0..m {
        let t0 = (offset + k * seg) as f64 * dt;
        let t1 = if k + 1 == m { h } else { (offset + (k + 1) * seg) as f64 * dt };
        let phi = odeint::integrate(
            |t, e| field.transformed(t) * e,
            Mat::identity(dim, dim),
            (t0, t1),
            &hamiltonian_opts(sys, t0, t1),
        )?;
        shoot
            .view_mut((k * dim, k * dim), (dim, dim))
            .copy_from(phi.final_state());
        shoot
            .view_mut((k * dim, (k + 1) * dim), (dim, dim))
            .copy_from(&(-Mat::identity(dim, dim)));
    }
    for i in 0..n {
        shoot[(m * dim + i, i)] = 1.0;
        shoot[(m * dim + n + i, m * dim + n + i)] = 1.0;
    }
    let svd = shoot.svd(false, true);
    let v_t = svd.v_t.ok_or(WcError::EigenFailure)?;
    let (imin, smin) = svd
        .singular_values
        .iter()
        .copied()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or(WcError::EigenFailure)?;
    let smax = svd.singular_values.max();
    let v = v_t.row(imin).transpose();
    let starts = (0..m)
        .map(|k| v.rows(k * dim, dim).map(|x| Complex64::new(x, 0.0)))
        .collect();
    Ok(EscapeWindow {
        offset,
        starts,
        residual: smin / smax,
    })
}

/// Trapezoidal `(∫ |row|² dt)^½` over rows of `samples`.
pub fn signal_norm(samples: &Mat, dt: f64) -> f64 {
    let m = samples.nrows();
    if m < 2 {
        return 0.0;
    }
    let sq: Vec<f64> = samples.row_iter().map(|r| r.norm_squared()).collect();
    let inner: f64 = sq[1..m - 1].iter().sum();
    ((inner + 0.5 * (sq[0] + sq[m - 1])) * dt).sqrt()
}

fn steps_per_period(h: f64, dt: f64) -> Result<usize, WcError> {
    if !(dt > 0.0) {
        return Err(WcError::InvalidRequest(format!("step {dt} must be positive")));
    }
    let n = (h / dt).round();
    if n < 1.0 || (n * dt - h).abs() > 1e-9 * h.max(1.0) {
        return Err(WcError::InvalidRequest(format!("step {dt} does not divide the period {h}")));
    }
    Ok(n as usize)
}

/// Outputs `w = R⁻¹(DᵀC x + Bᵀx̂)` and `z = S⁻¹(γ²C x + D Bᵀx̂)` for a
/// real Hamiltonian state `[x; x̂]`.
fn hamiltonian_outputs(
    sys: &PeriodicSystem,
    gamma: f64,
    t: f64,
    e: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let m = sys.matrices(t);
    let (n, p, q) = sys.dims();
    let g2 = gamma * gamma;
    let x = e.rows(0, n);
    let xh = e.rows(n, n);
    let r = Mat::identity(p, p) * g2 - m.d.transpose() * &m.d;
    let s = Mat::identity(q, q) * g2 - &m.d * m.d.transpose();
    let btx = m.b.transpose() * xh;
    let w = r
        .lu()
        .solve(&(m.d.transpose() * &m.c * x + &btx))
        .unwrap_or_else(|| DVector::from_element(p, f64::NAN));
    let z = s
        .lu()
        .solve(&(&m.c * x * g2 + &m.d * btx))
        .unwrap_or_else(|| DVector::from_element(q, f64::NAN));
    (w, z)
}

type Rows = Vec<DVector<Complex64>>;

/// Hamiltonian trajectory sampled on the period grid; returns `(w, z, e)`
/// as complex sample rows. Steps before `offset` are zero; the rest of the
/// grid is split into `starts.len()` equal runs of steps, each integrated
/// from its own initial state.
fn hamiltonian_period(
    sys: &PeriodicSystem,
    gamma: f64,
    starts: &[DVector<Complex64>],
    offset: usize,
    n_steps: usize,
    span: f64,
) -> Result<(Rows, Rows, Rows), WcError> {
    let field = pltv::build_hamiltonian(sys, gamma)?;
    let (_, p, q) = sys.dims();
    let dt = span / n_steps as f64;
    let seg = (n_steps - offset).div_ceil(starts.len().max(1));
    let mut ws = vec![DVector::zeros(p); offset];
    let mut zs = vec![DVector::zeros(q); offset];
    let mut es = vec![DVector::zeros(starts.first().map_or(0, |e| e.len())); offset];
    for (k, e0) in starts.iter().enumerate() {
        let first = offset + k * seg;
        let last = (offset + (k + 1) * seg).min(n_steps);
        if first >= last {
            break;
        }
        let t0 = first as f64 * dt;
        let t1 = if last == n_steps { span } else { last as f64 * dt };
        let dim = e0.len();
        let mut init = Mat::zeros(dim, 2);
        for i in 0..dim {
            init[(i, 0)] = e0[i].re;
            init[(i, 1)] = e0[i].im;
        }
        let opts = hamiltonian_opts(sys, t0, t1);
        let sol = odeint::integrate(|t, e| field.transformed(t) * e, init, (t0, t1), &opts)?;
        let mut buf = Mat::zeros(dim, 2);
        let end = if last == n_steps { last + 1 } else { last };
        for i in first..end {
            let t = if i == n_steps { span } else { i as f64 * dt };
            sol.sample_into(t.clamp(t0, t1), &mut buf)?;
            let er = buf.column(0).into_owned();
            let ei = buf.column(1).into_owned();
            let (wr, zr) = hamiltonian_outputs(sys, gamma, t, &er);
            let (wi, zi) = hamiltonian_outputs(sys, gamma, t, &ei);
            let cplx = |re: &DVector<f64>, im: &DVector<f64>| {
                DVector::from_fn(re.len(), |j, _| Complex64::new(re[j], im[j]))
            };
            ws.push(cplx(&wr, &wi));
            zs.push(cplx(&zr, &zi));
            es.push(cplx(&er, &ei));
        }
    }
    Ok((ws, zs, es))
}

fn hamiltonian_opts(sys: &PeriodicSystem, t0: f64, t1: f64) -> IntegrateOptions {
    let h = sys.period();
    IntegrateOptions::default()
        .with_tol(Tolerances::default().scaled(1e-2))
        .with_breakpoints(
            (0..)
                .map(|k| k as f64 * h)
                .take_while(|&off| off < t1)
                .flat_map(|off| sys.breakpoints().iter().map(move |b| b + off).chain([off]))
                .filter(|&t| t > t0 && t < t1)
                .collect(),
        )
        .with_escape_threshold(1e300)
}

/// Unit eigenpair of `Q̃ = Φ_{M−1}⋯Φ_0` through the block-cyclic matrix of
/// the segment factors, whose eigenvalues `μ` satisfy `μᴹ = λ`. Returns the
/// pair together with the state at the start of every segment. Segments
/// are equal runs of `n_steps` grid steps, as in the synthesis.
pub fn segmented_eigenpair(
    sys: &PeriodicSystem,
    gamma: f64,
    segments: usize,
    n_steps: usize,
    unit_tol: f64,
) -> Result<(UnitEigenpair, Vec<DVector<Complex64>>), WcError> {
    let h = sys.period();
    let dim = 2 * sys.dims().0;
    let seg = n_steps.div_ceil(segments.clamp(1, n_steps));
    let m = n_steps.div_ceil(seg);
    let dt = h / n_steps as f64;
    let field = pltv::build_hamiltonian(sys, gamma)?;
    let mut cyclic = Mat::zeros(m * dim, m * dim);
    for k in 0..m {
        let t0 = (k * seg) as f64 * dt;
        let t1 = if k + 1 == m { h } else { ((k + 1) * seg) as f64 * dt };
        let phi = odeint::integrate(
            |t, e| field.transformed(t) * e,
            Mat::identity(dim, dim),
            (t0, t1),
            &hamiltonian_opts(sys, t0, t1),
        )?;
        let row = ((k + 1) % m) * dim;
        cyclic
            .view_mut((row, k * dim), (dim, dim))
            .copy_from(phi.final_state());
    }
    let mus = linalg::eigenvalues(&cyclic).ok_or(WcError::EigenFailure)?;
    let lam = |mu: &Complex64| mu.powu(m as u32);
    let gap = |mu: &Complex64| (mu.norm().powi(m as i32) - 1.0).abs();
    let best_gap = mus.iter().map(gap).fold(f64::INFINITY, f64::min);
    if !(best_gap <= unit_tol) {
        return Err(WcError::NoUnitEigenvalue {
            closest_modulus: best_gap + 1.0,
        });
    }
    let mut tied: Vec<Complex64> = mus
        .iter()
        .copied()
        .filter(|z| gap(z) <= best_gap + 1e-9)
        .collect();
    let tie_broken = tied.len() > m;
    tied.sort_by(|a, b| {
        let (la, lb) = (lam(a), lam(b));
        let ka = (la.arg().abs(), la.im < 0.0);
        let kb = (lb.arg().abs(), lb.im < 0.0);
        ka.partial_cmp(&kb).unwrap()
    });
    let mu = tied[0];
    let u = linalg::eigenvector(&cyclic, mu).ok_or(WcError::EigenFailure)?;
    let mut starts: Vec<DVector<Complex64>> = (0..m)
        .map(|k| u.rows(k * dim, dim).into_owned() * mu.powu(k as u32))
        .collect();
    let v0 = &starts[0];
    let (imax, _) = v0
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.norm().partial_cmp(&b.1.norm()).unwrap())
        .unwrap();
    let scale = v0[imax].conj() / v0[imax].norm() / v0.norm();
    for s in &mut starts {
        *s *= scale;
    }
    let lambda = lam(&mu);
    let pair = UnitEigenpair {
        lambda,
        v: starts[0].clone(),
        modulus_gap: gap(&mu),
        tie_broken,
    };
    Ok((pair, starts))
}

fn complex_rows_norm(rows: &[DVector<Complex64>], dt: f64) -> f64 {
    let m = rows.len();
    if m < 2 {
        return 0.0;
    }
    let sq: Vec<f64> = rows.iter().map(|r| r.norm_squared()).collect();
    let inner: f64 = sq[1..m - 1].iter().sum();
    ((inner + 0.5 * (sq[0] + sq[m - 1])) * dt).sqrt()
}

/// Energy balance of a Hamiltonian trajectory over one period:
/// `(‖z‖² − γ²‖w‖², Re(x̂(0)ᴴx(0) − x̂(h)ᴴx(h)))`. The two agree for any
/// initial state.
pub fn energy_balance(
    sys: &PeriodicSystem,
    gamma: f64,
    e0: &DVector<Complex64>,
    dt: f64,
) -> Result<(f64, f64), WcError> {
    let h = sys.period();
    let n_steps = steps_per_period(h, dt)?;
    let n = sys.dims().0;
    let (ws, zs, es) = hamiltonian_period(sys, gamma, std::slice::from_ref(e0), 0, n_steps, h)?;
    let wn = complex_rows_norm(&ws, dt);
    let zn = complex_rows_norm(&zs, dt);
    let boundary = |e: &DVector<Complex64>| {
        let x = e.rows(0, n);
        let xh = e.rows(n, n);
        xh.iter().zip(x.iter()).map(|(a, b)| (a.conj() * b).re).sum::<f64>()
    };
    Ok((
        zn * zn - gamma * gamma * wn * wn,
        boundary(&es[0]) - boundary(&es[n_steps]),
    ))
}

/// Build the truncated real worst-case input and its zero-state response.
pub fn synthesize(
    sys: &PeriodicSystem,
    gamma: f64,
    pair: &UnitEigenpair,
    k: usize,
    dt: f64,
) -> Result<WorstCaseSignals, WcError> {
    synthesize_segmented(sys, gamma, pair, std::slice::from_ref(&pair.v), k, dt)
}

/// As [`synthesize`], with the period trajectory restarted from `starts`
/// (see [`segmented_eigenpair`]).
pub fn synthesize_segmented(
    sys: &PeriodicSystem,
    gamma: f64,
    pair: &UnitEigenpair,
    starts: &[DVector<Complex64>],
    k: usize,
    dt: f64,
) -> Result<WorstCaseSignals, WcError> {
    extend(sys, gamma, pair.lambda, starts, 0, k, dt)
}

/// Input from the two-point problem on an escape window, repeated every
/// period (see [`escape_window`]).
pub fn synthesize_window(
    sys: &PeriodicSystem,
    gamma: f64,
    window: &EscapeWindow,
    k: usize,
    dt: f64,
) -> Result<WorstCaseSignals, WcError> {
    let mut sig = extend(sys, gamma, Complex64::new(1.0, 0.0), &window.starts, window.offset, k, dt)?;
    sig.window_start = Some(window.offset as f64 * dt);
    Ok(sig)
}

fn extend(
    sys: &PeriodicSystem,
    gamma: f64,
    lambda: Complex64,
    starts: &[DVector<Complex64>],
    offset: usize,
    k: usize,
    dt: f64,
) -> Result<WorstCaseSignals, WcError> {
    let h = sys.period();
    if h > MAX_PERIOD {
        return Err(WcError::PeriodTooLong { h });
    }
    if k < 1 {
        return Err(WcError::InvalidRequest("K must be at least 1".into()));
    }
    let n_steps = steps_per_period(h, dt)?;
    let (_, p, _) = sys.dims();
    let (ws, zs, _) = hamiltonian_period(sys, gamma, starts, offset, n_steps, h)?;
    let period_w_norm = complex_rows_norm(&ws, dt);
    let period_z_norm = complex_rows_norm(&zs, dt);

    // extend with the unit-modulus phase factor, truncate at K·h
    let unit = lambda / lambda.norm();
    let total = k * n_steps;
    let mut w = Mat::zeros(total + 1, p);
    let mut factor = Complex64::new(1.0, 0.0);
    for period in 0..k {
        for (i, wi) in ws.iter().take(n_steps).enumerate() {
            let row = period * n_steps + i;
            for j in 0..p {
                w[(row, j)] = (factor * wi[j]).re;
            }
        }
        factor *= unit;
    }
    let times: Vec<f64> = (0..=total).map(|i| i as f64 * dt).collect();
    let z = simulate(sys, &w, dt, &DVector::zeros(sys.dims().0));
    let wn = signal_norm(&w, dt);
    let ratio = if wn > 0.0 { signal_norm(&z, dt) / wn } else { 0.0 };
    Ok(WorstCaseSignals {
        dt,
        times,
        w,
        z,
        lambda,
        eigenvector: starts[0].clone(),
        window_start: None,
        k,
        ratio,
        period_w_norm,
        period_z_norm,
    })
}

fn interp_row(samples: &Mat, dt: f64, t: f64) -> DVector<f64> {
    let m = samples.nrows();
    let s = (t / dt).clamp(0.0, (m - 1) as f64);
    let i = (s.floor() as usize).min(m.saturating_sub(2));
    let frac = s - i as f64;
    if m == 1 {
        return samples.row(0).transpose();
    }
    (samples.row(i) * (1.0 - frac) + samples.row(i + 1) * frac).transpose()
}

/// Classical RK4 on a fixed grid of `steps` steps of size `dt` (may be negative).
fn rk4<F>(f: F, x0: DVector<f64>, t0: f64, dt: f64, steps: usize) -> Vec<DVector<f64>>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let mut out = Vec::with_capacity(steps + 1);
    let mut x = x0;
    out.push(x.clone());
    for s in 0..steps {
        let t = t0 + s as f64 * dt;
        let k1 = f(t, &x);
        let k2 = f(t + 0.5 * dt, &(&x + &k1 * (0.5 * dt)));
        let k3 = f(t + 0.5 * dt, &(&x + &k2 * (0.5 * dt)));
        let k4 = f(t + dt, &(&x + &k3 * dt));
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        out.push(x.clone());
    }
    out
}

/// Output samples of `sys` driven by the piecewise-linear input `w`
/// (one row per sample) from state `x0`.
pub fn simulate(sys: &PeriodicSystem, w: &Mat, dt: f64, x0: &DVector<f64>) -> Mat {
    let steps = w.nrows().saturating_sub(1);
    let xs = rk4(
        |t, x| {
            let m = sys.matrices(t);
            &m.a * x + &m.b * interp_row(w, dt, t)
        },
        x0.clone(),
        0.0,
        dt,
        steps,
    );
    let q = sys.dims().2;
    let mut z = Mat::zeros(w.nrows(), q);
    for (i, x) in xs.iter().enumerate() {
        let t = i as f64 * dt;
        let m = sys.matrices(t);
        let zi = &m.c * x + &m.d * w.row(i).transpose();
        z.row_mut(i).copy_from(&zi.transpose());
    }
    z
}

/// Relative mismatch of the adjoint identity
/// `⟨(x̂_h, ẑ), T_G(x0, w)⟩ = ⟨T_G*(x̂_h, ẑ), (x0, w)⟩` over one period,
/// with `w` and `ẑ` sampled at step `dt` on `[0, h]`.
pub fn adjoint_residual(
    sys: &PeriodicSystem,
    x0: &DVector<f64>,
    w: &Mat,
    xhat_h: &DVector<f64>,
    zhat: &Mat,
    dt: f64,
) -> f64 {
    let (n, p, q) = sys.dims();
    assert_eq!(w.ncols(), p);
    assert_eq!(zhat.ncols(), q);
    assert_eq!(w.nrows(), zhat.nrows());
    let steps = w.nrows() - 1;
    let h = steps as f64 * dt;

    // forward: [x; ∫ ẑᵀz]
    let mut s0 = DVector::zeros(n + 1);
    s0.rows_mut(0, n).copy_from(x0);
    let fwd = rk4(
        |t, s| {
            let m = sys.matrices(t);
            let x = s.rows(0, n);
            let wt = interp_row(w, dt, t);
            let z = &m.c * x + &m.d * &wt;
            let mut ds = DVector::zeros(n + 1);
            ds.rows_mut(0, n).copy_from(&(&m.a * x + &m.b * &wt));
            ds[n] = interp_row(zhat, dt, t).dot(&z);
            ds
        },
        s0,
        0.0,
        dt,
        steps,
    );
    let end = fwd.last().unwrap();
    let lhs = xhat_h.dot(&end.rows(0, n)) + end[n];

    // backward: [x̂; J] with J̇ = −ŵᵀw, J(h) = 0
    let mut b0 = DVector::zeros(n + 1);
    b0.rows_mut(0, n).copy_from(xhat_h);
    let bwd = rk4(
        |t, s| {
            let m = sys.matrices(t);
            let xh = s.rows(0, n);
            let zh = interp_row(zhat, dt, t);
            let what = m.b.transpose() * xh + m.d.transpose() * &zh;
            let mut ds = DVector::zeros(n + 1);
            ds.rows_mut(0, n)
                .copy_from(&(-(m.a.transpose() * xh) - m.c.transpose() * &zh));
            ds[n] = -what.dot(&interp_row(w, dt, t));
            ds
        },
        b0,
        h,
        -dt,
        steps,
    );
    let start = bwd.last().unwrap();
    let rhs = start.rows(0, n).dot(x0) + start[n];
    (lhs - rhs).abs() / (1.0 + lhs.abs())
}

#[derive(Debug, Clone)]
pub struct WorstCaseOptions {
    pub unit_tol: f64,
    /// Accepted with a warning when nothing lies within `unit_tol`.
    pub relaxed_unit_tol: f64,
    pub k: usize,
    pub steps_per_period: usize,
    pub norm: NormOptions,
}

impl Default for WorstCaseOptions {
    fn default() -> Self {
        Self {
            unit_tol: 1e-6,
            relaxed_unit_tol: 1e-4,
            k: 60,
            steps_per_period: 1024,
            norm: NormOptions::default(),
        }
    }
}

/// Riccati plant (or direct integration on escape), unit eigenpair and
/// synthesized signals at level γ.
pub fn worst_case_input(
    sys: &PeriodicSystem,
    gamma: f64,
    opts: &WorstCaseOptions,
) -> Result<WorstCaseSignals, WcError> {
    if sys.period() > MAX_PERIOD {
        return Err(WcError::PeriodTooLong { h: sys.period() });
    }
    let mut escape = None;
    let mp = match pltv::lifted_plant(sys, gamma, &opts.norm) {
        Ok(plant) => reconstruct_monodromy(&plant)?,
        Err(PltvError::RiccatiEscape { t, .. }) => {
            log::warn!("Riccati escape at t = {t}; integrating the Hamiltonian monodromy directly");
            escape = Some(t);
            MonodromyPair::integrate(sys, gamma, opts.norm.tol.scaled(1e-2))?
        }
        Err(e) => return Err(e.into()),
    };
    let n_steps = opts.steps_per_period;
    let dt = sys.period() / n_steps as f64;
    let direct = unit_eigenpair(&mp, opts.unit_tol).or_else(|e| match e {
        WcError::NoUnitEigenvalue { .. } => unit_eigenpair(&mp, opts.relaxed_unit_tol).inspect(|p| {
            log::warn!(
                "eigenvalue {} is {:.2e} off the unit circle; accepted under the relaxed tolerance",
                p.lambda,
                p.modulus_gap
            )
        }),
        e => Err(e),
    });
    let (pair, starts) = match direct {
        Ok(p) => {
            let v = p.v.clone();
            (p, vec![v])
        }
        Err(WcError::NoUnitEigenvalue { closest_modulus }) => {
            // a monodromy with huge spread hides the unit pair; split the period
            let segments = (mp.q_tilde.norm().max(10.0).log10() / 2.0).ceil() as usize + 1;
            log::info!(
                "no unit eigenvalue of the monodromy (closest modulus {closest_modulus:.3e}); retrying over {segments} segments"
            );
            let segmented = segmented_eigenpair(sys, gamma, segments, n_steps, opts.unit_tol)
                .or_else(|_| segmented_eigenpair(sys, gamma, segments, n_steps, opts.relaxed_unit_tol));
            match (segmented, escape) {
                (Ok(found), _) => found,
                (Err(WcError::NoUnitEigenvalue { .. }), Some(t)) => {
                    let window = escape_window(sys, gamma, t, segments, n_steps)?;
                    log::warn!(
                        "no unit eigenvalue at γ = {gamma}; using the two-point input on [{:.4}, {:.4}] (residual {:.1e})",
                        window.offset as f64 * dt,
                        sys.period(),
                        window.residual
                    );
                    return synthesize_window(sys, gamma, &window, opts.k, dt);
                }
                (Err(e), _) => return Err(e),
            }
        }
        Err(e) => return Err(e),
    };
    if pair.tie_broken {
        log::info!("several eigenvalues equally close to the unit circle; chose λ = {}", pair.lambda);
    }
    synthesize_segmented(sys, gamma, &pair, &starts, opts.k, dt)
}
