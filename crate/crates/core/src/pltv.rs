//! Periodic linear time-varying systems and their exact induced L2 norm.
//!
//! For a level γ the system is mapped to a discrete-time LTI plant
//! `(A_γ, B_γ, C_γ, 0)` through three matrix Riccati equations integrated
//! over one period. The PLTV norm is below γ exactly when `A_γ` is Schur
//! stable and the plant's H∞ norm is below one, which drives a bisection
//! on γ.
//!
//! The Hamiltonian blocks are
//!
//! ```text
//! H11 = −Aᵀ − CᵀD R⁻¹Bᵀ      H12 = −γ Cᵀ S⁻¹ C
//! H21 =  γ B R⁻¹ Bᵀ          H22 =  A + B R⁻¹ DᵀC
//! R = γ²I − DᵀD,  S = γ²I − DDᵀ
//! ```
//!
//! and the Riccati solutions satisfy `Z(h) = 0`, `X(0) = I`, `Y(0) = 0`:
//!
//! ```text
//! Ż = −H22ᵀZ − Z H22 − Z H21 Z + H12
//! Ẋ = (H22 + H21 Z) X
//! Ẏ =  H22 Y + Y H22ᵀ − Y H12 Y + H21
//! ```
//!
//! giving `A_γ = X(h)`, `C_γᵀC_γ = Z(0)` and `B_γB_γᵀ = Y(h)`.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::linalg::{self, Mat};
use crate::ltinorm::{self, DiscreteLti, LtiError};
use crate::odeint::{self, IntegrateOptions, OdeError, Tolerances};

#[derive(Debug, Clone, PartialEq)]
pub struct SystemMatrices {
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
    pub d: Mat,
}

impl SystemMatrices {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.a.nrows(), self.b.ncols(), self.c.nrows())
    }

    pub fn is_finite(&self) -> bool {
        [&self.a, &self.b, &self.c, &self.d]
            .iter()
            .all(|m| m.iter().all(|v| v.is_finite()))
    }
}

pub type MatrixFn = Arc<dyn Fn(f64) -> SystemMatrices + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PltvError {
    #[error("invalid periodic system: {0}")]
    InvalidSystem(String),
    #[error("γ = {gamma} does not exceed the feedthrough: γ²I − DᵀD is not positive definite at t = {t}")]
    FeedthroughTooLarge { gamma: f64, t: f64 },
    #[error("Riccati solution {which} escaped at t = {t} (γ = {gamma})")]
    RiccatiEscape { gamma: f64, which: RiccatiKind, t: f64 },
    #[error("integration failed: {0}")]
    Integration(#[from] OdeError),
    #[error("discrete plant norm failed: {0}")]
    Lti(#[from] LtiError),
    #[error("no valid norm bracket after expansion (last γ tried: {last})")]
    BracketFailure { last: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RiccatiKind {
    Z,
    Y,
}

impl fmt::Display for RiccatiKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RiccatiKind::Z => "Z",
            RiccatiKind::Y => "Y",
        })
    }
}

/// An h-periodic system `ẋ = A(t)x + B(t)w, z = C(t)x + D(t)w`.
#[derive(Clone)]
pub struct PeriodicSystem {
    eval: MatrixFn,
    period: f64,
    dims: (usize, usize, usize),
    breakpoints: Vec<f64>,
}

impl fmt::Debug for PeriodicSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PeriodicSystem")
            .field("period", &self.period)
            .field("dims", &self.dims)
            .field("breakpoints", &self.breakpoints)
            .finish()
    }
}

impl PeriodicSystem {
    /// `eval` is called with `t ∈ [0, period]`. `breakpoints` lists the
    /// times in `(0, period)` where the matrices are not smooth.
    pub fn new(
        period: f64,
        breakpoints: Vec<f64>,
        eval: MatrixFn,
    ) -> Result<Self, PltvError> {
        if !(period > 0.0) || !period.is_finite() {
            return Err(PltvError::InvalidSystem(format!("period {period} must be positive")));
        }
        let m0 = eval(0.0);
        let (n, p, q) = m0.dims();
        if m0.a.ncols() != n || m0.b.nrows() != n || m0.c.ncols() != n || m0.d.shape() != (q, p)
        {
            return Err(PltvError::InvalidSystem("inconsistent matrix dimensions".into()));
        }
        if !m0.is_finite() {
            return Err(PltvError::InvalidSystem("non-finite matrices at t = 0".into()));
        }
        let mut bps: Vec<f64> = breakpoints
            .into_iter()
            .filter(|&t| t > 0.0 && t < period)
            .collect();
        bps.sort_by(|a, b| a.partial_cmp(b).unwrap());
        bps.dedup();
        Ok(Self {
            eval,
            period,
            dims: (n, p, q),
            breakpoints: bps,
        })
    }

    /// A time-invariant system declared with period `period`.
    pub fn constant(mats: SystemMatrices, period: f64) -> Result<Self, PltvError> {
        Self::new(period, Vec::new(), Arc::new(move |_| mats.clone()))
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    /// `(n, p, q)`: states, inputs, outputs.
    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    /// Matrices at time `t`, reduced modulo the period.
    pub fn matrices(&self, t: f64) -> SystemMatrices {
        let h = self.period;
        let tr = if (0.0..=h).contains(&t) {
            t
        } else {
            t.rem_euclid(h)
        };
        (self.eval)(tr)
    }

    /// The same signal declared over `k` periods.
    pub fn repeated(&self, k: usize) -> Self {
        let k = k.max(1);
        let h = self.period;
        let inner = self.eval.clone();
        let mut bps = Vec::new();
        for j in 0..k {
            let off = j as f64 * h;
            bps.extend(self.breakpoints.iter().map(|b| b + off));
            if j > 0 {
                bps.push(off);
            }
        }
        Self {
            eval: Arc::new(move |t| {
                let tr = if (0.0..=h).contains(&t) { t } else { t.rem_euclid(h) };
                inner(tr)
            }),
            period: h * k as f64,
            dims: self.dims,
            breakpoints: {
                bps.sort_by(|a, b| a.partial_cmp(b).unwrap());
                bps
            },
        }
    }

    /// Output channel scaled by `alpha` (`C → αC`, `D → αD`).
    pub fn scale_output(&self, alpha: f64) -> Self {
        let inner = self.eval.clone();
        Self {
            eval: Arc::new(move |t| {
                let mut m = inner(t);
                m.c *= alpha;
                m.d *= alpha;
                m
            }),
            ..self.clone()
        }
    }

    /// Sample points covering one period: a uniform grid plus breakpoints.
    pub fn sample_times(&self, count: usize) -> Vec<f64> {
        let mut ts: Vec<f64> = (0..count)
            .map(|i| self.period * i as f64 / count as f64)
            .collect();
        ts.extend(&self.breakpoints);
        ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ts
    }

    /// `sup_t σmax(D(t))` over the sample grid, a lower bound on the norm.
    pub fn feedthrough_bound(&self) -> f64 {
        self.sample_times(64)
            .iter()
            .map(|&t| linalg::sigma_max(&self.matrices(t).d))
            .fold(0.0, f64::max)
    }

    /// Monodromy `Φ(h, 0)` of `ẋ = A(t)x`.
    pub fn monodromy(&self, tol: Tolerances) -> Result<Mat, PltvError> {
        let n = self.dims.0;
        let opts = IntegrateOptions::default()
            .with_tol(tol)
            .with_breakpoints(self.breakpoints.clone())
            .with_escape_threshold(1e300);
        let sol = odeint::integrate(
            |t, x| self.matrices(t).a * x,
            Mat::identity(n, n),
            (0.0, self.period),
            &opts,
        )?;
        Ok(sol.final_state().clone())
    }

    /// Spectral radius of the zero-input monodromy; below one means
    /// internally stable.
    pub fn monodromy_spectral_radius(&self, tol: Tolerances) -> Result<f64, PltvError> {
        let m = self.monodromy(tol)?;
        linalg::spectral_radius(&m).ok_or(PltvError::Lti(LtiError::EigenFailure))
    }
}

/// Hamiltonian blocks at one time instant.
#[derive(Debug, Clone)]
pub struct HamiltonianBlocks {
    pub h11: Mat,
    pub h12: Mat,
    pub h21: Mat,
    pub h22: Mat,
}

impl HamiltonianBlocks {
    pub fn matrix(&self) -> Mat {
        linalg::block2(&self.h11, &self.h12, &self.h21, &self.h22)
    }
}

/// The γ-dependent Hamiltonian field of a periodic system.
#[derive(Debug, Clone)]
pub struct HamiltonianField<'a> {
    sys: &'a PeriodicSystem,
    gamma: f64,
}

impl<'a> HamiltonianField<'a> {
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn system(&self) -> &'a PeriodicSystem {
        self.sys
    }

    fn blocks_of(&self, m: &SystemMatrices) -> Option<HamiltonianBlocks> {
        let (_, p, q) = self.sys.dims;
        let g = self.gamma;
        let g2 = g * g;
        // R is treated as singular within a relative margin
        if linalg::sigma_max(&m.d).powi(2) >= g2 * (1.0 - 1e-9) {
            return None;
        }
        let r = Mat::identity(p, p) * g2 - m.d.transpose() * &m.d;
        let s = Mat::identity(q, q) * g2 - &m.d * m.d.transpose();
        let rinv = linalg::spd_inverse(&r)?;
        let sinv = linalg::spd_inverse(&s)?;
        let brinv = &m.b * &rinv;
        let h22 = &m.a + &brinv * m.d.transpose() * &m.c;
        let h11 = -h22.transpose();
        let h12 = -(m.c.transpose() * &sinv * &m.c) * g;
        let h21 = &brinv * m.b.transpose() * g;
        Some(HamiltonianBlocks { h11, h12, h21, h22 })
    }

    /// Blocks at `t`; entries are NaN where `γ²I − DᵀD` is not positive definite.
    pub fn blocks(&self, t: f64) -> HamiltonianBlocks {
        let m = self.sys.matrices(t);
        self.blocks_of(&m).unwrap_or_else(|| {
            let n = self.sys.dims.0;
            let nan = Mat::from_element(n, n, f64::NAN);
            HamiltonianBlocks {
                h11: nan.clone(),
                h12: nan.clone(),
                h21: nan.clone(),
                h22: nan,
            }
        })
    }

    pub fn matrix(&self, t: f64) -> Mat {
        self.blocks(t).matrix()
    }

    /// `T⁻¹ H T` with `T = [[0, I], [γI, 0]]`, acting on `[x; x̂]`.
    pub fn transformed(&self, t: f64) -> Mat {
        let hb = self.blocks(t);
        let g = self.gamma;
        linalg::block2(&hb.h22, &(&hb.h21 / g), &(&hb.h12 * g), &hb.h11)
    }
}

/// Assemble the Hamiltonian field after checking `γ²I − DᵀD ≻ 0` on a
/// 64-point grid plus breakpoints.
pub fn build_hamiltonian(
    sys: &PeriodicSystem,
    gamma: f64,
) -> Result<HamiltonianField<'_>, PltvError> {
    let field = HamiltonianField { sys, gamma };
    if !(gamma > 0.0) {
        return Err(PltvError::FeedthroughTooLarge { gamma, t: 0.0 });
    }
    for t in sys.sample_times(64) {
        let m = sys.matrices(t);
        if field.blocks_of(&m).is_none() {
            return Err(PltvError::FeedthroughTooLarge { gamma, t });
        }
    }
    Ok(field)
}

/// Discrete-time plant `(A_γ, B_γ, C_γ, 0)` for one level γ.
#[derive(Debug, Clone)]
pub struct DiscretePlant {
    pub gamma: f64,
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
    /// `Y(h) = B_γB_γᵀ` (symmetrized).
    pub bbt: Mat,
    /// `Z(0) = C_γᵀC_γ` (symmetrized).
    pub ctc: Mat,
}

impl DiscretePlant {
    pub fn as_lti(&self) -> DiscreteLti {
        let p = self.b.ncols();
        let q = self.c.nrows();
        DiscreteLti {
            a: self.a.clone(),
            b: self.b.clone(),
            c: self.c.clone(),
            d: Mat::zeros(q, p),
        }
    }
}

#[derive(Debug, Clone)]
pub struct NormOptions {
    pub tol: Tolerances,
    pub escape_threshold: f64,
    /// Relative tolerance of the inner discrete H∞ computation.
    pub hinf_tol: f64,
    /// Eigenvalues below `rank_cut · λmax` are dropped when factoring `Y(h)`, `Z(0)`.
    pub rank_cut: f64,
}

impl Default for NormOptions {
    fn default() -> Self {
        Self {
            tol: Tolerances::default(),
            escape_threshold: 1e8,
            hinf_tol: 1e-7,
            rank_cut: 1e-10,
        }
    }
}

fn riccati_opts(sys: &PeriodicSystem, opts: &NormOptions) -> IntegrateOptions {
    IntegrateOptions::default()
        .with_tol(opts.tol)
        .with_breakpoints(sys.breakpoints.clone())
        .with_escape_threshold(opts.escape_threshold)
}

/// Integrate the three Riccati equations over one period and factor the
/// results into the discrete plant.
pub fn lifted_plant(
    sys: &PeriodicSystem,
    gamma: f64,
    opts: &NormOptions,
) -> Result<DiscretePlant, PltvError> {
    let field = build_hamiltonian(sys, gamma)?;
    let n = sys.dims.0;
    let h = sys.period;
    let iopts = riccati_opts(sys, opts);

    let z_sol = odeint::integrate(
        |t, z| {
            let hb = field.blocks(t);
            let zh22 = z * &hb.h22;
            // Zᵀ on the right keeps rounding from feeding an antisymmetric blow-up
            -zh22.transpose() - zh22 - z * &hb.h21 * z.transpose() + &hb.h12
        },
        Mat::zeros(n, n),
        (h, 0.0),
        &iopts,
    )
    .map_err(|e| match e {
        OdeError::Escape { t } => PltvError::RiccatiEscape {
            gamma,
            which: RiccatiKind::Z,
            t,
        },
        other => PltvError::Integration(other),
    })?;

    // X and Y share one integration: state [X | Y]
    let mut init = Mat::zeros(n, 2 * n);
    init.view_mut((0, 0), (n, n)).fill_with_identity();
    let xy_sol = odeint::integrate(
        |t, xy| {
            let hb = field.blocks(t);
            let mut z = Mat::zeros(n, n);
            z_sol
                .sample_into(t, &mut z)
                .expect("Z is solved on the whole period");
            let x = xy.columns(0, n);
            let y = xy.columns(n, n);
            let mut out = Mat::zeros(n, 2 * n);
            let xdot = (&hb.h22 + &hb.h21 * &z) * x;
            let hy = &hb.h22 * y;
            let ydot = &hy + hy.transpose() - y * &hb.h12 * y.transpose() + &hb.h21;
            out.columns_mut(0, n).copy_from(&xdot);
            out.columns_mut(n, n).copy_from(&ydot);
            out
        },
        init,
        (0.0, h),
        &iopts,
    )
    .map_err(|e| match e {
        OdeError::Escape { t } => PltvError::RiccatiEscape {
            gamma,
            which: RiccatiKind::Y,
            t,
        },
        other => PltvError::Integration(other),
    })?;

    let ctc = linalg::symmetrize(z_sol.final_state());
    let end = xy_sol.final_state();
    let a = end.columns(0, n).into_owned();
    let bbt = linalg::symmetrize(&end.columns(n, n).into_owned());
    let b = linalg::psd_factor(&bbt, opts.rank_cut);
    let c = linalg::psd_factor(&ctc, opts.rank_cut).transpose();
    Ok(DiscretePlant {
        gamma,
        a,
        b,
        c,
        bbt,
        ctc,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum NotBelowReason {
    Feedthrough,
    Escape { which: RiccatiKind, t: f64 },
    UnstablePlant { spectral_radius: f64 },
    PlantGain { value: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum NormTest {
    /// The PLTV norm is below γ.
    Below { plant_gain: f64 },
    NotBelow(NotBelowReason),
}

impl NormTest {
    pub fn is_below(&self) -> bool {
        matches!(self, NormTest::Below { .. })
    }
}

/// Decide whether `‖G‖ < γ`.
pub fn norm_test(
    sys: &PeriodicSystem,
    gamma: f64,
    opts: &NormOptions,
) -> Result<NormTest, PltvError> {
    let plant = match lifted_plant(sys, gamma, opts) {
        Ok(p) => p,
        Err(PltvError::FeedthroughTooLarge { .. }) => {
            return Ok(NormTest::NotBelow(NotBelowReason::Feedthrough))
        }
        Err(PltvError::RiccatiEscape { which, t, .. }) => {
            return Ok(NormTest::NotBelow(NotBelowReason::Escape { which, t }))
        }
        Err(e) => return Err(e),
    };
    let radius = linalg::spectral_radius(&plant.a).ok_or(LtiError::EigenFailure)?;
    if radius >= 1.0 - 1e-10 {
        return Ok(NormTest::NotBelow(NotBelowReason::UnstablePlant {
            spectral_radius: radius,
        }));
    }
    let value = ltinorm::hinf_discrete(&plant.as_lti(), opts.hinf_tol)?;
    if value < 1.0 {
        Ok(NormTest::Below { plant_gain: value })
    } else {
        Ok(NormTest::NotBelow(NotBelowReason::PlantGain { value }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Epsilon {
    Absolute(f64),
    /// Width relative to the current upper bound.
    Relative(f64),
}

impl Default for Epsilon {
    fn default() -> Self {
        Epsilon::Relative(1e-4)
    }
}

impl Epsilon {
    fn width(self, upper: f64) -> f64 {
        match self {
            Epsilon::Absolute(e) => e,
            Epsilon::Relative(r) => r * upper,
        }
    }
}

/// `lower ≤ ‖G‖ ≤ upper`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormBracket {
    pub lower: f64,
    pub upper: f64,
    pub tolerance: f64,
    pub iterations: usize,
}

impl NormBracket {
    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }

    pub fn contains(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }
}

/// Bisection on γ. An invalid caller bracket is expanded (upper doubled,
/// lower halved, up to 40 times each); a lower end that stays "below"
/// falls back to the trivial bound 0.
pub fn norm_bisect(
    sys: &PeriodicSystem,
    gamma_lo: f64,
    gamma_hi: f64,
    eps: Epsilon,
    opts: &NormOptions,
) -> Result<NormBracket, PltvError> {
    let mut iterations = 0usize;
    let mut hi = gamma_hi.max(f64::MIN_POSITIVE);
    let mut found = false;
    for _ in 0..=40 {
        iterations += 1;
        if norm_test(sys, hi, opts)?.is_below() {
            found = true;
            break;
        }
        hi *= 2.0;
    }
    if !found {
        return Err(PltvError::BracketFailure { last: hi / 2.0 });
    }
    let mut lo = gamma_lo.min(hi);
    if lo > 0.0 {
        let mut valid = false;
        for _ in 0..=40 {
            iterations += 1;
            if !norm_test(sys, lo, opts)?.is_below() {
                valid = true;
                break;
            }
            hi = hi.min(lo);
            lo *= 0.5;
        }
        if !valid {
            lo = 0.0;
        }
    }
    let floor = 1e-12 * gamma_hi.abs().max(1.0);
    while hi - lo > eps.width(hi) && hi > floor && iterations < 400 {
        iterations += 1;
        let mid = 0.5 * (lo + hi);
        if norm_test(sys, mid, opts)?.is_below() {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(NormBracket {
        lower: lo,
        upper: hi,
        tolerance: eps.width(hi),
        iterations,
    })
}

/// Norm bracket with an automatic starting bracket `[sup σmax(D), 2·max(…, 1)]`.
pub fn pltv_norm(
    sys: &PeriodicSystem,
    eps: Epsilon,
    opts: &NormOptions,
) -> Result<NormBracket, PltvError> {
    let lo = sys.feedthrough_bound();
    let hi = (2.0 * lo).max(1.0);
    norm_bisect(sys, lo, hi, eps, opts)
}
