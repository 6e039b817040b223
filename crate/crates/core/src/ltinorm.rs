//! H∞ norms of continuous- and discrete-time LTI systems.
//!
//! Both routines bisect on the level σ using the imaginary-axis eigenvalue
//! test of the associated Hamiltonian matrix. Frequencies found by the test
//! are also evaluated directly, which tightens the lower end of the bracket.
//! Discrete systems are mapped to continuous time with the bilinear
//! transform `z = (1 + s) / (1 − s)`, which maps the unit circle onto the
//! imaginary axis and preserves the norm.

use num_complex::Complex64;
use thiserror::Error;

use crate::linalg::{self, CMat, Mat};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LtiError {
    #[error("inconsistent dimensions: {0}")]
    Dimension(String),
    #[error("system is not stable (spectral measure {measure})")]
    UnstableSystem { measure: f64 },
    #[error("eigenvalue computation did not converge")]
    EigenFailure,
}

fn check_dims(a: &Mat, b: &Mat, c: &Mat, d: &Mat) -> Result<(), LtiError> {
    let n = a.nrows();
    if a.ncols() != n
        || b.nrows() != n
        || c.ncols() != n
        || d.nrows() != c.nrows()
        || d.ncols() != b.ncols()
    {
        return Err(LtiError::Dimension(format!(
            "A {:?}, B {:?}, C {:?}, D {:?}",
            a.shape(),
            b.shape(),
            c.shape(),
            d.shape()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousLti {
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
    pub d: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteLti {
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
    pub d: Mat,
}

impl ContinuousLti {
    pub fn new(a: Mat, b: Mat, c: Mat, d: Mat) -> Result<Self, LtiError> {
        check_dims(&a, &b, &c, &d)?;
        Ok(Self { a, b, c, d })
    }

    pub fn order(&self) -> usize {
        self.a.nrows()
    }

    /// `C (sI − A)⁻¹ B + D`.
    pub fn response(&self, s: Complex64) -> CMat {
        transfer(&self.a, &self.b, &self.c, &self.d, s)
    }

    pub fn gain_at(&self, omega: f64) -> f64 {
        linalg::sigma_max_complex(&self.response(Complex64::new(0.0, omega)))
    }

    /// Same system with outputs scaled by `alpha`.
    pub fn scale_output(&self, alpha: f64) -> Self {
        Self {
            a: self.a.clone(),
            b: self.b.clone(),
            c: &self.c * alpha,
            d: &self.d * alpha,
        }
    }
}

impl DiscreteLti {
    pub fn new(a: Mat, b: Mat, c: Mat, d: Mat) -> Result<Self, LtiError> {
        check_dims(&a, &b, &c, &d)?;
        Ok(Self { a, b, c, d })
    }

    pub fn response(&self, z: Complex64) -> CMat {
        transfer(&self.a, &self.b, &self.c, &self.d, z)
    }

    pub fn gain_at(&self, theta: f64) -> f64 {
        linalg::sigma_max_complex(&self.response(Complex64::from_polar(1.0, theta)))
    }
}

fn transfer(a: &Mat, b: &Mat, c: &Mat, d: &Mat, s: Complex64) -> CMat {
    let n = a.nrows();
    let mut g = linalg::to_complex(d);
    if n == 0 || b.ncols() == 0 || c.nrows() == 0 {
        return g;
    }
    let mut m = -linalg::to_complex(a);
    for i in 0..n {
        m[(i, i)] += s;
    }
    let x = match m.lu().solve(&linalg::to_complex(b)) {
        Some(x) => x,
        None => return g.map(|_| Complex64::new(f64::INFINITY, 0.0)),
    };
    g += linalg::to_complex(c) * x;
    g
}

/// Result of a dense frequency sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPeak {
    pub gain: f64,
    /// Angular frequency (continuous) or angle in radians (discrete).
    pub frequency: f64,
}

fn golden_max(f: &dyn Fn(f64) -> f64, mut lo: f64, mut hi: f64, iters: usize) -> (f64, f64) {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..iters {
        if f1 >= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        }
    }
    if f1 >= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Evaluate on `grid`, then refine the best local maxima by golden section.
fn sweep_refined(gain: &dyn Fn(f64) -> f64, grid: &[f64], refine: usize) -> SweepPeak {
    let vals: Vec<f64> = grid.iter().map(|&w| gain(w)).collect();
    let mut best = SweepPeak {
        gain: 0.0,
        frequency: grid[0],
    };
    for (w, v) in grid.iter().zip(&vals) {
        if *v > best.gain {
            best = SweepPeak {
                gain: *v,
                frequency: *w,
            };
        }
    }
    let mut peaks: Vec<usize> = (0..grid.len())
        .filter(|&i| {
            let left = if i == 0 { f64::NEG_INFINITY } else { vals[i - 1] };
            let right = if i + 1 == grid.len() {
                f64::NEG_INFINITY
            } else {
                vals[i + 1]
            };
            vals[i] >= left && vals[i] >= right
        })
        .collect();
    peaks.sort_by(|&i, &j| vals[j].partial_cmp(&vals[i]).unwrap_or(std::cmp::Ordering::Equal));
    for &i in peaks.iter().take(refine) {
        let lo = grid[i.saturating_sub(1)];
        let hi = grid[(i + 1).min(grid.len() - 1)];
        if hi > lo {
            let (w, v) = golden_max(gain, lo, hi, 60);
            if v > best.gain {
                best = SweepPeak {
                    gain: v,
                    frequency: w,
                };
            }
        }
    }
    best
}

fn pole_scale(a: &Mat) -> (f64, f64, Vec<f64>) {
    let ev = linalg::eigenvalues(a).unwrap_or_default();
    let mags: Vec<f64> = ev.iter().map(|z| z.norm()).filter(|m| *m > 0.0).collect();
    let lo = mags.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = mags.iter().cloned().fold(0.0, f64::max);
    let (lo, hi) = if mags.is_empty() { (1.0, 1.0) } else { (lo, hi) };
    let imag: Vec<f64> = ev.iter().map(|z| z.im.abs()).filter(|w| *w > 0.0).collect();
    (lo, hi, imag)
}

fn continuous_grid(a: &Mat, points: usize) -> Vec<f64> {
    let (lo, hi, imag) = pole_scale(a);
    let wlo = (lo * 1e-3).max(1e-8).log10();
    let whi = (hi * 1e3).max(1e-6).log10();
    let mut grid = vec![0.0];
    let k = points.saturating_sub(1 + imag.len()).max(2);
    for i in 0..k {
        grid.push(10f64.powf(wlo + (whi - wlo) * i as f64 / (k - 1) as f64));
    }
    grid.extend(imag);
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup();
    grid
}

/// Dense sweep of `σmax(G(jω))`: 2048 log-spaced frequencies adapted to the
/// pole magnitudes plus DC and the pole frequencies, locally refined.
pub fn sweep_continuous(sys: &ContinuousLti) -> SweepPeak {
    let grid = continuous_grid(&sys.a, 2048);
    sweep_refined(&|w| sys.gain_at(w), &grid, 8)
}

/// Dense sweep of `σmax(G(e^{jθ}))` over θ ∈ [0, π] (2048 points), refined.
pub fn sweep_discrete(sys: &DiscreteLti) -> SweepPeak {
    let n = 2048;
    let mut grid: Vec<f64> = (0..n)
        .map(|i| std::f64::consts::PI * i as f64 / (n - 1) as f64)
        .collect();
    if let Some(ev) = linalg::eigenvalues(&sys.a) {
        grid.extend(ev.iter().filter(|z| z.norm() > 0.0).map(|z| z.arg().abs()));
        grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
        grid.dedup();
    }
    sweep_refined(&|th| sys.gain_at(th), &grid, 8)
}

/// Frequencies `ω ≥ 0` where the level `gamma` is a singular value of `G(jω)`,
/// read off the imaginary-axis eigenvalues of the Hamiltonian matrix.
fn imaginary_axis_crossings(sys: &ContinuousLti, gamma: f64) -> Result<Vec<f64>, LtiError> {
    let n = sys.order();
    let p = sys.b.ncols();
    let q = sys.c.nrows();
    let (a, b, c, d) = (&sys.a, &sys.b, &sys.c, &sys.d);
    let g2 = gamma * gamma;
    let r = d.transpose() * d - Mat::identity(p, p) * g2;
    let s = d * d.transpose() - Mat::identity(q, q) * g2;
    let rinv = match linalg::spd_inverse(&(-&r)) {
        Some(m) => -m,
        None => return Ok(vec![0.0]),
    };
    let sinv = match linalg::spd_inverse(&(-&s)) {
        Some(m) => -m,
        None => return Ok(vec![0.0]),
    };
    let h11 = a - b * &rinv * d.transpose() * c;
    let h12 = -(b * &rinv * b.transpose()) * gamma;
    let h21 = c.transpose() * &sinv * c * gamma;
    let h22 = -a.transpose() + c.transpose() * d * &rinv * b.transpose();
    let h = linalg::block2(&h11, &h12, &h21, &h22);
    debug_assert_eq!(h.nrows(), 2 * n);
    let ev = linalg::eigenvalues(&h).ok_or(LtiError::EigenFailure)?;
    Ok(ev
        .iter()
        .filter(|z| z.re.abs() < 1e-8 * (1.0 + z.norm()) && z.im >= 0.0)
        .map(|z| z.im)
        .collect())
}

fn bisect_continuous(sys: &ContinuousLti, tol: f64) -> Result<f64, LtiError> {
    let dmax = linalg::sigma_max(&sys.d);
    if sys.order() == 0 || sys.b.ncols() == 0 || sys.c.nrows() == 0 {
        return Ok(dmax);
    }
    let grid = continuous_grid(&sys.a, 128);
    let seed = sweep_refined(&|w| sys.gain_at(w), &grid, 3).gain;
    if !seed.is_finite() {
        return Err(LtiError::EigenFailure);
    }
    let mut lo = dmax.max(seed);
    // the scale ‖C‖‖(jω − A)⁻¹‖‖B‖ tells rounding noise from a genuine gain
    let (bn, cn) = (linalg::sigma_max(&sys.b), linalg::sigma_max(&sys.c));
    let scale = grid
        .iter()
        .map(|&w| {
            let mut m = linalg::to_complex(&sys.a) * Complex64::new(-1.0, 0.0);
            for i in 0..sys.order() {
                m[(i, i)] += Complex64::new(0.0, w);
            }
            m.try_inverse().map_or(f64::INFINITY, |r| linalg::sigma_max_complex(&r))
        })
        .fold(0.0, f64::max)
        * bn
        * cn;
    if lo <= 1e-13 * scale {
        lo = dmax;
    }
    if lo <= 0.0 {
        // B, C nonzero but transfer identically zero (e.g. uncontrollable modes)
        let dense = sweep_continuous(sys).gain;
        if dense <= 1e-13 * scale {
            return Ok(0.0);
        }
        lo = dense;
    }
    let mut hi = lo * 10.0;
    let mut doublings = 0;
    loop {
        let crossings = imaginary_axis_crossings(sys, hi)?;
        if crossings.is_empty() {
            break;
        }
        lo = lo.max(crossings.iter().map(|&w| sys.gain_at(w)).fold(hi, f64::max));
        hi = lo * 2.0;
        doublings += 1;
        if doublings > 60 {
            return Err(LtiError::EigenFailure);
        }
    }
    for _ in 0..200 {
        if hi - lo <= tol * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let crossings = imaginary_axis_crossings(sys, mid)?;
        if crossings.is_empty() {
            hi = mid;
        } else {
            let best = crossings.iter().map(|&w| sys.gain_at(w)).fold(mid, f64::max);
            lo = best.min(hi);
        }
    }
    Ok(0.5 * (lo + hi))
}

/// H∞ norm of a Hurwitz continuous-time system within relative `tol`.
pub fn hinf_continuous(sys: &ContinuousLti, tol: f64) -> Result<f64, LtiError> {
    if sys.order() > 0 {
        let abscissa = linalg::spectral_abscissa(&sys.a).ok_or(LtiError::EigenFailure)?;
        if abscissa >= -1e-12 * (1.0 + sys.a.norm()) {
            return Err(LtiError::UnstableSystem { measure: abscissa });
        }
    }
    bisect_continuous(sys, tol)
}

/// Bilinear map of a Schur-stable discrete system. The sign flip
/// `G(z) → G(−z)` keeps `I + A` well conditioned when `A` has eigenvalues
/// near −1; the norm over the circle is unchanged.
fn bilinear(sys: &DiscreteLti) -> Option<ContinuousLti> {
    let n = sys.a.nrows();
    let eye = Mat::identity(n, n);
    let ev = linalg::eigenvalues(&sys.a)?;
    let near_minus = ev.iter().map(|z| (z + 1.0).norm()).fold(f64::INFINITY, f64::min);
    let near_plus = ev.iter().map(|z| (z - 1.0).norm()).fold(f64::INFINITY, f64::min);
    let (a, b) = if near_minus < near_plus {
        (-&sys.a, -&sys.b)
    } else {
        (sys.a.clone(), sys.b.clone())
    };
    let lu = (&a + &eye).lu();
    let inv = lu.try_inverse()?;
    let sq2 = std::f64::consts::SQRT_2;
    let ac = &inv * (&a - &eye);
    let bc = &inv * &b * sq2;
    let cc = &sys.c * &inv * sq2;
    let dc = &sys.d - &sys.c * &inv * &b;
    Some(ContinuousLti {
        a: ac,
        b: bc,
        c: cc,
        d: dc,
    })
}

/// H∞ norm over the unit circle of a Schur-stable discrete-time system.
pub fn hinf_discrete(sys: &DiscreteLti, tol: f64) -> Result<f64, LtiError> {
    let n = sys.a.nrows();
    if n == 0 || sys.b.ncols() == 0 || sys.c.nrows() == 0 {
        return Ok(linalg::sigma_max(&sys.d));
    }
    let rho = linalg::spectral_radius(&sys.a).ok_or(LtiError::EigenFailure)?;
    if rho >= 1.0 - 1e-10 {
        return Err(LtiError::UnstableSystem { measure: rho });
    }
    match bilinear(sys).map(|c| bisect_continuous(&c, tol)) {
        Some(Ok(v)) if v.is_finite() => Ok(v),
        _ => {
            log::warn!("bilinear H-infinity route failed; using frequency sweep");
            Ok(sweep_discrete(sys).gain)
        }
    }
}
