//! Adaptive Dormand–Prince 5(4) integration of matrix-valued ODEs.
//!
//! Accepted steps are kept so that the solution can be sampled anywhere in
//! the span by cubic Hermite interpolation. Spans with `t1 < t0` are
//! integrated by reversing time internally.

use nalgebra::DMatrix;
use thiserror::Error;

pub type Mat = DMatrix<f64>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 1e-10,
        }
    }
}

impl Tolerances {
    pub fn scaled(self, factor: f64) -> Self {
        Self {
            rtol: self.rtol * factor,
            atol: self.atol * factor,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IntegrateOptions {
    pub tol: Tolerances,
    /// Abort with [`OdeError::Escape`] once the max-norm of the state exceeds this.
    pub escape_threshold: f64,
    pub max_steps: usize,
    pub max_step: Option<f64>,
    /// Times where the field may be non-smooth. Steps never straddle them.
    pub breakpoints: Vec<f64>,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        Self {
            tol: Tolerances::default(),
            escape_threshold: 1e8,
            max_steps: 1_000_000,
            max_step: None,
            breakpoints: Vec::new(),
        }
    }
}

impl IntegrateOptions {
    pub fn with_tol(mut self, tol: Tolerances) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_breakpoints(mut self, breakpoints: Vec<f64>) -> Self {
        self.breakpoints = breakpoints;
        self
    }

    pub fn with_escape_threshold(mut self, threshold: f64) -> Self {
        self.escape_threshold = threshold;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OdeError {
    #[error("solution escaped (max-norm above threshold) at t = {t}")]
    Escape { t: f64 },
    #[error("step size underflow at t = {t}")]
    StepUnderflow { t: f64 },
    #[error("non-finite field value at t = {t}")]
    NonFinite { t: f64 },
    #[error("step budget of {max_steps} exhausted at t = {t}")]
    TooManySteps { t: f64, max_steps: usize },
    #[error("invalid integration request: {0}")]
    InvalidRequest(String),
    #[error("time {t} outside solved span [{lo}, {hi}]")]
    OutOfSpan { t: f64, lo: f64, hi: f64 },
}

/// Accepted-step record of an integration, sampled by Hermite interpolation.
#[derive(Debug, Clone)]
pub struct DenseSolution {
    times: Vec<f64>,
    states: Vec<Mat>,
    /// Derivatives at the two ends of each interval `[times[i], times[i+1]]`.
    /// They differ from neighbouring intervals only at breakpoints.
    slopes: Vec<(Mat, Mat)>,
    rejected: usize,
}

impl DenseSolution {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[Mat] {
        &self.states
    }

    pub fn initial_time(&self) -> f64 {
        self.times[0]
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("non-empty solution")
    }

    pub fn final_state(&self) -> &Mat {
        self.states.last().expect("non-empty solution")
    }

    pub fn accepted_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn rejected_steps(&self) -> usize {
        self.rejected
    }

    /// State at `t`, exact at node times.
    pub fn sample(&self, t: f64) -> Result<Mat, OdeError> {
        let mut out = Mat::zeros(self.states[0].nrows(), self.states[0].ncols());
        self.sample_into(t, &mut out)?;
        Ok(out)
    }

    pub fn sample_into(&self, t: f64, out: &mut Mat) -> Result<(), OdeError> {
        let t0 = self.initial_time();
        let t1 = self.final_time();
        let (lo, hi) = if t0 <= t1 { (t0, t1) } else { (t1, t0) };
        let slack = 1e-12 * (hi - lo).abs().max(1.0);
        if !(t >= lo - slack && t <= hi + slack) {
            return Err(OdeError::OutOfSpan { t, lo, hi });
        }
        let forward = t1 >= t0;
        // index of the last node not past t in the direction of integration
        let idx = if forward {
            self.times.partition_point(|&s| s <= t)
        } else {
            self.times.partition_point(|&s| s >= t)
        };
        if idx > 0 && self.times[idx - 1] == t {
            out.copy_from(&self.states[idx - 1]);
            return Ok(());
        }
        let i = idx.saturating_sub(1).min(self.times.len() - 2);
        let (ta, tb) = (self.times[i], self.times[i + 1]);
        let dt = tb - ta;
        let th = ((t - ta) / dt).clamp(0.0, 1.0);
        let th2 = th * th;
        let th3 = th2 * th;
        let h00 = 2.0 * th3 - 3.0 * th2 + 1.0;
        let h10 = th3 - 2.0 * th2 + th;
        let h01 = -2.0 * th3 + 3.0 * th2;
        let h11 = th3 - th2;
        let (fa, fb) = &self.slopes[i];
        let xa = &self.states[i];
        let xb = &self.states[i + 1];
        for k in 0..out.len() {
            out[k] = h00 * xa[k] + h10 * dt * fa[k] + h01 * xb[k] + h11 * dt * fb[k];
        }
        Ok(())
    }
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

fn all_finite(m: &Mat) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// `out = base + h * Σ coeffs[i] * ks[i]`
fn combine(out: &mut Mat, base: &Mat, h: f64, terms: &[(f64, &Mat)]) {
    for k in 0..out.len() {
        let mut acc = 0.0;
        for (c, m) in terms {
            acc += c * m[k];
        }
        out[k] = base[k] + h * acc;
    }
}

/// Integrate `dx/dt = field(t, x)` from `x(t0) = initial` to `t1`.
pub fn integrate<F>(
    field: F,
    initial: Mat,
    span: (f64, f64),
    opts: &IntegrateOptions,
) -> Result<DenseSolution, OdeError>
where
    F: Fn(f64, &Mat) -> Mat,
{
    let (t0, t1) = span;
    if t0 == t1 || !t0.is_finite() || !t1.is_finite() {
        return Err(OdeError::InvalidRequest(format!(
            "span [{t0}, {t1}] must be finite and non-empty"
        )));
    }
    if !(opts.escape_threshold > 0.0) || !(opts.tol.rtol > 0.0) || !(opts.tol.atol > 0.0) {
        return Err(OdeError::InvalidRequest(
            "tolerances and escape threshold must be positive".into(),
        ));
    }
    let dir = if t1 > t0 { 1.0 } else { -1.0 };
    let length = (t1 - t0).abs();
    let min_step = 1e-13 * length;
    let to_t = |s: f64| t0 + dir * s;

    // segment ends in the reversed-time coordinate s
    let mut stops: Vec<f64> = opts
        .breakpoints
        .iter()
        .map(|&b| dir * (b - t0))
        .filter(|&s| s > min_step && s < length - min_step)
        .collect();
    stops.sort_by(|a, b| a.partial_cmp(b).unwrap());
    stops.dedup_by(|a, b| (*a - *b).abs() <= min_step);
    stops.push(length);

    let (rows, cols) = initial.shape();
    let mut x = initial;
    let mut s = 0.0;
    let mut f = field(t0, &x) * dir;
    if !all_finite(&f) || !all_finite(&x) {
        return Err(OdeError::NonFinite { t: t0 });
    }

    let mut times = vec![t0];
    let mut states = vec![x.clone()];
    let mut slopes: Vec<(Mat, Mat)> = Vec::new();
    let mut rejected = 0usize;
    let mut steps = 0usize;

    let tol = opts.tol;
    let err_norm = |err: &Mat, a: &Mat, b: &Mat| -> f64 {
        let mut sum = 0.0;
        for k in 0..err.len() {
            let sc = tol.atol + tol.rtol * a[k].abs().max(b[k].abs());
            let r = err[k] / sc;
            sum += r * r;
        }
        (sum / err.len() as f64).sqrt()
    };

    let mut h = initial_step(&field, &x, &f, t0, dir, opts, length);
    let mut tmp = Mat::zeros(rows, cols);
    let mut y_new = Mat::zeros(rows, cols);
    let mut err = Mat::zeros(rows, cols);

    for &stop in &stops {
        let mut last_was_rejected = false;
        while s < stop - min_step {
            if steps >= opts.max_steps {
                return Err(OdeError::TooManySteps {
                    t: to_t(s),
                    max_steps: opts.max_steps,
                });
            }
            steps += 1;
            if let Some(hmax) = opts.max_step {
                h = h.min(hmax);
            }
            if h < min_step {
                return Err(OdeError::StepUnderflow { t: to_t(s) });
            }
            let proposed = h;
            let remaining = stop - s;
            let hit_stop = h >= remaining * (1.0 - 1e-12);
            if hit_stop {
                h = remaining;
            }

            combine(&mut tmp, &x, h, &[(A21, &f)]);
            let k2 = field(to_t(s + C2 * h), &tmp) * dir;
            combine(&mut tmp, &x, h, &[(A31, &f), (A32, &k2)]);
            let k3 = field(to_t(s + C3 * h), &tmp) * dir;
            combine(&mut tmp, &x, h, &[(A41, &f), (A42, &k2), (A43, &k3)]);
            let k4 = field(to_t(s + C4 * h), &tmp) * dir;
            combine(&mut tmp, &x, h, &[(A51, &f), (A52, &k2), (A53, &k3), (A54, &k4)]);
            let k5 = field(to_t(s + C5 * h), &tmp) * dir;
            combine(
                &mut tmp,
                &x,
                h,
                &[(A61, &f), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)],
            );
            // stages on a breakpoint see the field from the left
            let t_end = if hit_stop && stop < length {
                to_t(stop - 1e-12 * length.max(1.0))
            } else {
                to_t(s + h)
            };
            let k6 = field(t_end, &tmp) * dir;
            combine(
                &mut y_new,
                &x,
                h,
                &[(B1, &f), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)],
            );
            let s_new = if hit_stop { stop } else { s + h };
            let f_new = field(t_end, &y_new) * dir;
            for k in 0..err.len() {
                err[k] = h
                    * (E1 * f[k] + E3 * k3[k] + E4 * k4[k] + E5 * k5[k] + E6 * k6[k]
                        + E7 * f_new[k]);
            }
            let e = err_norm(&err, &x, &y_new);

            if !e.is_finite() || !all_finite(&f_new) {
                rejected += 1;
                last_was_rejected = true;
                h = proposed.min(h) * 0.2;
                continue;
            }
            if e <= 1.0 {
                s = s_new;
                slopes.push((f.clone() * dir, f_new.clone() * dir));
                std::mem::swap(&mut x, &mut y_new);
                f = f_new;
                times.push(to_t(s));
                states.push(x.clone());
                if max_abs(&x) > opts.escape_threshold {
                    return Err(OdeError::Escape { t: to_t(s) });
                }
                let factor = if e == 0.0 {
                    5.0
                } else {
                    (0.9 * e.powf(-0.2)).clamp(0.2, 5.0)
                };
                let factor = if last_was_rejected { factor.min(1.0) } else { factor };
                last_was_rejected = false;
                // a step shortened to land on a stop does not shrink the next one
                h = if hit_stop { proposed.max(h * factor) } else { h * factor };
            } else {
                rejected += 1;
                last_was_rejected = true;
                h *= (0.9 * e.powf(-0.2)).clamp(0.2, 1.0);
            }
        }
        // the field may jump at a breakpoint; restart with the right-sided slope
        if stop < length {
            f = field(to_t(s), &x) * dir;
            if !all_finite(&f) {
                return Err(OdeError::NonFinite { t: to_t(s) });
            }
        }
    }
    // land exactly on t1
    if let Some(last) = times.last_mut() {
        *last = t1;
    }
    Ok(DenseSolution {
        times,
        states,
        slopes,
        rejected,
    })
}

fn initial_step<F>(
    field: &F,
    x: &Mat,
    f: &Mat,
    t0: f64,
    dir: f64,
    opts: &IntegrateOptions,
    length: f64,
) -> f64
where
    F: Fn(f64, &Mat) -> Mat,
{
    let tol = opts.tol;
    let norm = |m: &Mat| -> f64 {
        let mut sum = 0.0;
        for k in 0..m.len() {
            let r = m[k] / (tol.atol + tol.rtol * x[k].abs());
            sum += r * r;
        }
        (sum / m.len() as f64).sqrt()
    };
    let d0 = norm(x);
    let d1 = norm(f);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    let h0 = h0.min(length);
    let x1 = x + f * h0;
    let f1 = field(t0 + dir * h0, &x1) * dir;
    let d2 = norm(&(f1 - f)) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    let mut h = (100.0 * h0).min(h1).min(length);
    if let Some(hmax) = opts.max_step {
        h = h.min(hmax);
    }
    if !h.is_finite() || h <= 0.0 {
        1e-6 * length
    } else {
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn scalar(v: f64) -> Mat {
        Mat::from_element(1, 1, v)
    }

    #[test]
    fn exponential_decay() {
        let sol = integrate(|_, x| -x, scalar(1.0), (0.0, 1.0), &IntegrateOptions::default())
            .unwrap();
        assert!((sol.final_state()[0] - (-1.0f64).exp()).abs() < 1e-8);
        assert_eq!(sol.final_time(), 1.0);
    }

    #[test]
    fn rotation_generator() {
        let a = Mat::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let sol = integrate(
            |_, x| &a * x,
            Mat::identity(2, 2),
            (0.0, PI),
            &IntegrateOptions::default(),
        )
        .unwrap();
        let diff = sol.final_state() + Mat::identity(2, 2);
        assert!(diff.amax() < 1e-7, "{diff}");
    }

    #[test]
    fn riccati_finite_escape_near_half_pi() {
        let opts = IntegrateOptions::default().with_escape_threshold(1e6);
        let err = integrate(|_, z| z.map(|v| 1.0 + v * v), scalar(0.0), (0.0, 3.0), &opts)
            .unwrap_err();
        match err {
            OdeError::Escape { t } => {
                // oracle: z = tan t passes 1e6 at atan(1e6)
                assert!((t - (1e6f64).atan()).abs() < 1e-3, "t = {t}");
                assert!((t - PI / 2.0).abs() < 1e-3);
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn sample_exact_at_nodes_and_accurate_between() {
        let sol = integrate(|_, x| -x, scalar(1.0), (0.0, 1.0), &IntegrateOptions::default())
            .unwrap();
        for (t, x) in sol.times().iter().zip(sol.states()) {
            assert_eq!(sol.sample(*t).unwrap(), *x);
        }
        assert!((sol.sample(0.5).unwrap()[0] - (-0.5f64).exp()).abs() < 1e-6);
        assert!(matches!(sol.sample(1.5), Err(OdeError::OutOfSpan { .. })));
    }

    #[test]
    fn sample_matches_tighter_reintegration() {
        // x' = t gives x = t^2/2; the Hermite interpolant is exact for cubics
        let field = |t: f64, _x: &Mat| scalar(t);
        let coarse = integrate(field, scalar(0.0), (0.0, 2.0), &IntegrateOptions::default())
            .unwrap();
        let fine_opts = IntegrateOptions::default().with_tol(Tolerances::default().scaled(0.1));
        let times = coarse.times().to_vec();
        for w in times.windows(2) {
            let mid = 0.5 * (w[0] + w[1]);
            let fine = integrate(field, scalar(0.0), (0.0, mid), &fine_opts).unwrap();
            let a = coarse.sample(mid).unwrap()[0];
            assert!((a - fine.final_state()[0]).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_span() {
        // x' = -x from t=1 (x=1) back to t=0 gives e
        let sol = integrate(|_, x| -x, scalar(1.0), (1.0, 0.0), &IntegrateOptions::default())
            .unwrap();
        assert!((sol.final_state()[0] - 1f64.exp()).abs() < 1e-7);
        assert_eq!(sol.initial_time(), 1.0);
        assert_eq!(sol.final_time(), 0.0);
        assert!(sol.times().windows(2).all(|w| w[1] < w[0]));
        let mid = sol.sample(0.5).unwrap()[0];
        assert!((mid - 0.5f64.exp()).abs() < 1e-6);
    }

    #[test]
    fn forward_then_backward_roundtrip() {
        let a = |t: f64| Mat::from_row_slice(2, 2, &[-0.3, 1.0 + 0.5 * t.sin(), -1.0, -0.2 * t]);
        let x0 = Mat::from_row_slice(2, 1, &[0.7, -1.2]);
        let opts = IntegrateOptions::default();
        let fwd = integrate(|t, x| a(t) * x, x0.clone(), (0.0, 3.0), &opts).unwrap();
        let back = integrate(|t, x| a(t) * x, fwd.final_state().clone(), (3.0, 0.0), &opts)
            .unwrap();
        let rel = (back.final_state() - &x0).norm() / x0.norm();
        assert!(rel < 1e-6, "rel = {rel}");
    }

    #[test]
    fn breakpoints_are_nodes() {
        let field = |t: f64, _x: &Mat| scalar(if t < 0.3 { 1.0 } else { -1.0 });
        let opts = IntegrateOptions::default().with_breakpoints(vec![0.3]);
        let sol = integrate(field, scalar(0.0), (0.0, 1.0), &opts).unwrap();
        assert!(sol.times().iter().any(|&t| (t - 0.3).abs() < 1e-14));
        assert!((sol.final_state()[0] - (0.3 - 0.7)).abs() < 1e-12);
        assert!((sol.sample(0.3).unwrap()[0] - 0.3).abs() < 1e-12);
        assert!((sol.sample(0.5).unwrap()[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn tighter_tolerance_does_not_worsen_error() {
        let exact = (-5.0f64).exp();
        let mut last = f64::INFINITY;
        for k in 0..4 {
            let tol = Tolerances::default().scaled(100.0 * 0.5f64.powi(k));
            let opts = IntegrateOptions::default().with_tol(tol);
            let sol = integrate(|_, x| -x, scalar(1.0), (0.0, 5.0), &opts).unwrap();
            let e = (sol.final_state()[0] - exact).abs();
            assert!(e <= last * 1.000001 + 1e-15, "k={k}: {e} > {last}");
            last = e;
        }
    }

    #[test]
    fn invalid_requests() {
        let opts = IntegrateOptions::default();
        assert!(matches!(
            integrate(|_, x| -x, scalar(1.0), (1.0, 1.0), &opts),
            Err(OdeError::InvalidRequest(_))
        ));
        let bad = IntegrateOptions::default().with_escape_threshold(0.0);
        assert!(matches!(
            integrate(|_, x| -x, scalar(1.0), (0.0, 1.0), &bad),
            Err(OdeError::InvalidRequest(_))
        ));
    }

    #[test]
    fn nonfinite_field_is_reported() {
        let opts = IntegrateOptions::default();
        let r = integrate(|_, x| x.map(|_| f64::NAN), scalar(1.0), (0.0, 1.0), &opts);
        assert!(matches!(r, Err(OdeError::NonFinite { .. })));
    }
}
