//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::linalg::balancing::balance_parlett_reinsch;
use nalgebra::{Cholesky, DMatrix, DVector, Schur, SymmetricEigen};
use num_complex::Complex64;

pub type Mat = DMatrix<f64>;
pub type CMat = DMatrix<Complex64>;

/// Eigenvalues of a real square matrix (balanced before the Schur sweep).
/// Returns `None` if the QR iteration does not converge.
pub fn eigenvalues(m: &Mat) -> Option<Vec<Complex64>> {
    if m.nrows() == 0 {
        return Some(Vec::new());
    }
    let mut balanced = m.clone();
    balance_parlett_reinsch(&mut balanced);
    let schur = Schur::try_new(balanced, f64::EPSILON, 10_000)?;
    let ev = schur.complex_eigenvalues();
    if ev.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return None;
    }
    Some(ev.iter().copied().collect())
}

pub fn spectral_radius(m: &Mat) -> Option<f64> {
    eigenvalues(m).map(|ev| ev.iter().fold(0.0f64, |acc, z| acc.max(z.norm())))
}

/// Largest real part of the spectrum.
pub fn spectral_abscissa(m: &Mat) -> Option<f64> {
    eigenvalues(m).map(|ev| ev.iter().fold(f64::NEG_INFINITY, |acc, z| acc.max(z.re)))
}

pub fn sigma_max(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

pub fn sigma_max_complex(m: &CMat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

pub fn to_complex(m: &Mat) -> CMat {
    m.map(|v| Complex64::new(v, 0.0))
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Inverse of a symmetric positive definite matrix, `None` if not SPD.
pub fn spd_inverse(m: &Mat) -> Option<Mat> {
    if m.nrows() == 0 {
        return Some(m.clone());
    }
    Cholesky::new(m.clone()).map(|c| c.inverse())
}

/// Full-rank factor `F` with `F Fᵀ ≈ M` for a symmetric positive
/// semidefinite `M`. Negative eigenvalues are clipped at zero and
/// eigenvalues below `rel_cut · λmax` are dropped.
pub fn psd_factor(m: &Mat, rel_cut: f64) -> Mat {
    let n = m.nrows();
    if n == 0 {
        return Mat::zeros(0, 0);
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let lmax = eig.eigenvalues.max().max(0.0);
    if lmax <= 0.0 {
        return Mat::zeros(n, 0);
    }
    let keep: Vec<usize> = (0..n)
        .filter(|&i| eig.eigenvalues[i] > rel_cut * lmax)
        .collect();
    let mut f = Mat::zeros(n, keep.len());
    for (col, &i) in keep.iter().enumerate() {
        let s = eig.eigenvalues[i].sqrt();
        for r in 0..n {
            f[(r, col)] = eig.eigenvectors[(r, i)] * s;
        }
    }
    f
}

/// Eigenvector of `m` for an eigenvalue approximately equal to `lambda`,
/// by shifted inverse iteration in complex arithmetic. Unit Euclidean norm.
pub fn eigenvector(m: &Mat, lambda: Complex64) -> Option<DVector<Complex64>> {
    let n = m.nrows();
    let scale = m.norm().max(1.0);
    // perturb the shift slightly so the shifted matrix stays invertible
    let shift = lambda + Complex64::new(1e-13 * scale, 1e-13 * scale);
    let mut shifted = to_complex(m);
    for i in 0..n {
        shifted[(i, i)] -= shift;
    }
    let lu = shifted.lu();
    let mut v = DVector::from_fn(n, |i, _| Complex64::new(1.0 / (1.0 + i as f64), 0.3));
    v /= Complex64::new(v.norm(), 0.0);
    for _ in 0..6 {
        let mut w = lu.solve(&v)?;
        let nrm = w.norm();
        if !nrm.is_finite() || nrm == 0.0 {
            return None;
        }
        w /= Complex64::new(nrm, 0.0);
        v = w;
    }
    Some(v)
}

/// Residual `‖M v − λ v‖ / (‖M‖ ‖v‖)`.
pub fn eigen_residual(m: &Mat, lambda: Complex64, v: &DVector<Complex64>) -> f64 {
    let mc = to_complex(m);
    let r = &mc * v - v * lambda;
    r.norm() / (m.norm().max(1e-300) * v.norm())
}

/// Block matrix from a 2×2 arrangement of equally partitioned blocks.
pub fn block2(a11: &Mat, a12: &Mat, a21: &Mat, a22: &Mat) -> Mat {
    let (r1, c1) = a11.shape();
    let (r2, c2) = a22.shape();
    let mut m = Mat::zeros(r1 + r2, c1 + c2);
    m.view_mut((0, 0), (r1, c1)).copy_from(a11);
    m.view_mut((0, c1), (r1, c2)).copy_from(a12);
    m.view_mut((r1, 0), (r2, c1)).copy_from(a21);
    m.view_mut((r1, c1), (r2, c2)).copy_from(a22);
    m
}

/// The symplectic form `J = [[0, I], [-I, 0]]` of size `2n`.
pub fn symplectic_j(n: usize) -> Mat {
    let mut j = Mat::zeros(2 * n, 2 * n);
    for i in 0..n {
        j[(i, n + i)] = 1.0;
        j[(n + i, i)] = -1.0;
    }
    j
}

/// 2-norm condition number (∞ when singular).
pub fn condition_number(m: &Mat) -> f64 {
    if m.is_empty() {
        return 1.0;
    }
    let sv = m.singular_values();
    let smin = sv.min();
    if smin <= 0.0 {
        f64::INFINITY
    } else {
        sv.max() / smin
    }
}
