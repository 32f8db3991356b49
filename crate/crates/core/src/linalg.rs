//! Small dense Hermitian matrix helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

pub fn zeros(m: usize) -> CMatrix {
    CMatrix::zeros(m, m)
}

pub fn identity(m: usize) -> CMatrix {
    CMatrix::identity(m, m)
}

/// `acc += weight * y y^H`
#[inline]
pub fn add_outer(acc: &mut CMatrix, y: &[Complex64], weight: f64) {
    let m = y.len();
    for j in 0..m {
        let yj = y[j].conj() * weight;
        for i in 0..m {
            acc[(i, j)] += y[i] * yj;
        }
    }
}

/// Replaces `a` with `(a + a^H) / 2`.
pub fn hermitize(a: &mut CMatrix) {
    let m = a.nrows();
    for i in 0..m {
        a[(i, i)] = Complex64::new(a[(i, i)].re, 0.0);
        for j in (i + 1)..m {
            let v = (a[(i, j)] + a[(j, i)].conj()) * 0.5;
            a[(i, j)] = v;
            a[(j, i)] = v.conj();
        }
    }
}

pub fn trace_re(a: &CMatrix) -> f64 {
    (0..a.nrows()).map(|i| a[(i, i)].re).sum()
}

/// Largest deviation of `a` from its conjugate transpose.
pub fn hermitian_error(a: &CMatrix) -> f64 {
    let m = a.nrows();
    let mut worst = 0.0f64;
    for i in 0..m {
        for j in 0..m {
            worst = worst.max((a[(i, j)] - a[(j, i)].conj()).norm());
        }
    }
    worst
}

/// `a + eps * tr(a)/M * I`.
pub fn diagonal_load(a: &CMatrix, eps: f64) -> CMatrix {
    let m = a.nrows();
    let level = eps * trace_re(a) / m as f64;
    let mut out = a.clone();
    for i in 0..m {
        out[(i, i)] += Complex64::new(level, 0.0);
    }
    out
}

/// Inverse and log-determinant of a Hermitian positive-definite matrix.
#[derive(Debug, Clone)]
pub struct HermitianInverse {
    pub inverse: CMatrix,
    pub log_det: f64,
}

impl HermitianInverse {
    /// Cholesky factorisation; `None` when the matrix is not numerically positive definite.
    pub fn new(a: &CMatrix) -> Option<Self> {
        let chol = a.clone().cholesky()?;
        let l = chol.l_dirty();
        let mut log_det = 0.0;
        for i in 0..a.nrows() {
            let d = l[(i, i)].re;
            if !(d.is_finite() && d > 0.0) {
                return None;
            }
            log_det += 2.0 * d.ln();
        }
        let mut inverse = chol.inverse();
        hermitize(&mut inverse);
        if inverse.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return None;
        }
        Some(Self { inverse, log_det })
    }

    /// `y^H A^{-1} y`, real for Hermitian `A`.
    #[inline]
    pub fn quad_form(&self, y: &[Complex64]) -> f64 {
        quad_form(&self.inverse, y)
    }
}

/// `y^H A y` for Hermitian `A` (imaginary rounding residue dropped).
#[inline]
pub fn quad_form(a: &CMatrix, y: &[Complex64]) -> f64 {
    let m = y.len();
    let mut acc = 0.0;
    for j in 0..m {
        let mut col = Complex64::new(0.0, 0.0);
        for i in 0..m {
            col += y[i].conj() * a[(i, j)];
        }
        acc += (col * y[j]).re;
    }
    acc
}

/// Eigen-decomposition of a Hermitian matrix, eigenvalues sorted descending
/// (by signed value) with matching unit-norm eigenvectors as columns.
pub fn hermitian_eigen(a: &CMatrix) -> (Vec<f64>, CMatrix) {
    let mut sym = a.clone();
    hermitize(&mut sym);
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..a.nrows()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = CMatrix::from_fn(a.nrows(), a.nrows(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Principal (largest signed eigenvalue) eigenpair of a Hermitian matrix.
pub fn principal_eigenpair(a: &CMatrix) -> (f64, CVector) {
    let (values, vectors) = hermitian_eigen(a);
    (values[0], vectors.column(0).into_owned())
}

/// `sigma * u u^H`.
pub fn rank_one(sigma: f64, u: &CVector) -> CMatrix {
    let m = u.len();
    CMatrix::from_fn(m, m, |i, j| u[i] * u[j].conj() * sigma)
}
