//! Dense factorizations backed by faer, exposed over nalgebra storage.

use faer::linalg::solvers::{DenseSolveCore, Solve, SolveLstsq};
use faer::{Mat, MatMut, MatRef, Side};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub fn view(m: &DMatrix<f64>) -> MatRef<'_, f64> {
    MatRef::from_column_major_slice(m.as_slice(), m.nrows(), m.ncols())
}

pub fn to_nalgebra(m: MatRef<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn col_mut(v: &mut DVector<f64>) -> MatMut<'_, f64> {
    let n = v.len();
    MatMut::from_column_major_slice_mut(v.as_mut_slice(), n, 1)
}

fn mat_mut(m: &mut DMatrix<f64>) -> MatMut<'_, f64> {
    let (r, c) = (m.nrows(), m.ncols());
    MatMut::from_column_major_slice_mut(m.as_mut_slice(), r, c)
}

/// Jitter schedule for covariance factorizations: relative to the mean diagonal,
/// starting at 1e-10 and growing tenfold up to 1e-6.
pub const JITTER_START: f64 = 1e-10;
pub const JITTER_MAX: f64 = 1e-6;

/// Lower Cholesky factor of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    llt: faer::linalg::solvers::Llt<f64>,
    jitter: f64,
}

impl Cholesky {
    /// Plain factorization, no jitter.
    pub fn new(a: &DMatrix<f64>) -> Option<Self> {
        view(a)
            .llt(Side::Lower)
            .ok()
            .map(|llt| Cholesky { llt, jitter: 0.0 })
    }

    /// Factorizes `a`, adding diagonal jitter on failure. Returns the factor and
    /// leaves `a` untouched.
    pub fn with_jitter(a: &DMatrix<f64>) -> Result<Self> {
        if let Some(c) = Self::new(a) {
            return Ok(c);
        }
        let n = a.nrows().max(1);
        let scale = (a.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
        let mut rel = JITTER_START;
        let mut work = a.clone();
        while rel <= JITTER_MAX * (1.0 + 1e-9) {
            let jitter = rel * scale;
            for i in 0..a.nrows() {
                work[(i, i)] = a[(i, i)] + jitter;
            }
            if let Ok(llt) = view(&work).llt(Side::Lower) {
                log::debug!("cholesky needed jitter {jitter:.3e}");
                return Ok(Cholesky { llt, jitter });
            }
            rel *= 10.0;
        }
        Err(Error::Factorization)
    }

    pub fn dim(&self) -> usize {
        self.llt.L().nrows()
    }

    /// Diagonal jitter that was added, 0 if none.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.llt.solve_in_place(col_mut(&mut x));
        x
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.llt.solve_in_place(mat_mut(&mut x));
        x
    }

    /// L⁻¹ b.
    pub fn forward(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.llt.L().solve_lower_triangular_in_place(col_mut(&mut x));
        x
    }

    pub fn log_det(&self) -> f64 {
        let l = self.llt.L();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        to_nalgebra(self.llt.inverse().as_ref())
    }
}

/// Square solve by partial-pivot LU. Returns `None` when the smallest pivot is
/// below `rcond` times the largest.
pub fn lu_solve(a: &DMatrix<f64>, b: &DMatrix<f64>, rcond: f64) -> Option<DMatrix<f64>> {
    let lu = view(a).partial_piv_lu();
    let u = lu.U();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for i in 0..u.nrows() {
        let d = u[(i, i)].abs();
        lo = lo.min(d);
        hi = hi.max(d);
    }
    if !(hi > 0.0) || lo < rcond * hi {
        return None;
    }
    let mut x = b.clone();
    lu.solve_in_place(mat_mut(&mut x));
    if x.iter().all(|v| v.is_finite()) {
        Some(x)
    } else {
        None
    }
}

/// Least-squares solution of `a x ≈ b`. Uses column-pivoted QR when `a` is
/// tall with numerically full column rank, otherwise the minimum-norm
/// solution from the SVD.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let (m, n) = a.shape();
    if m >= n && n > 0 {
        let qr = view(a).col_piv_qr();
        let r = qr.R();
        let r0 = r[(0, 0)].abs();
        let full = (0..n).all(|i| r[(i, i)].abs() > 1e-12 * r0) && r0 > 0.0;
        if full {
            let rhs = MatRef::from_column_major_slice(b.as_slice(), m, 1);
            let x = qr.solve_lstsq(rhs);
            return Ok(DVector::from_fn(n, |i, _| x[(i, 0)]));
        }
    }
    let s = svd(a)?;
    let tol = m.max(n) as f64 * f64::EPSILON * s.s.get(0).copied().unwrap_or(0.0);
    let utb = s.u.tr_mul(b);
    let mut y = DVector::zeros(n);
    for i in 0..s.s.len() {
        if s.s[i] > tol {
            y[i] = utb[i] / s.s[i];
        }
    }
    Ok(&s.v * y)
}

/// Full singular value decomposition a = U diag(s) Vᵀ, singular values descending.
pub struct SvdParts {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v: DMatrix<f64>,
}

pub fn svd(a: &DMatrix<f64>) -> Result<SvdParts> {
    let s = view(a)
        .svd()
        .map_err(|e| Error::Numerical(format!("svd: {e:?}")))?;
    let sv = s.S().column_vector();
    Ok(SvdParts {
        u: to_nalgebra(s.U()),
        s: DVector::from_fn(sv.nrows(), |i, _| sv[i]),
        v: to_nalgebra(s.V()),
    })
}

pub fn matmul(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let c: Mat<f64> = view(a) * view(b);
    to_nalgebra(c.as_ref())
}

/// aᵀa, exploiting symmetry of the result.
pub fn gram(a: &DMatrix<f64>) -> DMatrix<f64> {
    let c: Mat<f64> = view(a).transpose() * view(a);
    to_nalgebra(c.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd(n: usize) -> DMatrix<f64> {
        let b = DMatrix::from_fn(n, n, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.4);
        &b * b.transpose() + DMatrix::identity(n, n)
    }

    #[test]
    fn cholesky_solve_and_logdet() {
        let a = spd(6);
        let c = Cholesky::new(&a).unwrap();
        let b = DVector::from_fn(6, |i, _| i as f64 - 2.0);
        let x = c.solve(&b);
        assert!((&a * &x - &b).norm() < 1e-12);
        let ld = a.clone().cholesky().unwrap().determinant().ln();
        assert!((c.log_det() - ld).abs() < 1e-12);
        let y = c.forward(&b);
        // ‖L⁻¹b‖² = bᵀA⁻¹b
        assert!((y.norm_squared() - b.dot(&x)).abs() < 1e-12);
        assert!((c.inverse() * &a - DMatrix::identity(6, 6)).norm() < 1e-12);
    }

    #[test]
    fn jitter_rescues_semidefinite() {
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let a = &v * v.transpose();
        assert!(Cholesky::new(&a).is_none());
        let c = Cholesky::with_jitter(&a).unwrap();
        assert!(c.jitter() > 0.0);
        let neg = -DMatrix::<f64>::identity(3, 3);
        assert!(Cholesky::with_jitter(&neg).is_err());
    }

    #[test]
    fn lu_and_svd() {
        let a = spd(5) + DMatrix::from_fn(5, 5, |i, j| (i as f64) - (j as f64));
        let b = DMatrix::from_fn(5, 2, |i, j| (i + j) as f64);
        let x = lu_solve(&a, &b, 1e-14).unwrap();
        assert!((&a * &x - &b).norm() < 1e-11);
        let s = svd(&a).unwrap();
        let rec = &s.u * DMatrix::from_diagonal(&s.s) * s.v.transpose();
        assert!((rec - &a).norm() < 1e-11);
        assert!(s.s[0] >= s.s[4]);
        let tall = DMatrix::from_fn(7, 3, |i, j| ((i * 5 + j * 2) % 7) as f64 + (i == j) as i32 as f64);
        let rhs = DVector::from_fn(7, |i, _| (i as f64).sin());
        let x = lstsq(&tall, &rhs).unwrap();
        let ne = (tall.transpose() * &tall).lu().solve(&(tall.transpose() * &rhs)).unwrap();
        assert!((x - ne).norm() < 1e-10);
        // rank-deficient: minimum-norm solution
        let rd = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let x = lstsq(&rd, &DVector::from_element(3, 2.0)).unwrap();
        assert!((x - DVector::from_element(2, 1.0)).norm() < 1e-12);
        let sing = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(lu_solve(&sing, &DMatrix::identity(2, 2), 1e-12).is_none());
    }
}
