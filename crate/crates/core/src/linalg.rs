//! Dense Cholesky factorization with a graded jitter policy, on top of faer.

use faer::linalg::triangular_solve::{solve_lower_triangular_in_place, solve_upper_triangular_in_place};
use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::cholesky::llt::factor::{cholesky_in_place, cholesky_in_place_scratch, LltRegularization};
use faer::{Mat, MatMut, MatRef, Par};

use crate::error::{Error, Result};

/// First jitter level, relative to the covariance scale.
pub const JITTER_START: f64 = 1e-8;
/// Largest jitter level tried before giving up, relative to the covariance scale.
pub const JITTER_MAX: f64 = 1e-4;

/// Lower Cholesky factor `L` of a symmetric positive-definite matrix, `A + jitter·I = L·Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Mat<f64>,
    jitter: f64,
}

impl Cholesky {
    /// Factorizes the lower triangle of `a`.
    ///
    /// The plain matrix is tried first. On failure, `JITTER_START·scale` is added to the
    /// diagonal and escalated by factors of ten up to `JITTER_MAX·scale`.
    pub fn factor(a: &Mat<f64>, scale: f64) -> Result<Self> {
        let n = a.nrows();
        if n == 0 {
            return Ok(Cholesky { l: Mat::zeros(0, 0), jitter: 0.0 });
        }
        if let Some(l) = attempt(a, 0.0) {
            return Ok(Cholesky { l, jitter: 0.0 });
        }
        let scale = if scale.is_finite() && scale > 0.0 { scale } else { 1.0 };
        let mut jitter = JITTER_START * scale;
        let limit = JITTER_MAX * scale * (1.0 + 1e-9);
        while jitter <= limit {
            if let Some(l) = attempt(a, jitter) {
                return Ok(Cholesky { l, jitter });
            }
            jitter *= 10.0;
        }
        Err(failure(a, jitter / 10.0))
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn l(&self) -> MatRef<'_, f64> {
        self.l.as_ref()
    }

    /// Jitter that had to be added to the diagonal (0 if none).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Overwrites `rhs` with `L⁻¹·rhs`.
    pub fn solve_lower_in_place(&self, rhs: MatMut<'_, f64>) {
        if self.dim() > 0 {
            solve_lower_triangular_in_place(self.l.as_ref(), rhs, Par::Seq);
        }
    }

    /// Overwrites `rhs` with `(L·Lᵀ)⁻¹·rhs`.
    pub fn solve_in_place(&self, mut rhs: MatMut<'_, f64>) {
        if self.dim() > 0 {
            solve_lower_triangular_in_place(self.l.as_ref(), rhs.as_mut(), Par::Seq);
            solve_upper_triangular_in_place(self.l.transpose(), rhs, Par::Seq);
        }
    }

    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let mut m = column(b);
        self.solve_in_place(m.as_mut());
        m.col(0).iter().copied().collect()
    }

    pub fn solve_lower_vec(&self, b: &[f64]) -> Vec<f64> {
        let mut m = column(b);
        self.solve_lower_in_place(m.as_mut());
        m.col(0).iter().copied().collect()
    }

    /// `log |L·Lᵀ|`.
    pub fn log_det(&self) -> f64 {
        (0..self.dim()).map(|i| self.l[(i, i)].ln()).sum::<f64>() * 2.0
    }

    /// Explicit inverse `(L·Lᵀ)⁻¹`.
    pub fn inverse(&self) -> Mat<f64> {
        let mut id = Mat::<f64>::identity(self.dim(), self.dim());
        self.solve_in_place(id.as_mut());
        id
    }

    /// Factor of the bordered matrix `[[A, B], [Bᵀ, C]]`, given this factor of `A`.
    ///
    /// Only the Schur complement `C − Bᵀ·A⁻¹·B` is factorized, so the cost is
    /// `O(n²·q + q³)` instead of a full refactorization.
    pub fn extend(&self, b: MatRef<'_, f64>, c: &Mat<f64>, scale: f64) -> Result<Cholesky> {
        let n = self.dim();
        let q = c.nrows();
        if b.nrows() != n || b.ncols() != q || c.ncols() != q {
            return Err(Error::Argument(format!(
                "bordered factor expects B of {n}x{q} and C of {q}x{q}"
            )));
        }
        let mut v = b.to_owned();
        self.solve_lower_in_place(v.as_mut());
        let mut schur = c.clone();
        if n > 0 {
            faer::linalg::matmul::matmul(
                schur.as_mut(),
                faer::Accum::Add,
                v.transpose(),
                v.as_ref(),
                -1.0,
                Par::Seq,
            );
        }
        let tail = Cholesky::factor(&schur, scale)?;
        let mut l = Mat::<f64>::zeros(n + q, n + q);
        for j in 0..n {
            for i in j..n {
                l[(i, j)] = self.l[(i, j)];
            }
        }
        for i in 0..q {
            for j in 0..n {
                l[(n + i, j)] = v[(j, i)];
            }
            for j in 0..=i {
                l[(n + i, n + j)] = tail.l[(i, j)];
            }
        }
        Ok(Cholesky { l, jitter: self.jitter.max(tail.jitter) })
    }
}

fn attempt(a: &Mat<f64>, jitter: f64) -> Option<Mat<f64>> {
    let n = a.nrows();
    let mut l = a.clone();
    for i in 0..n {
        l[(i, i)] += jitter;
    }
    let mut mem = MemBuffer::new(cholesky_in_place_scratch::<f64>(n, Par::Seq, Default::default()));
    let stack = MemStack::new(&mut mem);
    cholesky_in_place(l.as_mut(), LltRegularization::default(), Par::Seq, stack, Default::default())
        .ok()?;
    for j in 1..n {
        for i in 0..j {
            l[(i, j)] = 0.0;
        }
    }
    let ok = (0..n).all(|i| {
        let d = l[(i, i)];
        d.is_finite() && d > 0.0
    });
    ok.then_some(l)
}

fn failure(a: &Mat<f64>, jitter: f64) -> Error {
    let diag = (0..a.nrows()).map(|i| a[(i, i)]);
    let (min_diag, max_diag) =
        diag.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(d), hi.max(d)));
    Error::Numerical { size: a.nrows(), min_diag, max_diag, jitter }
}

/// Single-column matrix holding `v`.
pub fn column(v: &[f64]) -> Mat<f64> {
    Mat::from_fn(v.len(), 1, |i, _| v[i])
}

/// Squared Euclidean norms of the columns of `m`.
pub fn column_sq_norms(m: MatRef<'_, f64>) -> Vec<f64> {
    (0..m.ncols())
        .map(|j| m.col(j).iter().map(|v| v * v).sum())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd(n: usize) -> Mat<f64> {
        Mat::from_fn(n, n, |i, j| {
            let d = i as f64 - j as f64;
            (-0.5 * d * d / 4.0).exp() + if i == j { 0.1 } else { 0.0 }
        })
    }

    #[test]
    fn factor_reconstructs_matrix() {
        let a = spd(6);
        let c = Cholesky::factor(&a, 1.0).unwrap();
        assert_eq!(c.jitter(), 0.0);
        let rec = c.l() * c.l().transpose();
        for i in 0..6 {
            for j in 0..6 {
                assert!((rec[(i, j)] - a[(i, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn singular_matrix_gets_jitter() {
        // rank one
        let a = Mat::from_fn(4, 4, |_, _| 1.0);
        let c = Cholesky::factor(&a, 1.0).unwrap();
        assert!(c.jitter() >= JITTER_START);
    }

    #[test]
    fn indefinite_matrix_is_a_numerical_error() {
        let mut a = Mat::<f64>::identity(3, 3);
        a[(2, 2)] = -1.0;
        match Cholesky::factor(&a, 1.0) {
            Err(Error::Numerical { size: 3, .. }) => {}
            other => panic!("expected numerical error, got {other:?}"),
        }
    }

    #[test]
    fn extend_matches_full_factorization() {
        let a = spd(7);
        let head = Cholesky::factor(&a.subrows(0, 4).subcols(0, 4).to_owned(), 1.0).unwrap();
        let ext = head
            .extend(a.subrows(0, 4).subcols(4, 3), &a.subrows(4, 3).subcols(4, 3).to_owned(), 1.0)
            .unwrap();
        let full = Cholesky::factor(&a, 1.0).unwrap();
        for i in 0..7 {
            for j in 0..=i {
                assert!((ext.l()[(i, j)] - full.l()[(i, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn solve_and_log_det() {
        let a = spd(5);
        let c = Cholesky::factor(&a, 1.0).unwrap();
        let b = [1.0, -2.0, 0.5, 3.0, 0.0];
        let x = c.solve_vec(&b);
        for i in 0..5 {
            let r: f64 = (0..5).map(|j| a[(i, j)] * x[j]).sum();
            assert!((r - b[i]).abs() < 1e-10);
        }
        let inv = c.inverse();
        let id = &a * &inv;
        assert!((id[(2, 2)] - 1.0).abs() < 1e-10 && id[(1, 3)].abs() < 1e-10);
        assert!(c.log_det().is_finite());
    }
}
