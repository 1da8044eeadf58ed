//! Dense matrix primitives used by every update rule.
//!
//! [`Mat`] wraps a `nalgebra::DMatrix<f64>` and guarantees that every entry
//! is finite and that both dimensions are non-zero. Intermediate arithmetic
//! inside the crate runs on plain `DMatrix` values; results are re-wrapped
//! (and therefore re-checked) whenever they cross a block boundary.

use std::ops::Deref;

use nalgebra::{DMatrix, SVD};

use crate::error::{Error, Result};

/// Singular values at or below this fraction of the largest one make a
/// Procrustes problem degenerate (its maximizer is no longer unique).
pub const DEGENERACY_RATIO: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Mat(DMatrix<f64>);

impl Mat {
    /// Builds a matrix from entries listed row by row.
    pub fn from_row_slice(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Mat::from_row_slice",
                format!("{} entries for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Self::from_dmatrix(DMatrix::from_row_slice(rows, cols, data))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("Mat::from_rows", "ragged rows"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::from_row_slice(rows.len(), cols, &flat)
    }

    pub fn from_dmatrix(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() == 0 || m.ncols() == 0 {
            return Err(Error::invalid(format!(
                "matrix must be non-empty, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if let Some(pos) = m.iter().position(|v| !v.is_finite()) {
            // column-major storage
            let (r, c) = (pos % m.nrows(), pos / m.nrows());
            return Err(Error::Numerical(format!(
                "non-finite entry {} at ({r}, {c}) of a {}x{} matrix",
                m[(r, c)],
                m.nrows(),
                m.ncols()
            )));
        }
        Ok(Mat(m))
    }

    /// # Panics
    /// If either dimension is zero.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be non-zero");
        Mat(DMatrix::zeros(rows, cols))
    }

    /// # Panics
    /// If `n` is zero.
    pub fn identity(n: usize) -> Self {
        assert!(n > 0, "matrix dimensions must be non-zero");
        Mat(DMatrix::identity(n, n))
    }

    pub fn as_dmatrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_dmatrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    pub fn t(&self) -> Mat {
        Mat(self.0.transpose())
    }

    pub fn matmul(&self, rhs: &Mat) -> Result<Mat> {
        if self.cols() != rhs.rows() {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(), rhs.shape()),
            ));
        }
        Mat::from_dmatrix(&self.0 * &rhs.0)
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.0.norm_squared()
    }

    pub fn min_entry(&self) -> f64 {
        self.0.min()
    }

    /// Entries in row-major order.
    pub fn to_row_major(&self) -> Vec<f64> {
        self.0.transpose().as_slice().to_vec()
    }
}

impl Deref for Mat {
    type Target = DMatrix<f64>;

    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

impl TryFrom<DMatrix<f64>> for Mat {
    type Error = Error;

    fn try_from(m: DMatrix<f64>) -> Result<Self> {
        Mat::from_dmatrix(m)
    }
}

/// Thin SVD `a = u * diag(s) * vt` with `s` sorted descending.
#[derive(Clone, Debug)]
pub struct SvdFactors {
    pub u: Mat,
    pub s: Vec<f64>,
    pub vt: Mat,
}

impl SvdFactors {
    pub fn reconstruct(&self) -> Mat {
        let sigma = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&self.s));
        Mat(&self.u.0 * sigma * &self.vt.0)
    }
}

/// Fails with a numerical error when the factors are not finite.
pub fn svd(a: &Mat) -> Result<SvdFactors> {
    let (u, s, vt) = svd_raw(&a.0)?;
    Ok(SvdFactors {
        u: Mat::from_dmatrix(u)?,
        s,
        vt: Mat::from_dmatrix(vt)?,
    })
}

pub(crate) fn svd_raw(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> {
    let max_iter = 200 * a.nrows().max(a.ncols()).max(10);
    let svd = SVD::try_new(a.clone(), true, true, f64::EPSILON, max_iter).ok_or_else(|| {
        Error::Numerical(format!(
            "SVD of a {}x{} matrix did not converge in {max_iter} iterations",
            a.nrows(),
            a.ncols()
        ))
    })?;
    let u = svd.u.expect("left singular vectors requested");
    let vt = svd.v_t.expect("right singular vectors requested");
    let s = svd.singular_values.iter().copied().collect();
    Ok((u, s, vt))
}

/// Default rank-truncation threshold `max(rows, cols) * eps * s_max`.
pub fn default_pinv_tol(rows: usize, cols: usize, s_max: f64) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON * s_max
}

/// Moore-Penrose pseudoinverse. Singular values `<= tol` are treated as zero;
/// `None` selects [`default_pinv_tol`].
pub fn pinv(a: &Mat, tol: Option<f64>) -> Result<Mat> {
    if let Some(t) = tol {
        if !(t >= 0.0) {
            return Err(Error::invalid(format!(
                "pinv tolerance must be >= 0, got {t}"
            )));
        }
    }
    Mat::from_dmatrix(pinv_raw(&a.0, tol)?)
}

pub(crate) fn pinv_raw(a: &DMatrix<f64>, tol: Option<f64>) -> Result<DMatrix<f64>> {
    pinv_with(a, |s_max| {
        tol.unwrap_or_else(|| default_pinv_tol(a.nrows(), a.ncols(), s_max))
    })
}

/// Pseudoinverse dropping singular values `<= rel * s_max`.
pub(crate) fn pinv_rel_raw(a: &DMatrix<f64>, rel: f64) -> Result<DMatrix<f64>> {
    pinv_with(a, |s_max| rel * s_max)
}

fn pinv_with(a: &DMatrix<f64>, tol: impl FnOnce(f64) -> f64) -> Result<DMatrix<f64>> {
    let (u, s, vt) = svd_raw(a)?;
    let tol = tol(s.first().copied().unwrap_or(0.0));
    // pinv = V_r diag(1/s_r) U_r^T over the retained triplets only; the
    // discarded singular vectors may be non-finite when s is exactly zero.
    let rank = s.iter().take_while(|&&sv| sv > tol).count();
    let mut v_scaled = vt.rows(0, rank).transpose();
    for (j, &sv) in s[..rank].iter().enumerate() {
        v_scaled.column_mut(j).unscale_mut(sv);
    }
    let out = v_scaled * u.columns(0, rank).transpose();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "pseudoinverse of a {}x{} matrix is not finite",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(out)
}

/// `[A]^+ = (|A| + A) / 2`
pub fn pos_part(a: &Mat) -> Mat {
    Mat(pos_raw(&a.0))
}

/// `[A]^- = (|A| - A) / 2`
pub fn neg_part(a: &Mat) -> Mat {
    Mat(neg_raw(&a.0))
}

// Written as max(.,0) so that pos - neg == a holds exactly and 2a cannot overflow.
pub(crate) fn pos_raw(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub(crate) fn neg_raw(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.map(|v| if v < 0.0 { -v } else { 0.0 })
}

/// Outcome of an orthogonal Procrustes solve.
#[derive(Clone, Debug)]
pub struct Procrustes {
    pub h: Mat,
    /// The input was rank-deficient, so `h` is one of many maximizers.
    pub degenerate: bool,
}

/// Row-orthonormal `H` (k x n) maximizing `tr(H U)` for `U` of shape n x k.
///
/// With the thin SVD `U = P S Q^T` the maximizer is `H = Q P^T` and the
/// attained value is the sum of the singular values of `U`.
pub fn procrustes_max(u: &Mat) -> Result<Procrustes> {
    if u.cols() > u.rows() {
        return Err(Error::shape(
            "procrustes_max",
            format!("need cols <= rows, got {:?}", u.shape()),
        ));
    }
    let (polar, degenerate) = polar_factor(&u.0)?;
    Ok(Procrustes {
        h: Mat::from_dmatrix(polar.transpose())?,
        degenerate,
    })
}

/// Column-orthonormal factor `P Q^T` of `a = P S Q^T` (rows >= cols), i.e. the
/// maximizer of `tr(W^T a)` over matrices with orthonormal columns.
pub(crate) fn polar_factor(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    debug_assert!(a.nrows() >= a.ncols());
    let (u, s, vt) = svd_raw(a)?;
    let s_max = s.first().copied().unwrap_or(0.0);
    let s_min = s.last().copied().unwrap_or(0.0);
    let degenerate = s_max <= 0.0 || s_min <= DEGENERACY_RATIO * s_max;
    Ok((u * vt, degenerate))
}

/// `|| M M^T - I ||_F`, the distance of `m` from having orthonormal rows.
pub fn row_orthonormality_residual(m: &Mat) -> f64 {
    let gram = &m.0 * m.0.transpose();
    (gram - DMatrix::<f64>::identity(m.rows(), m.rows())).norm()
}
