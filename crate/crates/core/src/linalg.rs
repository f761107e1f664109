//! Small dense linear-algebra helpers shared by the other modules.

use nalgebra::{DMatrix, DVector};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Largest accepted 2-norm condition number for matrices that get inverted.
pub const MAX_CONDITION: f64 = 1e12;

/// Operator 2-norm (largest singular value).
pub fn spectral_norm(m: &Matrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Ratio of extreme singular values; `inf` for singular input.
pub fn condition_number(m: &Matrix) -> f64 {
    if m.is_empty() {
        return 1.0;
    }
    let sv = m.singular_values();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        sv.max() / min
    }
}

/// Inverse through an LU factorisation, refusing matrices whose condition
/// number exceeds [`MAX_CONDITION`]. On refusal the condition number is
/// returned as the error value.
pub fn conditioned_inverse(m: &Matrix) -> Result<Matrix, f64> {
    let cond = condition_number(m);
    if !cond.is_finite() || cond > MAX_CONDITION {
        return Err(cond);
    }
    m.clone().lu().try_inverse().ok_or(cond)
}

/// Solve `m x = rhs` by LU; `None` when the factorisation is singular.
pub fn solve(m: &Matrix, rhs: &Vector) -> Option<Vector> {
    m.clone().lu().solve(rhs)
}

/// Smallest real part over the (complex) spectrum of `m`.
pub fn min_real_eigenvalue(m: &Matrix) -> f64 {
    assert!(m.is_square(), "eigenvalues need a square matrix");
    if m.nrows() == 1 {
        return m[(0, 0)];
    }
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::INFINITY, f64::min)
}

pub fn is_diagonal(m: &Matrix) -> bool {
    m.is_square()
        && (0..m.nrows()).all(|i| (0..m.ncols()).all(|j| i == j || m[(i, j)] == 0.0))
}

pub fn all_finite_vec(v: &Vector) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub fn all_finite_mat(m: &Matrix) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// Euclidean norm that stays well defined for empty vectors.
pub fn norm(v: &Vector) -> f64 {
    v.norm()
}

/// Row-major nested representation used by the JSON formats.
pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Option<Matrix> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return None;
    }
    Some(Matrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}
