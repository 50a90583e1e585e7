//! Small dense linear-algebra helpers shared across modules.
//!
//! All norms are the l1 vector norm and the operator norm it induces
//! (maximum absolute column sum), matching the norm used by the worked
//! two-dimensional example.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub fn l1_vector_norm(v: &DVector<f64>) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// Induced l1 operator norm: max over columns of the column's l1 norm.
pub fn l1_operator_norm(m: &DMatrix<f64>) -> f64 {
    let mut best = 0.0f64;
    for j in 0..m.ncols() {
        let s: f64 = m.column(j).iter().map(|x| x.abs()).sum();
        if s > best {
            best = s;
        }
    }
    best
}

pub fn is_finite_matrix(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// Orthonormal basis of the range of `m`, with rank decided by a
/// column-pivoted QR at relative tolerance `rel_tol`.
pub fn range_basis(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let n = m.nrows();
    let qr = m.clone().col_piv_qr();
    let q = qr.q();
    let r = qr.r();
    let kmax = r.nrows().min(r.ncols());
    let lead = if kmax > 0 { r[(0, 0)].abs() } else { 0.0 };
    let mut rank = 0;
    for i in 0..kmax {
        if r[(i, i)].abs() > rel_tol * lead.max(1e-300) {
            rank = i + 1;
        } else {
            break;
        }
    }
    if lead == 0.0 {
        rank = 0;
    }
    q.columns(0, rank.min(n)).into_owned()
}

/// Inverse via LU; errors when the matrix is singular.
pub fn invert(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone()
        .try_inverse()
        .ok_or(Error::SingularRestriction { cond: f64::INFINITY })
}

/// 2-norm condition number from the SVD.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 1.0;
    }
    let svd = m.clone().svd(false, false);
    let max = svd.singular_values.max();
    let min = svd.singular_values.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l1_norms() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, -3.0, -2.0, 0.5]);
        assert_eq!(l1_operator_norm(&m), 3.5);
        let v = DVector::from_vec(vec![1.0, -2.0]);
        assert_eq!(l1_vector_norm(&v), 3.0);
    }

    #[test]
    fn range_basis_of_rank_one_projection() {
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let b = range_basis(&p, 1e-10);
        assert_eq!(b.ncols(), 1);
        assert!((b[(0, 0)].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn range_basis_of_zero_matrix_is_empty() {
        let z = DMatrix::zeros(3, 3);
        assert_eq!(range_basis(&z, 1e-10).ncols(), 0);
    }
}
