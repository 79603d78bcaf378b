use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Orthonormal basis (as columns) of the complement of `a`, via one
/// Householder reflection. Returns the identity when `a` vanishes.
pub(crate) fn null_basis(a: &DVector<f64>) -> DMatrix<f64> {
    let d = a.len();
    let norm = a.norm();
    if norm == 0.0 || d < 2 {
        return DMatrix::identity(d, d);
    }
    let mut v = a.clone();
    let sign = if a[0] >= 0.0 { 1.0 } else { -1.0 };
    v[0] += sign * norm;
    let vv = v.dot(&v);
    let h = DMatrix::identity(d, d) - (&v * v.transpose()) * (2.0 / vv);
    h.columns(1, d - 1).into_owned()
}

pub(crate) fn cholesky(a: DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    if a.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Cholesky::new(a)
}

/// `X' diag(w) X`.
pub(crate) fn weighted_gram(x: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut xw = x.clone();
    for (mut row, wi) in xw.row_iter_mut().zip(w.iter()) {
        row *= *wi;
    }
    x.transpose() * xw
}

pub(crate) fn trace_of_solve(chol: &Cholesky<f64, Dyn>, b: &DMatrix<f64>) -> f64 {
    chol.solve(b).trace()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_basis_is_orthonormal_complement() {
        let a = DVector::from_vec(vec![3.0, -1.0, 2.0, 0.5]);
        let z = null_basis(&a);
        assert_eq!(z.shape(), (4, 3));
        assert!((a.transpose() * &z).amax() < 1e-12);
        assert!((z.transpose() * &z - DMatrix::identity(3, 3)).amax() < 1e-12);
    }
}
