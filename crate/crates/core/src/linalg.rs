use nalgebra::{Cholesky, DMatrix, DMatrixView, Dyn};

use crate::error::{CmgpError, Result};

/// Number of jitter escalations after the plain attempt.
pub const MAX_JITTER_RETRIES: u32 = 6;
/// First jitter, relative to the mean diagonal.
pub const BASE_RELATIVE_JITTER: f64 = 1e-10;

/// Cholesky factorization with an escalating diagonal jitter.
///
/// Tries the matrix as given, then adds `1e-10 * tr/n`, growing tenfold per
/// retry for at most six retries. Returns the factor and the jitter added.
pub fn cholesky_with_jitter(matrix: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = matrix.nrows();
    if n == 0 {
        return Ok((Cholesky::new(DMatrix::zeros(0, 0)).expect("empty"), 0.0));
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(CmgpError::Numerical("matrix to factorize contains non-finite entries".into()));
    }
    if let Some(ch) = Cholesky::new(matrix.clone()) {
        return Ok((ch, 0.0));
    }
    let scale = (matrix.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut jitter = BASE_RELATIVE_JITTER * scale;
    for _ in 0..MAX_JITTER_RETRIES {
        let mut m = matrix.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(ch) = Cholesky::new(m) {
            log::debug!("cholesky needed jitter {jitter:e}");
            return Ok((ch, jitter));
        }
        jitter *= 10.0;
    }
    let min_eigenvalue = matrix.clone().symmetric_eigenvalues().min();
    Err(CmgpError::Factorization { jitter: jitter / 10.0, min_eigenvalue })
}

const TRIANGULAR_BLOCK: usize = 64;

/// Inverse of a lower-triangular matrix by recursive 2x2 blocking, so that
/// almost all the work happens in matrix products:
/// `[[A, 0], [B, C]]^{-1} = [[A^{-1}, 0], [-C^{-1} B A^{-1}, C^{-1}]]`.
pub fn lower_triangular_inverse(l: DMatrixView<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    if n <= TRIANGULAR_BLOCK {
        let mut inv = DMatrix::identity(n, n);
        l.solve_lower_triangular_mut(&mut inv);
        return inv;
    }
    let h = n / 2;
    let a_inv = lower_triangular_inverse(l.view((0, 0), (h, h)));
    let c_inv = lower_triangular_inverse(l.view((h, h), (n - h, n - h)));
    let b = l.view((h, 0), (n - h, h));
    let lower_left = -(&c_inv * (b * &a_inv));
    let mut out = DMatrix::zeros(n, n);
    out.view_mut((0, 0), (h, h)).copy_from(&a_inv);
    out.view_mut((h, h), (n - h, n - h)).copy_from(&c_inv);
    out.view_mut((h, 0), (n - h, h)).copy_from(&lower_left);
    out
}

/// `A^{-1} = L^{-T} L^{-1}` from the Cholesky factor of `A`.
pub fn spd_inverse(chol: &Cholesky<f64, Dyn>) -> DMatrix<f64> {
    let l = chol.l();
    let linv = lower_triangular_inverse(l.as_view());
    linv.transpose() * linv
}

/// Diagonal of `A^{-1}` from its Cholesky factor (squared column norms of `L^{-1}`).
pub fn inverse_diagonal(chol: &Cholesky<f64, Dyn>) -> Vec<f64> {
    let l = chol.l();
    let linv = lower_triangular_inverse(l.as_view());
    (0..l.nrows()).map(|j| linv.column(j).norm_squared()).collect()
}
