//! Dense linear-algebra kernels with deterministic sign conventions.

use crate::error::{CoreError, Result};
use crate::{Matrix, Vector};

/// Singular value decomposition `A = U diag(s) V^T` with nonincreasing
/// singular values and a fixed sign convention: within each left singular
/// vector, the entry of largest magnitude is nonnegative.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub left_vectors: Matrix,
    pub singular_values: Vector,
    pub right_vectors: Matrix,
}

impl SvdResult {
    /// Reconstruct `U diag(s) V^T`.
    pub fn reconstruct(&self) -> Matrix {
        let mut scaled = self.left_vectors.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= self.singular_values[j];
        }
        &scaled * self.right_vectors.transpose()
    }
}

fn ensure_finite(a: &Matrix, context: &str) -> Result<()> {
    if a.iter().any(|x| !x.is_finite()) {
        return Err(CoreError::NonFiniteInput {
            context: context.to_string(),
        });
    }
    Ok(())
}

/// Flip signs in-place so the largest-magnitude entry of each column of `u`
/// is nonnegative; `v` columns are flipped in lockstep to preserve the
/// product.
fn fix_signs(u: &mut Matrix, v: &mut Matrix) {
    for j in 0..u.ncols() {
        let col = u.column(j);
        let mut best = 0usize;
        let mut best_abs = 0.0f64;
        for (i, &x) in col.iter().enumerate() {
            if x.abs() > best_abs {
                best_abs = x.abs();
                best = i;
            }
        }
        if col[best] < 0.0 {
            u.column_mut(j).neg_mut();
            if j < v.ncols() {
                v.column_mut(j).neg_mut();
            }
        }
    }
}

/// Full SVD returning all `min(rows, cols)` singular triplets.
pub fn full_svd(a: &Matrix) -> Result<SvdResult> {
    ensure_finite(a, "full_svd input")?;
    let svd = a.clone().svd(true, true);
    let mut u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let mut v = v_t.transpose();
    let s = Vector::from_iterator(svd.singular_values.len(), svd.singular_values.iter().copied());
    fix_signs(&mut u, &mut v);
    Ok(SvdResult {
        left_vectors: u,
        singular_values: s,
        right_vectors: v,
    })
}

/// Best rank-`k` approximation in Frobenius norm.
///
/// Returns `(U_k, s_k, V_k, Phi_k)` where `Phi_k = U_k diag(s_k) V_k^T`.
pub fn truncated_svd(a: &Matrix, k: usize) -> Result<(Matrix, Vector, Matrix, Matrix)> {
    let (rows, cols) = a.shape();
    if k < 1 || k > rows.min(cols) {
        return Err(CoreError::RankOutOfRange { k, rows, cols });
    }
    let svd = full_svd(a)?;
    let u_k = svd.left_vectors.columns(0, k).into_owned();
    let s_k = Vector::from_iterator(k, svd.singular_values.iter().take(k).copied());
    let v_k = svd.right_vectors.columns(0, k).into_owned();
    let mut scaled = u_k.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= s_k[j];
    }
    let phi_k = &scaled * v_k.transpose();
    Ok((u_k, s_k, v_k, phi_k))
}

/// Largest singular value. Zero-sized matrices report 0.
pub fn spectral_norm(a: &Matrix) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    a.clone().singular_values().max()
}

/// k-th largest singular value (1-based); 0 when `k` exceeds the rank budget.
pub fn kth_singular_value(a: &Matrix, k: usize) -> f64 {
    if k == 0 || k > a.nrows().min(a.ncols()) {
        return 0.0;
    }
    // nalgebra sorts singular values in decreasing order.
    let sv = a.clone().svd(false, false).singular_values;
    sv[k - 1]
}

/// Orthonormalize the columns of a tall matrix via thin QR, with the
/// diagonal of R forced nonnegative so the output is deterministic.
pub fn orthonormal_columns(a: &Matrix) -> Matrix {
    let (rows, cols) = a.shape();
    assert!(rows >= cols, "orthonormal_columns expects a tall matrix");
    let qr = a.clone().qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..cols {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Extend a matrix with orthonormal columns to a square orthogonal matrix.
///
/// The completion is chosen deterministically by repeatedly picking the
/// canonical basis vector with the largest residual after projection onto
/// the columns collected so far.
pub fn complete_orthonormal_basis(q: &Matrix) -> Matrix {
    let n = q.nrows();
    let p = q.ncols();
    assert!(p <= n);
    let mut cols: Vec<Vector> = q.column_iter().map(|c| c.into_owned()).collect();
    while cols.len() < n {
        let mut best: Option<(f64, Vector)> = None;
        for i in 0..n {
            let mut v = Vector::zeros(n);
            v[i] = 1.0;
            // Two Gram-Schmidt passes keep the residual orthogonal to
            // working precision.
            for _ in 0..2 {
                for c in &cols {
                    let proj = c.dot(&v);
                    v -= c * proj;
                }
            }
            let norm = v.norm();
            if best.as_ref().map_or(true, |(bn, _)| norm > *bn) {
                best = Some((norm, v));
            }
        }
        let (norm, v) = best.expect("nonempty candidate set");
        debug_assert!(norm > 1e-8, "degenerate basis completion");
        cols.push(v / norm);
    }
    Matrix::from_fn(n, n, |i, j| cols[j][i])
}

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted in
/// decreasing order and the same sign convention as [`full_svd`].
pub fn symmetric_eigen_sorted(a: &Matrix) -> (Vector, Matrix) {
    let eig = a.clone().symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = Vector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    let mut dummy = Matrix::zeros(n, n);
    fix_signs(&mut vectors, &mut dummy);
    (values, vectors)
}
