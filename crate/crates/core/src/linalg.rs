//! Small dense linear-algebra helpers shared by the likelihood, REML and
//! uncertainty code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative tolerance below which an eigenvalue is treated as zero.
pub const EIGEN_REL_TOL: f64 = 1e-10;

/// Symmetrize in place: `(A + A^T) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Cholesky factorization with a single jitter retry.
///
/// On failure the diagonal is inflated by `1e-8 * mean(diag)` once; the
/// returned flag reports whether the jitter was needed.
pub fn cholesky_with_jitter(m: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, bool)> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite("matrix has non-finite entries".into()));
    }
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok((c, false));
    }
    let n = m.nrows();
    let mean_diag = (0..n).map(|i| m[(i, i)]).sum::<f64>() / n.max(1) as f64;
    let jitter = 1e-8 * mean_diag.abs().max(f64::MIN_POSITIVE);
    let mut jittered = m.clone();
    for i in 0..n {
        jittered[(i, i)] += jitter;
    }
    match Cholesky::new(jittered) {
        Some(c) => {
            log::debug!("cholesky needed jitter {jitter:e}");
            Ok((c, true))
        }
        None => Err(Error::NotPositiveDefinite(format!(
            "cholesky failed for {n}x{n} matrix after jitter {jitter:e}"
        ))),
    }
}

/// `log|A|` from a Cholesky factor.
pub fn chol_logdet(c: &Cholesky<f64, Dyn>) -> f64 {
    let l = c.l_dirty();
    (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0
}

/// Eigenvalues of a symmetric matrix, sorted descending, with matching
/// eigenvector columns.
pub fn sym_eigen_sorted(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let eig = SymmetricEigen::new(sym);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(i).into_owned();
        // fix the sign so the largest-magnitude entry is positive
        let (imax, _) = col
            .iter()
            .enumerate()
            .fold((0, 0.0), |acc, (j, v)| if v.abs() > acc.1 + 1e-12 { (j, v.abs()) } else { acc });
        if col[imax] < 0.0 {
            col.neg_mut();
        }
        vectors.set_column(k, &col);
    }
    (values, vectors)
}

/// Log pseudo-determinant and null-space dimension of a symmetric PSD matrix.
///
/// Eigenvalues at or below `EIGEN_REL_TOL * max` count as zero.
pub fn log_pdet(m: &DMatrix<f64>) -> (f64, usize) {
    if m.nrows() == 0 {
        return (0.0, 0);
    }
    let (values, _) = sym_eigen_sorted(m);
    let max = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let tol = EIGEN_REL_TOL * max;
    let mut logdet = 0.0;
    let mut null = 0;
    for v in values.iter() {
        if *v > tol && max > 0.0 {
            logdet += v.ln();
        } else {
            null += 1;
        }
    }
    (logdet, null)
}

/// Orthonormal basis for the null space of `c` (rows are constraints).
pub fn null_space(c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = c.ncols();
    let ctc = c.transpose() * c;
    let (values, vectors) = sym_eigen_sorted(&ctc);
    let max = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let rank = values.iter().filter(|v| **v > EIGEN_REL_TOL * max && max > 0.0).count();
    if rank < c.nrows() {
        return Err(Error::RankDeficient(format!(
            "constraint matrix has rank {rank} < {} rows",
            c.nrows()
        )));
    }
    Ok(vectors.columns(rank, p - rank).into_owned())
}

/// Inverse of a symmetric positive definite matrix.
///
/// Falls back to an eigenvalue pseudo-inverse when Cholesky fails; the flag
/// reports the fallback.
pub fn spd_inverse(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let mut sym = m.clone();
    symmetrize(&mut sym);
    if let Some(c) = Cholesky::new(sym.clone()) {
        let mut inv = c.inverse();
        symmetrize(&mut inv);
        return (inv, false);
    }
    (pseudo_inverse(&sym), true)
}

/// Eigenvalue pseudo-inverse of a symmetric matrix.
pub fn pseudo_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (values, vectors) = sym_eigen_sorted(m);
    let max = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let n = values.len();
    let mut inv = DMatrix::zeros(n, n);
    for k in 0..n {
        if values[k] > EIGEN_REL_TOL * max && max > 0.0 {
            let u = vectors.column(k);
            inv += (u * u.transpose()) / values[k];
        }
    }
    inv
}
