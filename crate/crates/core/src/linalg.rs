//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{DsmError, Result};

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

pub fn symmetrized(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    symmetrize(&mut out);
    out
}

/// Eigenvalues of a symmetric matrix, sorted in decreasing order.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let eig = SymmetricEigen::new(symmetrized(m));
    let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let ev = sym_eigenvalues(m);
    let max = ev.first().copied().unwrap_or(0.0).abs();
    let min = ev.last().copied().unwrap_or(0.0);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Inverse and log-determinant of a symmetric positive definite matrix.
pub fn spd_inverse_logdet(m: &DMatrix<f64>, what: &str) -> Result<(DMatrix<f64>, f64)> {
    let sym = symmetrized(m);
    match sym.clone().cholesky() {
        Some(ch) => {
            let l = ch.l();
            let logdet = 2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>();
            let mut inv = ch.inverse();
            symmetrize(&mut inv);
            if !logdet.is_finite() || inv.iter().any(|v| !v.is_finite()) {
                return Err(DsmError::Singular {
                    what: what.to_string(),
                    condition: condition_number(&sym),
                });
            }
            Ok((inv, logdet))
        }
        None => Err(DsmError::Singular {
            what: what.to_string(),
            condition: condition_number(&sym),
        }),
    }
}

pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    spd_inverse_logdet(m, what).map(|(inv, _)| inv)
}

/// Number of eigenvalues above `rel_tol` times the largest one.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    let ev = sym_eigenvalues(m);
    let max = ev.first().copied().unwrap_or(0.0);
    if max <= 0.0 {
        return 0;
    }
    ev.iter().filter(|&&v| v > rel_tol * max).count()
}

/// Log pseudo-determinant using the `rank` largest eigenvalues.
pub fn log_pseudo_det(m: &DMatrix<f64>, rank: usize) -> Result<f64> {
    if rank == 0 {
        return Ok(0.0);
    }
    let ev = sym_eigenvalues(m);
    let mut total = 0.0;
    for &v in ev.iter().take(rank) {
        if v <= 0.0 || !v.is_finite() {
            return Err(DsmError::numerical(format!(
                "log pseudo-determinant: non-positive eigenvalue {v:e} within rank {rank}"
            )));
        }
        total += v.ln();
    }
    Ok(total)
}

/// Symmetric square root factor `L` with `L Lᵀ = V` for a PSD matrix.
/// Fails when the smallest eigenvalue is below `-1e-8 × largest`.
pub fn psd_factor(v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = v.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let eig = SymmetricEigen::new(symmetrized(v));
    let max = eig.eigenvalues.iter().fold(0.0_f64, |m, &e| m.max(e.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, &e| m.min(e));
    if min < -1e-8 * max.max(f64::MIN_POSITIVE) {
        return Err(DsmError::numerical(format!(
            "covariance is not positive semi-definite: min eigenvalue {min:.3e} (max {max:.3e})"
        )));
    }
    let mut factor = eig.eigenvectors.clone();
    for j in 0..n {
        let s = eig.eigenvalues[j].max(0.0).sqrt();
        for i in 0..n {
            factor[(i, j)] *= s;
        }
    }
    Ok(factor)
}

pub fn quad_form(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    v.dot(&(m * v))
}

/// Orthonormal basis for the complement of `c` (columns of a Householder reflector
/// with the first column dropped). `cᵀ Z = 0` and `Zᵀ Z = I`.
pub fn null_complement(c: &DVector<f64>) -> Option<DMatrix<f64>> {
    let k = c.len();
    let norm = c.norm();
    if k < 2 || norm <= f64::EPSILON * (k as f64) {
        return None;
    }
    let mut u = c.clone();
    let alpha = if c[0] >= 0.0 { -norm } else { norm };
    u[0] -= alpha;
    let unorm2 = u.norm_squared();
    let mut h = DMatrix::<f64>::identity(k, k);
    if unorm2 > 0.0 {
        h -= (&u * u.transpose()) * (2.0 / unorm2);
    }
    Some(h.columns(1, k - 1).into_owned())
}

/// Weighted cross product Xᵀ diag(w) X.
pub fn weighted_gram(x: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut xw = x.clone();
    for (i, mut row) in xw.row_iter_mut().enumerate() {
        row *= w[i];
    }
    let mut g = x.transpose() * xw;
    symmetrize(&mut g);
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_complement_is_orthonormal_and_orthogonal() {
        let c = DVector::from_vec(vec![3.0, 1.0, -2.0, 0.5]);
        let z = null_complement(&c).unwrap();
        assert_eq!(z.shape(), (4, 3));
        let ctz = c.transpose() * &z;
        assert!(ctz.amax() < 1e-12);
        let ztz = z.transpose() * &z;
        assert!((ztz - DMatrix::<f64>::identity(3, 3)).amax() < 1e-12);
    }

    #[test]
    fn spd_inverse_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(spd_inverse(&m, "test"), Err(DsmError::Singular { .. })));
    }

    #[test]
    fn psd_factor_reproduces_matrix() {
        let v = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let l = psd_factor(&v).unwrap();
        assert!((&l * l.transpose() - &v).amax() < 1e-12);
    }

    #[test]
    fn pseudo_det_ignores_null_space() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0, 0.0]));
        let ld = log_pseudo_det(&m, 2).unwrap();
        assert!((ld - 6.0_f64.ln()).abs() < 1e-12);
        assert_eq!(numerical_rank(&m, 1e-10), 2);
    }
}
