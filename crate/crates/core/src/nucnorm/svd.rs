//! One-sided Jacobi SVD in double precision.

use nalgebra::{DMatrix, DVector};

use super::NucNormError;

const MAX_SWEEPS: usize = 100;

/// `A = u * diag(sigma) * v^T` with `sigma` descending.
#[derive(Clone, Debug, PartialEq)]
pub struct Svd {
    /// `m x k` with orthonormal columns, `k = min(m, n)`.
    pub u: DMatrix<f64>,
    pub sigma: DVector<f64>,
    /// `n x k` with orthonormal columns.
    pub v: DMatrix<f64>,
}

impl Svd {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.u * DMatrix::from_diagonal(&self.sigma) * self.v.transpose()
    }
}

pub fn svd(a: &DMatrix<f64>) -> Result<Svd, NucNormError> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(NucNormError::NonFinite);
    }
    if a.nrows() < a.ncols() {
        let t = svd(&a.transpose())?;
        return Ok(Svd {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        });
    }
    let (m, n) = a.shape();
    let mut w = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    let mut converged = n < 2;
    // Columns this small relative to the matrix are treated as zero.
    let floor = (a.norm_squared() * 1e-30).max(f64::MIN_POSITIVE);
    let tol = 4.0 * m as f64 * f64::EPSILON;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = w.column(p).norm_squared();
                let beta = w.column(q).norm_squared();
                let gamma = w.column(p).dot(&w.column(q));
                if alpha <= floor || beta <= floor || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(NucNormError::SvdNotConverged { sweeps: MAX_SWEEPS });
    }

    let norms: Vec<f64> = (0..n).map(|j| w.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let scale = norms.iter().fold(0.0f64, |a, &b| a.max(b));
    let mut u = DMatrix::<f64>::zeros(m, n);
    let mut vs = DMatrix::<f64>::zeros(n, n);
    let mut sigma = DVector::<f64>::zeros(n);
    let mut missing = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        sigma[k] = norms[j];
        vs.set_column(k, &v.column(j));
        if norms[j] > scale * 1e-15 && norms[j] > 0.0 {
            u.set_column(k, &(w.column(j) / norms[j]));
        } else {
            missing.push(k);
        }
    }
    complete_orthonormal(&mut u, &missing);
    Ok(Svd { u, sigma, v: vs })
}

fn rotate(m: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    for i in 0..m.nrows() {
        let (x, y) = (m[(i, p)], m[(i, q)]);
        m[(i, p)] = c * x - s * y;
        m[(i, q)] = s * x + c * y;
    }
}

/// Fills the listed columns with unit vectors orthogonal to all others.
fn complete_orthonormal(u: &mut DMatrix<f64>, missing: &[usize]) {
    let m = u.nrows();
    let mut candidate = 0;
    for &k in missing {
        while candidate < m {
            let mut e = DVector::<f64>::zeros(m);
            e[candidate] = 1.0;
            candidate += 1;
            for j in 0..u.ncols() {
                if j != k {
                    let proj = u.column(j).dot(&e);
                    e -= u.column(j) * proj;
                }
            }
            let norm = e.norm();
            if norm > 1e-8 {
                u.set_column(k, &(e / norm));
                break;
            }
        }
    }
}

/// Soft-thresholds the singular values of `a` by `tau`.
pub fn svt(a: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>, NucNormError> {
    let mut d = svd(a)?;
    d.sigma.apply(|s| *s = (*s - tau).max(0.0));
    Ok(d.reconstruct())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_diagonal() {
        let d = svd(&DMatrix::identity(3, 3)).unwrap();
        assert_eq!(d.sigma.as_slice(), &[1.0, 1.0, 1.0]);
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 3.0]);
        let d = svd(&a).unwrap();
        assert_eq!(d.sigma.as_slice(), &[3.0, 1.0]);
    }

    #[test]
    fn rank_one_outer_product() {
        let a = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let b = DVector::from_vec(vec![3.0, 1.0, 0.0, 2.0]);
        let m = &a * b.transpose();
        let d = svd(&m).unwrap();
        assert!((d.sigma[0] - a.norm() * b.norm()).abs() < 1e-12);
        assert!(d.sigma.iter().skip(1).all(|&s| s < 1e-12));
        assert!((d.u.transpose() * &d.u - DMatrix::identity(3, 3)).norm() < 1e-10);
        assert!((d.reconstruct() - m).norm() < 1e-12);
    }

    #[test]
    fn zero_matrix_has_orthonormal_factors() {
        let d = svd(&DMatrix::zeros(3, 3)).unwrap();
        assert!((d.u.transpose() * &d.u - DMatrix::identity(3, 3)).norm() < 1e-12);
        assert!(d.sigma.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn svt_cases() {
        let a = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 1.0]);
        let out = svt(&a, 2.0).unwrap();
        assert!((out - DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])).norm() < 1e-12);
        assert!((svt(&a, 0.0).unwrap() - &a).norm() < 1e-12);
        assert!(svt(&a, 3.0).unwrap().norm() < 1e-12);
    }

    #[test]
    fn rejects_nan() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, f64::NAN]);
        assert!(matches!(svd(&a), Err(NucNormError::NonFinite)));
    }
}
