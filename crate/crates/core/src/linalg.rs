//! Small dense kernels: Gram inverses with a ridge fallback, a cyclic Jacobi
//! symmetric eigensolver, a one-sided Jacobi SVD, power iteration and
//! Gram-Schmidt orthonormalization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{HmfError, Result};
use crate::matrix::DenseMatrix;

/// Condition number of a Gram matrix above which a ridge is added.
pub const RIDGE_CONDITION_LIMIT: f64 = 1e12;
/// Ridge size relative to `trace(G) / r`.
pub const RIDGE_RELATIVE: f64 = 1e-12;

/// Inverse of a symmetric positive (semi)definite matrix, with a flag telling
/// whether the ridge fallback was needed.
#[derive(Debug, Clone)]
pub struct RidgedInverse {
    pub inverse: DenseMatrix,
    pub ridged: bool,
}

/// Lower Cholesky factor, or `None` when `a` is not numerically positive definite.
pub fn cholesky(a: &DenseMatrix) -> Option<DenseMatrix> {
    let n = a.rows();
    debug_assert_eq!(n, a.cols());
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d.is_nan() || d <= 0.0 || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Some(l)
}

/// Solves `L Lᵀ X = B` given the lower factor `L`.
pub fn cholesky_solve(l: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let n = l.rows();
    let mut x = b.clone();
    for c in 0..b.cols() {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    x
}

/// Inverts a symmetric Gram matrix. When its condition number exceeds
/// [`RIDGE_CONDITION_LIMIT`], `RIDGE_RELATIVE * trace(G) / r * I` is added first.
pub fn gram_inverse(gram: &DenseMatrix, context: &str) -> Result<RidgedInverse> {
    let r = gram.rows();
    if r != gram.cols() {
        return Err(HmfError::dim(context, "square Gram matrix", format!("{}x{}", r, gram.cols())));
    }
    if r == 0 {
        return Ok(RidgedInverse {
            inverse: DenseMatrix::zeros(0, 0),
            ridged: false,
        });
    }
    if !gram.is_finite() {
        return Err(HmfError::Singular(format!("{context}: non-finite Gram matrix")));
    }
    let g = gram.symmetrized();
    let eig = symmetric_eigen(&g);
    let lmax = eig.values[0];
    let lmin = eig.values[r - 1];
    let well_conditioned = lmin > 0.0 && lmax / lmin <= RIDGE_CONDITION_LIMIT;

    let (system, ridged) = if well_conditioned {
        (g, false)
    } else {
        let ridge = RIDGE_RELATIVE * g.trace() / r as f64;
        let mut gr = g;
        for i in 0..r {
            gr[(i, i)] += ridge;
        }
        (gr, true)
    };
    let l = cholesky(&system)
        .ok_or_else(|| HmfError::Singular(format!("{context}: Gram matrix is rank deficient beyond the ridge")))?;
    Ok(RidgedInverse {
        inverse: cholesky_solve(&l, &DenseMatrix::identity(r)).symmetrized(),
        ridged,
    })
}

/// `(uᵀu)⁻¹` with the ridge fallback.
pub fn gram_inverse_of(u: &DenseMatrix, context: &str) -> Result<RidgedInverse> {
    gram_inverse(&u.matmul_tn(u)?, context)
}

/// Eigen-decomposition of a symmetric matrix; values sorted descending and
/// `vectors` holding the matching eigenvectors as columns.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: DenseMatrix,
}

/// Cyclic Jacobi rotations. Only the upper triangle's symmetric part is used.
pub fn symmetric_eigen(a: &DenseMatrix) -> SymmetricEigen {
    let n = a.rows();
    assert_eq!(n, a.cols(), "symmetric_eigen needs a square matrix");
    let mut m = a.symmetrized();
    let mut v = DenseMatrix::identity(n);
    let scale = m.frobenius_norm();

    if scale > 0.0 {
        for _sweep in 0..100 {
            let mut off = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    off += m[(p, q)] * m[(p, q)];
                }
            }
            if off.sqrt() <= 1e-17 * scale {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = m[(p, q)];
                    if apq == 0.0 {
                        continue;
                    }
                    let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                    let t = if theta.abs() > 1e150 {
                        0.5 / theta
                    } else {
                        theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                    };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    let tau = s / (1.0 + c);

                    m[(p, p)] -= t * apq;
                    m[(q, q)] += t * apq;
                    m[(p, q)] = 0.0;
                    m[(q, p)] = 0.0;
                    for r in 0..n {
                        if r == p || r == q {
                            continue;
                        }
                        let g = m[(r, p)];
                        let h = m[(r, q)];
                        let np = g - s * (h + g * tau);
                        let nq = h + s * (g - h * tau);
                        m[(r, p)] = np;
                        m[(p, r)] = np;
                        m[(r, q)] = nq;
                        m[(q, r)] = nq;
                    }
                    for r in 0..n {
                        let g = v[(r, p)];
                        let h = v[(r, q)];
                        v[(r, p)] = g - s * (h + g * tau);
                        v[(r, q)] = h + s * (g - h * tau);
                    }
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = DenseMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    SymmetricEigen { values, vectors }
}

/// Economy SVD `a = u · diag(singular_values) · vᵀ`, values descending.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DenseMatrix,
    pub singular_values: Vec<f64>,
    pub v: DenseMatrix,
}

/// One-sided (Hestenes) Jacobi SVD.
pub fn svd(a: &DenseMatrix) -> Svd {
    if a.rows() < a.cols() {
        let t = svd(&a.transpose());
        return Svd {
            u: t.v,
            singular_values: t.singular_values,
            v: t.u,
        };
    }
    let (m, n) = a.shape();
    // Row k of `w` is column k of the working matrix.
    let mut w = a.transpose();
    let mut v = DenseMatrix::identity(n);

    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = {
                    let wp = w.row(p);
                    let wq = w.row(q);
                    let mut al = 0.0;
                    let mut be = 0.0;
                    let mut ga = 0.0;
                    for k in 0..m {
                        al += wp[k] * wp[k];
                        be += wq[k] * wq[k];
                        ga += wp[k] * wq[k];
                    }
                    (al, be, ga)
                };
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..m {
                    let x = w[(p, k)];
                    let y = w[(q, k)];
                    w[(p, k)] = c * x - s * y;
                    w[(q, k)] = s * x + c * y;
                }
                for k in 0..n {
                    let x = v[(k, p)];
                    let y = v[(k, q)];
                    v[(k, p)] = c * x - s * y;
                    v[(k, q)] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = (0..n).map(|k| w.row(k).iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let singular_values: Vec<f64> = order.iter().map(|&k| norms[k]).collect();
    let u = DenseMatrix::from_fn(m, n, |r, c| {
        let k = order[c];
        if norms[k] > 0.0 {
            w[(k, r)] / norms[k]
        } else {
            0.0
        }
    });
    let v = DenseMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Svd {
        u,
        singular_values,
        v,
    }
}

/// Largest singular value by power iteration on `mᵀm`, from a fixed
/// pseudo-random start. Stops after `max_steps` or once the estimate changes
/// by less than `tol` relatively.
pub fn spectral_norm(m: &DenseMatrix, max_steps: usize, tol: f64) -> f64 {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x005e_ed0f_5eed);
    let mut x: Vec<f64> = (0..cols).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut x);
    let mut sigma = 0.0;
    for _ in 0..max_steps.max(1) {
        let y = mat_vec(m, &x);
        let next = norm(&y);
        if next == 0.0 {
            return 0.0;
        }
        x = mat_t_vec(m, &y);
        normalize(&mut x);
        let done = (next - sigma).abs() <= tol * next;
        sigma = next;
        if done {
            break;
        }
    }
    norm(&mat_vec(m, &x)).max(sigma)
}

fn mat_vec(m: &DenseMatrix, x: &[f64]) -> Vec<f64> {
    (0..m.rows()).map(|r| m.row(r).iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn mat_t_vec(m: &DenseMatrix, y: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for (r, &yr) in y.iter().enumerate() {
        for (o, &a) in out.iter_mut().zip(m.row(r)) {
            *o += a * yr;
        }
    }
    out
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn normalize(x: &mut [f64]) {
    let n = norm(x);
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
}

/// Thin QR by modified Gram-Schmidt with one reorthogonalization pass:
/// `u = q · r` with orthonormal `q` and upper-triangular `r`.
pub fn orthonormalize(u: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
    let (n, k) = u.shape();
    let mut q = u.transpose(); // rows are columns of u
    let mut r = DenseMatrix::zeros(k, k);
    let scale = u.frobenius_norm().max(f64::MIN_POSITIVE);
    for j in 0..k {
        for _pass in 0..2 {
            for i in 0..j {
                let dot: f64 = (0..n).map(|t| q[(i, t)] * q[(j, t)]).sum();
                r[(i, j)] += dot;
                for t in 0..n {
                    let qi = q[(i, t)];
                    q[(j, t)] -= dot * qi;
                }
            }
        }
        let nj = norm(q.row(j));
        if nj <= 1e-13 * scale {
            return Err(HmfError::Singular(format!(
                "orthonormalize: column {j} is linearly dependent"
            )));
        }
        r[(j, j)] = nj;
        q.row_mut(j).iter_mut().for_each(|v| *v /= nj);
    }
    Ok((q.transpose(), r))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_solves_spd_system() {
        let a = DenseMatrix::from_rows(&[[4.0, 2.0], [2.0, 3.0]]);
        let l = cholesky(&a).unwrap();
        let x = cholesky_solve(&l, &DenseMatrix::identity(2));
        let prod = a.matmul(&x).unwrap();
        assert!(prod.max_abs_diff(&DenseMatrix::identity(2)) < 1e-15);
    }

    #[test]
    fn gram_inverse_uses_ridge_only_when_ill_conditioned() {
        let good = DenseMatrix::from_rows(&[[2.0, 0.0], [0.0, 1.0]]);
        let inv = gram_inverse(&good, "t").unwrap();
        assert!(!inv.ridged);
        assert!((inv.inverse[(0, 0)] - 0.5).abs() < 1e-15);

        let bad = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 1e-14]]);
        let inv = gram_inverse(&bad, "t").unwrap();
        assert!(inv.ridged);
        assert!(inv.inverse.is_finite());
    }

    #[test]
    fn zero_gram_is_singular() {
        let z = DenseMatrix::zeros(2, 2);
        assert!(matches!(gram_inverse(&z, "t"), Err(HmfError::Singular(_))));
    }

    #[test]
    fn jacobi_eigen_of_diagonal_and_rotated() {
        let a = DenseMatrix::from_rows(&[[2.0, 1.0], [1.0, 2.0]]);
        let e = symmetric_eigen(&a);
        assert!((e.values[0] - 3.0).abs() < 1e-14);
        assert!((e.values[1] - 1.0).abs() < 1e-14);
        let v0 = e.vectors.column(0);
        assert!((v0[0].abs() - v0[1].abs()).abs() < 1e-14);
    }

    #[test]
    fn svd_reconstructs() {
        let a = DenseMatrix::from_fn(4, 6, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0 + 0.1 * i as f64);
        let s = svd(&a);
        let us = DenseMatrix::from_fn(4, 4, |i, j| s.u[(i, j)] * s.singular_values[j]);
        let rec = us.matmul_nt(&s.v).unwrap();
        assert!(rec.max_abs_diff(&a) < 1e-12);
        assert!(s.singular_values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn power_iteration_on_identity_and_diagonal() {
        assert!((spectral_norm(&DenseMatrix::identity(3), 30, 1e-8) - 1.0).abs() < 1e-12);
        let d = DenseMatrix::from_rows(&[[3.0, 0.0], [0.0, 1.0]]);
        assert!((spectral_norm(&d, 100, 1e-14) - 3.0).abs() < 1e-10);
    }

    #[test]
    fn orthonormalize_is_thin_qr() {
        let u = DenseMatrix::from_rows(&[[1.0, 2.0], [0.0, 1.0], [1.0, 0.0]]);
        let (q, r) = orthonormalize(&u).unwrap();
        let qtq = q.matmul_tn(&q).unwrap();
        assert!(qtq.max_abs_diff(&DenseMatrix::identity(2)) < 1e-15);
        assert!(q.matmul(&r).unwrap().max_abs_diff(&u) < 1e-15);
        assert_eq!(r[(1, 0)], 0.0);
    }

    #[test]
    fn orthonormalize_rejects_dependent_columns() {
        let u = DenseMatrix::from_rows(&[[1.0, 2.0], [1.0, 2.0]]);
        assert!(orthonormalize(&u).is_err());
    }
}
