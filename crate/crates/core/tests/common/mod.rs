//! Independent reference implementations shared by the integration tests.
//! Everything here uses plain loops or nalgebra, never the library's own
//! linear algebra.
#![allow(dead_code)]

use hmf::{DenseMatrix, LossKind, ObservationMask};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Each cell kept with probability `p`; at least one cell is kept.
pub fn random_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize, p: f64) -> ObservationMask {
    let mut entries: Vec<(usize, usize)> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .filter(|_| rng.random::<f64>() < p)
        .collect();
    if entries.is_empty() {
        entries.push((0, 0));
    }
    ObservationMask::new(rows, cols, entries).unwrap()
}

pub fn to_na(m: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_fn(m.rows(), m.cols(), |r, c| m[(r, c)])
}

pub fn from_na(m: &DMatrix<f64>) -> DenseMatrix {
    DenseMatrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)])
}

pub fn naive_matmul_nt(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    assert_eq!(a.cols(), b.cols());
    DenseMatrix::from_fn(a.rows(), b.rows(), |i, j| (0..a.cols()).map(|k| a[(i, k)] * b[(j, k)]).sum())
}

/// `½ Σ (M − M̂)²` over the cells the loss sees.
pub fn naive_loss(kind: LossKind, m: &DenseMatrix, m_hat: &DenseMatrix, mask: Option<&ObservationMask>) -> f64 {
    let mut s = 0.0;
    match (kind, mask) {
        (LossKind::Pse, Some(mask)) => {
            for &(r, c) in &mask.entries {
                s += (m[(r, c)] - m_hat[(r, c)]).powi(2);
            }
        }
        _ => {
            for r in 0..m.rows() {
                for c in 0..m.cols() {
                    s += (m[(r, c)] - m_hat[(r, c)]).powi(2);
                }
            }
        }
    }
    0.5 * s
}

pub fn naive_defect(u: &DenseMatrix) -> f64 {
    let k = u.cols();
    let mut s = 0.0;
    for i in 0..k {
        for j in 0..k {
            let g: f64 = (0..u.rows()).map(|t| u[(t, i)] * u[(t, j)]).sum();
            let d = g - if i == j { 1.0 } else { 0.0 };
            s += d * d;
        }
    }
    s
}

pub fn reconstruct(u_g: &DenseMatrix, v_g: &DenseMatrix, u_l: &DenseMatrix, v_l: &DenseMatrix) -> DenseMatrix {
    let a = naive_matmul_nt(u_g, v_g);
    let b = naive_matmul_nt(u_l, v_l);
    DenseMatrix::from_fn(a.rows(), a.cols(), |r, c| a[(r, c)] + b[(r, c)])
}

/// One source's regularized risk, written out from the definition.
#[allow(clippy::too_many_arguments)]
pub fn naive_source_objective(
    kind: LossKind,
    m: &DenseMatrix,
    mask: Option<&ObservationMask>,
    u_g: &DenseMatrix,
    v_g: &DenseMatrix,
    u_l: &DenseMatrix,
    v_l: &DenseMatrix,
    beta: f64,
) -> f64 {
    let m_hat = reconstruct(u_g, v_g, u_l, v_l);
    naive_loss(kind, m, &m_hat, mask) + 0.5 * beta * (naive_defect(u_g) + naive_defect(u_l))
}

/// Orthogonal projector onto the column span of `u`, via nalgebra's SVD.
pub fn na_projector(u: &DenseMatrix) -> DMatrix<f64> {
    let svd = to_na(u).svd(true, false);
    let q = svd.u.unwrap();
    let smax = svd.singular_values.max();
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > 1e-12 * smax)
        .collect();
    let q = q.select_columns(&keep);
    &q * q.transpose()
}

pub fn rel_diff(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    let diff = DenseMatrix::from_fn(a.rows(), a.cols(), |r, c| a[(r, c)] - b[(r, c)]);
    diff.frobenius_norm() / b.frobenius_norm().max(1e-300)
}
