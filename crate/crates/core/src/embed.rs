//! Folding and group orthogonalization of embedding vectors.
//!
//! An `r`-vector folds into an `(r/k) × k` matrix whose column `j` holds
//! entries `j·r/k .. (j+1)·r/k`. Two embeddings are group orthogonal when
//! their folded forms satisfy `F(g)ᵀ F(l) = 0`.

use log::warn;

use crate::error::{HmfError, Result};
use crate::linalg;
use crate::matrix::DenseMatrix;

fn check_divisor(r: usize, k: usize) -> Result<usize> {
    if k == 0 || !r.is_multiple_of(k) {
        return Err(HmfError::Parameter(format!("fold factor {k} does not divide length {r}")));
    }
    Ok(r / k)
}

pub fn fold(v: &[f64], k: usize) -> Result<DenseMatrix> {
    let d = check_divisor(v.len(), k)?;
    Ok(DenseMatrix::from_fn(d, k, |i, j| v[j * d + i]))
}

pub fn unfold(m: &DenseMatrix) -> Vec<f64> {
    let (d, k) = m.shape();
    let mut v = Vec::with_capacity(d * k);
    for j in 0..k {
        v.extend((0..d).map(|i| m[(i, j)]));
    }
    v
}

fn project_ridged(a: &DenseMatrix, b: &DenseMatrix) -> Result<(DenseMatrix, bool)> {
    if a.rows() != b.rows() {
        return Err(HmfError::dim("slice_project rows", a.rows(), b.rows()));
    }
    let gram_inv = linalg::gram_inverse_of(a, "slice_project")?;
    if gram_inv.ridged {
        let p = a.matmul(&gram_inv.inverse.matmul(&a.matmul_tn(b)?)?)?;
        return Ok((p, true));
    }
    // Same projector through an orthonormal basis, which avoids squaring the
    // condition number of `a`.
    let (q, _) = linalg::orthonormalize(a)?;
    Ok((q.matmul(&q.matmul_tn(b)?)?, false))
}

/// `A (AᵀA)⁻¹ Aᵀ B`. Falls back to a ridged Gram inverse when `AᵀA` is
/// ill-conditioned.
pub fn slice_project(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    project_ridged(a, b).map(|(p, _)| p)
}

/// [`slice_project`] applied to each pair of slices independently.
pub fn slice_project_batch(a: &[DenseMatrix], b: &[DenseMatrix]) -> Result<Vec<DenseMatrix>> {
    if a.len() != b.len() {
        return Err(HmfError::dim("slice count", a.len(), b.len()));
    }
    a.iter().zip(b).map(|(a, b)| slice_project(a, b)).collect()
}

/// Embeddings stored as the columns of an `r × b` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub vectors: DenseMatrix,
    pub fold_k: usize,
}

impl EmbeddingBatch {
    pub fn new(vectors: DenseMatrix, fold_k: usize) -> Result<Self> {
        check_divisor(vectors.rows(), fold_k)?;
        Ok(EmbeddingBatch { vectors, fold_k })
    }

    pub fn dim(&self) -> usize {
        self.vectors.rows()
    }

    pub fn len(&self) -> usize {
        self.vectors.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.cols() == 0
    }

    pub fn folded(&self, j: usize) -> Result<DenseMatrix> {
        fold(&self.vectors.column(j), self.fold_k)
    }
}

fn check_pair(e_g: &EmbeddingBatch, e_l: &EmbeddingBatch) -> Result<()> {
    if e_g.vectors.shape() != e_l.vectors.shape() {
        return Err(HmfError::dim(
            "embedding batch shape",
            format!("{:?}", e_g.vectors.shape()),
            format!("{:?}", e_l.vectors.shape()),
        ));
    }
    if e_g.fold_k != e_l.fold_k {
        return Err(HmfError::dim("fold factor", e_g.fold_k, e_l.fold_k));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Deflated {
    pub batch: EmbeddingBatch,
    /// Columns whose folded shared block needed the ridge fallback.
    pub ridged_columns: Vec<usize>,
}

/// Per column: `l − F⁻¹(Proj(F(g), F(l)))`.
pub fn deflate_embeddings(e_g: &EmbeddingBatch, e_l: &EmbeddingBatch) -> Result<Deflated> {
    check_pair(e_g, e_l)?;
    let mut out = e_l.vectors.clone();
    let mut ridged_columns = Vec::new();
    for j in 0..e_l.len() {
        let g = e_g.folded(j)?;
        let l = e_l.folded(j)?;
        let (p, ridged) = project_ridged(&g, &l)?;
        if ridged {
            warn!("embedding column {j}: folded shared block is ill-conditioned, ridge applied");
            ridged_columns.push(j);
        }
        out.set_column(j, &unfold(&l.sub(&p)?));
    }
    Ok(Deflated {
        batch: EmbeddingBatch {
            vectors: out,
            fold_k: e_l.fold_k,
        },
        ridged_columns,
    })
}

/// `max_j ‖F(g_j)ᵀ F(l_j)‖_F / ((1 + ‖g_j‖)(1 + ‖l_j‖))`; zero for an empty batch.
pub fn group_orthogonality_residual(e_g: &EmbeddingBatch, e_l: &EmbeddingBatch) -> Result<f64> {
    check_pair(e_g, e_l)?;
    let mut worst: f64 = 0.0;
    for j in 0..e_g.len() {
        let g = e_g.folded(j)?;
        let l = e_l.folded(j)?;
        let cross = g.matmul_tn(&l)?.frobenius_norm();
        worst = worst.max(cross / ((1.0 + g.frobenius_norm()) * (1.0 + l.frobenius_norm())));
    }
    Ok(worst)
}
