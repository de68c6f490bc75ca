//! Data-fit losses, the orthonormality regularizer, the full objective and its
//! analytic gradients.
//!
//! Both losses carry a factor ½, so the residual gradient is simply
//! `ℓ′ = M̂ − M` (restricted to observed cells for PSE).

use crate::error::{HmfError, Result};
use crate::matrix::DenseMatrix;
use crate::model::{FactorState, LocalFactors, LossKind, ObservationMask, ObservationSet, SourceObservation};

/// Masks covering less than this fraction of cells take the sparse path.
pub const SPARSE_COVERAGE_THRESHOLD: f64 = 0.2;

fn check_mask(m: &DenseMatrix, mask: Option<&ObservationMask>) -> Result<()> {
    if let Some(mask) = mask {
        if (mask.rows, mask.cols) != m.shape() {
            return Err(HmfError::dim(
                "observation mask",
                format!("{}x{}", m.rows(), m.cols()),
                format!("{}x{}", mask.rows, mask.cols),
            ));
        }
        if let Some(&(r, c)) = mask.entries.iter().find(|&&(r, c)| r >= mask.rows || c >= mask.cols) {
            return Err(HmfError::dim("observation mask entry", format!("< {}x{}", mask.rows, mask.cols), format!("({r},{c})")));
        }
    }
    Ok(())
}

/// The mask that actually applies: `None` means every cell counts.
fn effective_mask(kind: LossKind, mask: Option<&ObservationMask>) -> Option<&ObservationMask> {
    match kind {
        LossKind::Se => None,
        LossKind::Pse => mask,
    }
}

/// `ℓ′` for the given loss. Unobserved cells are exact zeros.
pub fn loss_gradient(
    kind: LossKind,
    m: &DenseMatrix,
    m_hat: &DenseMatrix,
    mask: Option<&ObservationMask>,
) -> Result<DenseMatrix> {
    m.check_same_shape(m_hat, "loss_gradient")?;
    check_mask(m, mask)?;
    Ok(residual(m, m_hat, effective_mask(kind, mask)))
}

fn residual(m: &DenseMatrix, m_hat: &DenseMatrix, mask: Option<&ObservationMask>) -> DenseMatrix {
    match mask {
        None => m_hat.zip_map(m, |a, b| a - b),
        Some(mask) => {
            let mut out = DenseMatrix::zeros(m.rows(), m.cols());
            for &(r, c) in &mask.entries {
                out[(r, c)] = m_hat[(r, c)] - m[(r, c)];
            }
            out
        }
    }
}

pub fn loss_value(
    kind: LossKind,
    m: &DenseMatrix,
    m_hat: &DenseMatrix,
    mask: Option<&ObservationMask>,
) -> Result<f64> {
    Ok(0.5 * loss_gradient(kind, m, m_hat, mask)?.frobenius_norm_sq())
}

/// `‖uᵀu − I‖²_F`.
pub fn orthonormality_defect(u: &DenseMatrix) -> f64 {
    let g = u.matmul_tn(u).expect("uᵀu is always conformable");
    let mut s = 0.0;
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let d = g[(i, j)] - if i == j { 1.0 } else { 0.0 };
            s += d * d;
        }
    }
    s
}

/// `g_i = β/2 ‖U_gᵀU_g − I‖² + β/2 ‖U_lᵀU_l − I‖²`.
pub fn regularizer(u_g: &DenseMatrix, u_l: &DenseMatrix, beta: f64) -> f64 {
    0.5 * beta * (orthonormality_defect(u_g) + orthonormality_defect(u_l))
}

/// `Σᵢ [ℓ(Mᵢ, U_g V_gᵢᵀ + U_lᵢ V_lᵢᵀ) + gᵢ]`. The `U_g` half of the
/// regularizer is counted once per source.
pub fn objective(observations: &ObservationSet, state: &FactorState, kind: LossKind, beta: f64) -> Result<f64> {
    if observations.sources.len() != state.locals.len() {
        return Err(HmfError::dim(
            "objective source count",
            observations.sources.len(),
            state.locals.len(),
        ));
    }
    let mut total = 0.0;
    for (source, local) in observations.sources.iter().zip(&state.locals) {
        let m_hat = local.reconstruct(&state.u_g)?;
        total += loss_value(kind, &source.matrix, &m_hat, source.mask.as_ref())?;
        total += regularizer(&state.u_g, &local.u_l, beta);
    }
    Ok(total)
}

/// Gradients of one source's regularized risk with respect to its four blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub u_g: DenseMatrix,
    pub v_g: DenseMatrix,
    pub u_l: DenseMatrix,
    pub v_l: DenseMatrix,
}

impl Gradients {
    pub fn is_finite(&self) -> bool {
        self.u_g.is_finite() && self.v_g.is_finite() && self.u_l.is_finite() && self.v_l.is_finite()
    }

    /// Squared norm of the three source-owned blocks.
    pub fn local_norm_sq(&self) -> f64 {
        self.v_g.frobenius_norm_sq() + self.u_l.frobenius_norm_sq() + self.v_l.frobenius_norm_sq()
    }
}

/// Loss, regularizer and gradients of one source, all from one residual.
#[derive(Debug, Clone)]
pub(crate) struct ClientEvaluation {
    pub loss: f64,
    pub regularizer: f64,
    pub gradients: Gradients,
}

fn check_blocks(
    observation: &SourceObservation,
    u_g: &DenseMatrix,
    v_g: &DenseMatrix,
    u_l: &DenseMatrix,
    v_l: &DenseMatrix,
) -> Result<()> {
    let (n1, n2) = observation.matrix.shape();
    let r1 = u_g.cols();
    let r2 = u_l.cols();
    let expect = [
        ("u_g", u_g, (n1, r1)),
        ("v_g", v_g, (n2, r1)),
        ("u_l", u_l, (n1, r2)),
        ("v_l", v_l, (n2, r2)),
    ];
    for (name, m, shape) in expect {
        if m.shape() != shape {
            return Err(HmfError::dim(
                format!("gradients: {name}"),
                format!("{}x{}", shape.0, shape.1),
                format!("{}x{}", m.rows(), m.cols()),
            ));
        }
    }
    check_mask(&observation.matrix, observation.mask.as_ref())
}

pub(crate) fn evaluate_client(
    observation: &SourceObservation,
    u_g: &DenseMatrix,
    local: &LocalFactors,
    kind: LossKind,
    beta: f64,
) -> Result<ClientEvaluation> {
    let LocalFactors { v_g, u_l, v_l } = local;
    check_blocks(observation, u_g, v_g, u_l, v_l)?;
    let r1 = u_g.cols();
    let u_cat = u_g.hstack(u_l)?;
    let v_cat = v_g.hstack(v_l)?;
    let mask = effective_mask(kind, observation.mask.as_ref());

    let (loss, lv, ltu) = match mask {
        Some(mask) if mask.coverage() < SPARSE_COVERAGE_THRESHOLD => sparse_products(&observation.matrix, mask, &u_cat, &v_cat),
        _ => {
            let m_hat = u_cat.matmul_nt(&v_cat)?;
            let l = residual(&observation.matrix, &m_hat, mask);
            (0.5 * l.frobenius_norm_sq(), l.matmul(&v_cat)?, l.matmul_tn(&u_cat)?)
        }
    };

    let k = u_cat.cols();
    let mut grad_u_g = lv.columns(0, r1);
    let mut grad_u_l = lv.columns(r1, k);
    add_regularizer_gradient(&mut grad_u_g, u_g, beta)?;
    add_regularizer_gradient(&mut grad_u_l, u_l, beta)?;
    Ok(ClientEvaluation {
        loss,
        regularizer: regularizer(u_g, u_l, beta),
        gradients: Gradients {
            u_g: grad_u_g,
            v_g: ltu.columns(0, r1),
            u_l: grad_u_l,
            v_l: ltu.columns(r1, k),
        },
    })
}

/// Residual products visiting observed cells only: returns
/// `(½‖ℓ′‖², ℓ′·V, ℓ′ᵀ·U)`.
fn sparse_products(
    m: &DenseMatrix,
    mask: &ObservationMask,
    u_cat: &DenseMatrix,
    v_cat: &DenseMatrix,
) -> (f64, DenseMatrix, DenseMatrix) {
    let k = u_cat.cols();
    let mut lv = DenseMatrix::zeros(m.rows(), k);
    let mut ltu = DenseMatrix::zeros(m.cols(), k);
    let mut sq = 0.0;
    for &(r, c) in &mask.entries {
        let ur = u_cat.row(r);
        let vc = v_cat.row(c);
        let fitted: f64 = ur.iter().zip(vc).map(|(a, b)| a * b).sum();
        let res = fitted - m[(r, c)];
        sq += res * res;
        for (o, &v) in lv.row_mut(r).iter_mut().zip(vc) {
            *o += res * v;
        }
        for (o, &u) in ltu.row_mut(c).iter_mut().zip(ur) {
            *o += res * u;
        }
    }
    (0.5 * sq, lv, ltu)
}

/// `grad += 2β u (uᵀu − I)`.
fn add_regularizer_gradient(grad: &mut DenseMatrix, u: &DenseMatrix, beta: f64) -> Result<()> {
    if beta == 0.0 {
        return Ok(());
    }
    let mut g = u.matmul_tn(u)?;
    for i in 0..g.rows() {
        g[(i, i)] -= 1.0;
    }
    let term = u.matmul(&g)?;
    *grad = grad.add_scaled(2.0 * beta, &term)?;
    Ok(())
}

/// Gradients of `f̃ᵢ` with respect to `(U_g, V_g, U_l, V_l)`.
pub fn gradients(
    observation: &SourceObservation,
    u_g: &DenseMatrix,
    v_g: &DenseMatrix,
    u_l: &DenseMatrix,
    v_l: &DenseMatrix,
    kind: LossKind,
    beta: f64,
) -> Result<Gradients> {
    let local = LocalFactors {
        v_g: v_g.clone(),
        u_l: u_l.clone(),
        v_l: v_l.clone(),
    };
    Ok(evaluate_client(observation, u_g, &local, kind, beta)?.gradients)
}
