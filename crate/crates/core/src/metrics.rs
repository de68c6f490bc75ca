//! Diagnostics: projectors, subspace and factor errors, misalignment,
//! orthogonality residual, an optimality-gap proxy, image metrics, the
//! heterogeneity index and spectra.

use crate::error::{HmfError, Result};
use crate::linalg;
use crate::losses;
use crate::matrix::DenseMatrix;
use crate::model::{FactorState, GroundTruth, LocalFactors, LossKind, ObservationSet, SourceObservation};
use crate::solver;

/// Power-iteration budget and tolerance for reported spectral norms.
pub const SPECTRUM_POWER_STEPS: usize = 1000;
pub const SPECTRUM_POWER_TOL: f64 = 1e-13;
/// Singular values below this fraction of the largest count as zero.
pub const NONZERO_SINGULAR_RELATIVE: f64 = 1e-10;

/// `U (UᵀU)⁻¹ Uᵀ`, computed as `W Wᵀ` with `W = U L⁻ᵀ` and symmetrized.
pub fn projection_matrix(u: &DenseMatrix) -> Result<DenseMatrix> {
    let gram_inv = linalg::gram_inverse_of(u, "projection_matrix")?;
    let p = u.matmul(&gram_inv.inverse)?.matmul_nt(u)?;
    Ok(p.symmetrized())
}

fn check_pairing(state: &FactorState, truth: &GroundTruth) -> Result<()> {
    if state.locals.len() != truth.locals.len() {
        return Err(HmfError::dim("source count", truth.locals.len(), state.locals.len()));
    }
    if state.u_g.rows() != truth.u_g.rows() {
        return Err(HmfError::dim("n1", truth.u_g.rows(), state.u_g.rows()));
    }
    Ok(())
}

/// `‖P_{U_g} − P_{U★_g}‖²_F + (1/N) Σᵢ ‖P_{U_l,i} − P_{U★_l,i}‖²_F`.
pub fn subspace_error(state: &FactorState, truth: &GroundTruth) -> Result<f64> {
    check_pairing(state, truth)?;
    let shared = projection_matrix(&state.u_g)?
        .sub(&projection_matrix(&truth.u_g)?)?
        .frobenius_norm_sq();
    let mut unique = 0.0;
    for (est, tru) in state.locals.iter().zip(&truth.locals) {
        unique += projection_matrix(&est.u_l)?
            .sub(&projection_matrix(&tru.u_l)?)?
            .frobenius_norm_sq();
    }
    Ok(shared + unique / truth.locals.len() as f64)
}

/// `(Σᵢ ‖U_g V_gᵢᵀ − U★_g V★_gᵢᵀ‖², Σᵢ ‖U_lᵢ V_lᵢᵀ − U★_lᵢ V★_lᵢᵀ‖²)`.
pub fn factor_error(state: &FactorState, truth: &GroundTruth) -> Result<(f64, f64)> {
    check_pairing(state, truth)?;
    let mut shared = 0.0;
    let mut unique = 0.0;
    for (est, tru) in state.locals.iter().zip(&truth.locals) {
        shared += state
            .u_g
            .matmul_nt(&est.v_g)?
            .sub(&truth.u_g.matmul_nt(&tru.v_g)?)?
            .frobenius_norm_sq();
        unique += est
            .u_l
            .matmul_nt(&est.v_l)?
            .sub(&tru.u_l.matmul_nt(&tru.v_l)?)?
            .frobenius_norm_sq();
    }
    Ok((shared, unique))
}

/// `Σᵢ ‖(U_g V_gᵢᵀ + U_lᵢ V_lᵢᵀ) − (truth signal)ᵢ‖²_F`.
pub fn reconstruction_error(state: &FactorState, truth: &GroundTruth) -> Result<f64> {
    check_pairing(state, truth)?;
    let mut total = 0.0;
    for (i, est) in state.locals.iter().enumerate() {
        total += est.reconstruct(&state.u_g)?.sub(&truth.signal(i)?)?.frobenius_norm_sq();
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MisalignmentReport {
    /// `1 − lambda_max`, clamped to `[0, 1]`.
    pub theta: f64,
    pub lambda_max: f64,
    pub n_sources: usize,
}

/// Largest eigenvalue of the averaged projectors onto each factor's span.
pub fn misalignment(u_list: &[DenseMatrix]) -> Result<MisalignmentReport> {
    let first = u_list
        .first()
        .ok_or_else(|| HmfError::Parameter("misalignment needs at least one factor".into()))?;
    let d = first.rows();
    let mut avg = DenseMatrix::zeros(d, d);
    for (i, u) in u_list.iter().enumerate() {
        if u.rows() != d {
            return Err(HmfError::dim(format!("misalignment factor {i}"), d, u.rows()));
        }
        avg = avg.add(&projection_matrix(u)?)?;
    }
    let avg = avg.scale(1.0 / u_list.len() as f64);
    let lambda_max = linalg::symmetric_eigen(&avg).values[0];
    Ok(MisalignmentReport {
        theta: (1.0 - lambda_max).clamp(0.0, 1.0),
        lambda_max,
        n_sources: u_list.len(),
    })
}

/// `maxᵢ ‖u_gᵀ u_lᵢ‖_F / ((1 + ‖u_g‖_F)(1 + ‖u_lᵢ‖_F))`; zero for an empty list.
pub fn orthogonality_residual(u_g: &DenseMatrix, u_l_list: &[DenseMatrix]) -> Result<f64> {
    let ng = u_g.frobenius_norm();
    let mut worst: f64 = 0.0;
    for u_l in u_l_list {
        let cross = u_g.matmul_tn(u_l)?.frobenius_norm();
        worst = worst.max(cross / ((1.0 + ng) * (1.0 + u_l.frobenius_norm())));
    }
    Ok(worst)
}

/// `f̃(state) − f̃(reference)`, a proxy for the optimality gap.
///
/// With ground truth the reference keeps the true subspaces with orthonormal
/// bases (so the regularizer vanishes) and the true signal. Without it, the
/// state's own subspaces are orthonormalized and the coefficients are refit in
/// closed form. Either reference is feasible but not necessarily optimal, so
/// the value can dip slightly below zero.
pub fn objective_gap(
    observations: &ObservationSet,
    state: &FactorState,
    kind: LossKind,
    beta: f64,
    truth: Option<&GroundTruth>,
) -> Result<f64> {
    let reference = match truth {
        Some(t) => orthonormal_truth_reference(t)?,
        None => refit_reference(observations, state, kind)?,
    };
    Ok(losses::objective(observations, state, kind, beta)? - losses::objective(observations, &reference, kind, beta)?)
}

fn orthonormal_truth_reference(truth: &GroundTruth) -> Result<FactorState> {
    let (q_g, r_g) = linalg::orthonormalize(&truth.u_g)?;
    let locals = truth
        .locals
        .iter()
        .map(|l| {
            let (q_l, r_l) = linalg::orthonormalize(&l.u_l)?;
            Ok(LocalFactors {
                v_g: l.v_g.matmul_nt(&r_g)?,
                u_l: q_l,
                v_l: l.v_l.matmul_nt(&r_l)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(FactorState { u_g: q_g, locals })
}

fn refit_reference(observations: &ObservationSet, state: &FactorState, kind: LossKind) -> Result<FactorState> {
    let (q_g, _) = linalg::orthonormalize(&state.u_g)?;
    let r1 = q_g.cols();
    let locals = observations
        .sources
        .iter()
        .zip(&state.locals)
        .map(|(source, l)| {
            let deflated = l.u_l.sub(&q_g.matmul(&q_g.matmul_tn(&l.u_l)?)?)?;
            let (q_l, _) = linalg::orthonormalize(&deflated)?;
            let basis = q_g.hstack(&q_l)?;
            let v = match (kind, &source.mask) {
                (LossKind::Pse, Some(_)) => masked_closed_form_v(source, &basis)?,
                _ => solver::closed_form_v(&source.matrix, &basis)?,
            };
            Ok(LocalFactors {
                v_g: v.columns(0, r1),
                u_l: q_l,
                v_l: v.columns(r1, basis.cols()),
            })
        })
        .collect::<Result<_>>()?;
    Ok(FactorState { u_g: q_g, locals })
}

/// Per-column least squares over observed rows only.
fn masked_closed_form_v(source: &SourceObservation, basis: &DenseMatrix) -> Result<DenseMatrix> {
    let mask = source.mask.as_ref().expect("caller checked mask");
    let k = basis.cols();
    let mut rows_per_col: Vec<Vec<usize>> = vec![Vec::new(); source.cols()];
    for &(r, c) in &mask.entries {
        rows_per_col[c].push(r);
    }
    let mut v = DenseMatrix::zeros(source.cols(), k);
    for (c, rows) in rows_per_col.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let sub = DenseMatrix::from_fn(rows.len(), k, |i, j| basis[(rows[i], j)]);
        let m = DenseMatrix::from_fn(rows.len(), 1, |i, _| source.matrix[(rows[i], c)]);
        let coeffs = solver::closed_form_v(&m, &sub)?;
        for j in 0..k {
            v[(c, j)] = coeffs[(0, j)];
        }
    }
    Ok(v)
}

/// Mean squared difference and PSNR in dB. PSNR is `+inf` for identical inputs.
pub fn mse_psnr(a: &DenseMatrix, b: &DenseMatrix, peak: f64) -> Result<(f64, f64)> {
    a.check_same_shape(b, "mse_psnr")?;
    if peak.is_nan() || peak <= 0.0 {
        return Err(HmfError::Parameter(format!("peak must be positive, got {peak}")));
    }
    let n = a.data().len();
    if n == 0 {
        return Err(HmfError::Parameter("mse of an empty matrix".into()));
    }
    let mse = a.sub(b)?.frobenius_norm_sq() / n as f64;
    let psnr = if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    };
    Ok((mse, psnr))
}

/// Column-wise ℓ1 norm of the unique signal `u_l v_lᵀ`.
pub fn heterogeneity_index(u_l: &DenseMatrix, v_l: &DenseMatrix) -> Result<Vec<f64>> {
    let signal = u_l.matmul_nt(v_l)?;
    let mut out = vec![0.0; signal.cols()];
    for r in 0..signal.rows() {
        for (o, v) in out.iter_mut().zip(signal.row(r)) {
            *o += v.abs();
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    pub sigma_max: f64,
    pub sigma_min_nonzero: f64,
    pub per_source_sigma_max: Vec<f64>,
    pub per_source_sigma_min_nonzero: Vec<f64>,
}

pub enum SpectrumInput<'a> {
    Observations(&'a ObservationSet),
    /// Uses the noise-free signal of each source.
    Truth(&'a GroundTruth),
}

/// Per-source largest singular value (power iteration) and smallest nonzero
/// singular value (full SVD). For ground truth the smallest nonzero value is
/// the `(r1 + r2)`-th singular value of the signal.
pub fn spectrum_report(input: SpectrumInput<'_>) -> Result<SpectrumReport> {
    let mut per_max = Vec::new();
    let mut per_min = Vec::new();
    match input {
        SpectrumInput::Observations(obs) => {
            for s in &obs.sources {
                let sigma = linalg::spectral_norm(&s.matrix, SPECTRUM_POWER_STEPS, SPECTRUM_POWER_TOL);
                let values = linalg::svd(&s.matrix).singular_values;
                let cutoff = NONZERO_SINGULAR_RELATIVE * values.first().copied().unwrap_or(0.0);
                let smallest = values.iter().copied().filter(|&v| v > cutoff).fold(f64::INFINITY, f64::min);
                per_max.push(sigma);
                per_min.push(if smallest.is_finite() { smallest } else { 0.0 });
            }
        }
        SpectrumInput::Truth(truth) => {
            for (i, l) in truth.locals.iter().enumerate() {
                let signal = truth.signal(i)?;
                let rank = truth.u_g.cols() + l.u_l.cols();
                let values = linalg::svd(&signal).singular_values;
                per_max.push(linalg::spectral_norm(&signal, SPECTRUM_POWER_STEPS, SPECTRUM_POWER_TOL));
                per_min.push(values.get(rank - 1).copied().unwrap_or(0.0));
            }
        }
    }
    Ok(SpectrumReport {
        sigma_max: per_max.iter().copied().fold(0.0, f64::max),
        sigma_min_nonzero: per_min.iter().copied().fold(f64::INFINITY, f64::min).min(f64::MAX),
        per_source_sigma_max: per_max,
        per_source_sigma_min_nonzero: per_min,
    })
}
