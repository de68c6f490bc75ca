//! Corrected gradient descent for heterogeneous matrix factorization.
//!
//! Every iteration runs, per client, a correction that makes the unique factor
//! orthogonal to the shared one (an invariance transform of the bilinear
//! model, so the data fit is untouched), followed by one simultaneous gradient
//! step on all four blocks. The server then averages the clients' copies of
//! the shared factor in ascending client order.

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{HmfError, Result};
use crate::linalg::{self, RidgedInverse};
use crate::losses::{self, ClientEvaluation};
use crate::matrix::DenseMatrix;
use crate::metrics;
use crate::model::{
    validate_observations, validate_params, FactorState, FitTrace, GroundTruth, HyperParams, LocalFactors,
    LossKind, ObservationSet, SourceObservation, StepsizePolicy, TraceRecord,
};

/// Power-iteration steps used to estimate each source's spectral norm.
pub const AUTO_STEPSIZE_POWER_STEPS: usize = 30;
/// A run is declared divergent once the objective exceeds this multiple of its
/// starting value.
pub const DIVERGENCE_FACTOR: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Clients run concurrently on a pool with this many workers.
    ParallelClients(usize),
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub params: HyperParams,
    pub execution: Execution,
    pub trace_every: usize,
    /// When present, factor errors are recorded in the trace.
    pub reference: Option<GroundTruth>,
}

impl FitConfig {
    pub fn new(params: HyperParams) -> Self {
        FitConfig {
            params,
            execution: Execution::Sequential,
            trace_every: 1,
            reference: None,
        }
    }
}

/// Largest estimated spectral norm over all sources.
pub fn estimate_sigma_max(observations: &ObservationSet) -> f64 {
    observations
        .sources
        .iter()
        .map(|s| linalg::spectral_norm(&s.matrix, AUTO_STEPSIZE_POWER_STEPS, 0.0))
        .fold(0.0, f64::max)
}

pub fn resolve_stepsize(observations: &ObservationSet, policy: StepsizePolicy) -> Result<f64> {
    match policy {
        StepsizePolicy::Fixed(eta) if eta > 0.0 && eta.is_finite() => Ok(eta),
        StepsizePolicy::Fixed(eta) => Err(HmfError::Parameter(format!("stepsize must be positive, got {eta}"))),
        StepsizePolicy::Auto(c) => {
            if !(c > 0.0 && c <= 1.0) {
                return Err(HmfError::Parameter(format!("auto stepsize constant must lie in (0, 1], got {c}")));
            }
            let sigma = estimate_sigma_max(observations);
            if sigma.is_nan() || sigma <= 0.0 {
                return Err(HmfError::Parameter(
                    "auto stepsize needs non-zero observations".into(),
                ));
            }
            Ok(c / (sigma * sigma))
        }
    }
}

fn block_rng(seed: u64, block: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(block);
    rng
}

pub(crate) fn gaussian_block(seed: u64, block: u64, rows: usize, cols: usize, std: f64) -> DenseMatrix {
    let mut rng = block_rng(seed, block);
    let normal = Normal::new(0.0, std).expect("finite non-negative std");
    DenseMatrix::from_fn(rows, cols, |_, _| normal.sample(&mut rng))
}

/// Small Gaussian starting point. Block streams are keyed by
/// `(seed, block id)` so source `i` always draws the same values no matter how
/// many sources follow it.
pub fn init_state(observations: &ObservationSet, params: &HyperParams) -> Result<FactorState> {
    if params.r1 == 0 || params.r2.contains(&0) {
        return Err(HmfError::Parameter("ranks must be positive".into()));
    }
    if params.r2.len() != observations.sources.len() {
        return Err(HmfError::Parameter(format!(
            "{} unique ranks given for {} sources",
            params.r2.len(),
            observations.sources.len()
        )));
    }
    if !(params.init_scale > 0.0 && params.init_scale.is_finite()) {
        return Err(HmfError::Parameter(format!("init_scale must be positive, got {}", params.init_scale)));
    }
    let n1 = observations.n1;
    let s = params.init_scale;
    let seed = params.seed;
    let u_g = gaussian_block(seed, 0, n1, params.r1, s);
    let locals = observations
        .sources
        .iter()
        .zip(&params.r2)
        .enumerate()
        .map(|(i, (source, &r2))| {
            let n2 = source.cols();
            if params.r1 + r2 > n1.min(n2) {
                warn!(
                    "source {i}: r1 + r2 = {} exceeds min(n1, n2) = {}",
                    params.r1 + r2,
                    n1.min(n2)
                );
            }
            let base = 1 + 3 * i as u64;
            LocalFactors {
                v_g: gaussian_block(seed, base, n2, params.r1, s),
                u_l: gaussian_block(seed, base + 1, n1, r2, s),
                v_l: gaussian_block(seed, base + 2, n2, r2, s),
            }
        })
        .collect();
    Ok(FactorState { u_g, locals })
}

/// Output of [`correct_client`].
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectedClient {
    pub u_l: DenseMatrix,
    pub v_g: DenseMatrix,
    /// `u_gᵀu_g` was ill-conditioned and the ridge fallback was used.
    pub used_ridge: bool,
}

/// Removes the `u_g` component from `u_l` and moves it into `v_g`, leaving
/// `u_g v_gᵀ + u_l v_lᵀ` unchanged.
pub fn correct_client(
    u_g: &DenseMatrix,
    u_l: &DenseMatrix,
    v_g: &DenseMatrix,
    v_l: &DenseMatrix,
) -> Result<CorrectedClient> {
    let gram_inv = linalg::gram_inverse_of(u_g, "correct_client")?;
    let (u_l, v_g) = correct_with(u_g, &gram_inv.inverse, u_l, v_g, v_l)?;
    Ok(CorrectedClient {
        u_l,
        v_g,
        used_ridge: gram_inv.ridged,
    })
}

fn correct_with(
    u_g: &DenseMatrix,
    gram_inv: &DenseMatrix,
    u_l: &DenseMatrix,
    v_g: &DenseMatrix,
    v_l: &DenseMatrix,
) -> Result<(DenseMatrix, DenseMatrix)> {
    let r = gram_inv.matmul(&u_g.matmul_tn(u_l)?)?;
    let (_, v_g, u_l, _) = transform(u_g, v_g, u_l, v_l, &r)?;
    Ok((u_l, v_g))
}

/// `(U_g, V_g + V_l Rᵀ, U_l − U_g R, V_l)`.
pub fn apply_invariance_transform(
    u_g: &DenseMatrix,
    v_g: &DenseMatrix,
    u_l: &DenseMatrix,
    v_l: &DenseMatrix,
    r_mat: &DenseMatrix,
) -> Result<(DenseMatrix, DenseMatrix, DenseMatrix, DenseMatrix)> {
    if r_mat.shape() != (u_g.cols(), u_l.cols()) {
        return Err(HmfError::dim(
            "apply_invariance_transform: R",
            format!("{}x{}", u_g.cols(), u_l.cols()),
            format!("{}x{}", r_mat.rows(), r_mat.cols()),
        ));
    }
    transform(u_g, v_g, u_l, v_l, r_mat)
}

fn transform(
    u_g: &DenseMatrix,
    v_g: &DenseMatrix,
    u_l: &DenseMatrix,
    v_l: &DenseMatrix,
    r: &DenseMatrix,
) -> Result<(DenseMatrix, DenseMatrix, DenseMatrix, DenseMatrix)> {
    let v_g_new = v_g.add(&v_l.matmul_nt(r)?)?;
    let u_l_new = u_l.sub(&u_g.matmul(r)?)?;
    Ok((u_g.clone(), v_g_new, u_l_new, v_l.clone()))
}

/// One client's gradient step. `u_g_local` is the client's proposal for the
/// shared factor; the server averages these.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub u_g_local: DenseMatrix,
    pub v_g: DenseMatrix,
    pub u_l: DenseMatrix,
    pub v_l: DenseMatrix,
}

/// All four blocks step from the same snapshot.
#[allow(clippy::too_many_arguments)]
pub fn client_update(
    observation: &SourceObservation,
    u_g: &DenseMatrix,
    v_g: &DenseMatrix,
    u_l: &DenseMatrix,
    v_l: &DenseMatrix,
    kind: LossKind,
    eta: f64,
    beta: f64,
) -> Result<ClientUpdate> {
    let grads = losses::gradients(observation, u_g, v_g, u_l, v_l, kind, beta)?;
    if !grads.is_finite() {
        return Err(HmfError::NonFinite { iteration: None });
    }
    step(u_g, v_g, u_l, v_l, &grads, eta)
}

fn step(
    u_g: &DenseMatrix,
    v_g: &DenseMatrix,
    u_l: &DenseMatrix,
    v_l: &DenseMatrix,
    grads: &losses::Gradients,
    eta: f64,
) -> Result<ClientUpdate> {
    Ok(ClientUpdate {
        u_g_local: u_g.add_scaled(-eta, &grads.u_g)?,
        v_g: v_g.add_scaled(-eta, &grads.v_g)?,
        u_l: u_l.add_scaled(-eta, &grads.u_l)?,
        v_l: v_l.add_scaled(-eta, &grads.v_l)?,
    })
}

/// Entrywise mean, accumulated in list order.
pub fn server_average(local_u_g: &[DenseMatrix]) -> Result<DenseMatrix> {
    let first = local_u_g
        .first()
        .ok_or_else(|| HmfError::Parameter("server_average needs at least one client".into()))?;
    let mut sum = first.clone();
    for m in &local_u_g[1..] {
        sum = sum.add(m)?;
    }
    let n = local_u_g.len() as f64;
    Ok(sum.map(|v| v / n))
}

/// `V = Mᵀ U (UᵀU)⁻¹`, the minimizer of `½‖M − U Vᵀ‖²_F` over `V`.
pub fn closed_form_v(m: &DenseMatrix, u: &DenseMatrix) -> Result<DenseMatrix> {
    if m.rows() != u.rows() {
        return Err(HmfError::dim("closed_form_v", m.rows(), u.rows()));
    }
    let gram_inv = linalg::gram_inverse_of(u, "closed_form_v")?;
    m.matmul_tn(u)?.matmul(&gram_inv.inverse)
}

struct ClientWork {
    evaluation: ClientEvaluation,
}

fn correct_and_evaluate(
    source: &SourceObservation,
    u_g: &DenseMatrix,
    gram_inv: &RidgedInverse,
    local: &mut LocalFactors,
    kind: LossKind,
    beta: f64,
) -> Result<ClientWork> {
    let (u_l, v_g) = correct_with(u_g, &gram_inv.inverse, &local.u_l, &local.v_g, &local.v_l)?;
    local.u_l = u_l;
    local.v_g = v_g;
    let evaluation = losses::evaluate_client(source, u_g, local, kind, beta)?;
    Ok(ClientWork { evaluation })
}

/// Runs the full algorithm: initialize, then per iteration correct and step
/// every client and average the shared factor. The returned state has been
/// corrected after the last step, so it satisfies the orthogonality
/// constraint.
pub fn fit(observations: &ObservationSet, config: &FitConfig) -> Result<(FactorState, FitTrace)> {
    let params = &config.params;
    let mut problems: Vec<String> = validate_observations(observations)
        .into_iter()
        .chain(validate_params(observations, params))
        .map(|v| v.to_string())
        .collect();
    if config.trace_every == 0 {
        problems.push("trace_every must be at least 1".into());
    }
    if let Execution::ParallelClients(0) = config.execution {
        problems.push("parallel execution needs at least one worker".into());
    }
    if !problems.is_empty() {
        return Err(HmfError::Invalid(problems));
    }

    let eta = resolve_stepsize(observations, params.stepsize)?;
    let mut state = init_state(observations, params)?;
    let pool = match config.execution {
        Execution::Sequential => None,
        Execution::ParallelClients(workers) => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| HmfError::Parameter(format!("cannot start worker pool: {e}")))?,
        ),
    };

    let n = observations.sources.len();
    let mut trace = FitTrace {
        stepsize: eta,
        ..FitTrace::default()
    };
    let mut initial_objective = None;

    for t in 0..=params.max_iters {
        let gram_inv = linalg::gram_inverse_of(&state.u_g, "correction step")?;
        if gram_inv.ridged {
            trace.ridge_iterations.push(t);
        }
        let u_g = &state.u_g;
        let work: Vec<Result<ClientWork>> = match &pool {
            None => observations
                .sources
                .iter()
                .zip(state.locals.iter_mut())
                .map(|(s, l)| correct_and_evaluate(s, u_g, &gram_inv, l, params.loss, params.beta))
                .collect(),
            Some(pool) => pool.install(|| {
                observations
                    .sources
                    .par_iter()
                    .zip(state.locals.par_iter_mut())
                    .map(|(s, l)| correct_and_evaluate(s, u_g, &gram_inv, l, params.loss, params.beta))
                    .collect()
            }),
        };
        let work: Vec<ClientWork> = work.into_iter().collect::<Result<_>>()?;

        let orth = metrics::orthogonality_residual(&state.u_g, &state.u_l_list())?;
        trace.max_orth_residual = trace.max_orth_residual.max(orth);

        let mut objective = 0.0;
        let mut local_sq = 0.0;
        let mut shared_grad = DenseMatrix::zeros(state.u_g.rows(), state.u_g.cols());
        let mut finite = true;
        for w in &work {
            objective += w.evaluation.loss + w.evaluation.regularizer;
            local_sq += w.evaluation.gradients.local_norm_sq();
            shared_grad = shared_grad.add(&w.evaluation.gradients.u_g)?;
            finite &= w.evaluation.gradients.is_finite();
        }
        let grad_norm_sq = shared_grad.frobenius_norm_sq() / n as f64 + local_sq;
        let initial = *initial_objective.get_or_insert(objective);

        let stop = t == params.max_iters || grad_norm_sq < params.grad_tol;
        if t % config.trace_every == 0 || stop || !finite {
            let (shared_err, unique_err) = match &config.reference {
                Some(truth) => {
                    let (s, u) = metrics::factor_error(&state, truth)?;
                    (Some(s), Some(u))
                }
                None => (None, None),
            };
            trace.push(TraceRecord {
                iter: t,
                objective,
                shared_err,
                unique_err,
                orth_residual: orth,
                grad_norm_sq,
            });
        }

        let diverged = if !objective.is_finite() || !finite {
            Some("non-finite objective or gradient".to_string())
        } else if objective > DIVERGENCE_FACTOR * initial {
            Some(format!("objective {objective:e} exceeds {DIVERGENCE_FACTOR:e} x initial {initial:e}"))
        } else {
            None
        };
        if let Some(reason) = diverged {
            return Err(HmfError::Divergence {
                iteration: t,
                reason,
                trace: Box::new(trace),
            });
        }

        if stop {
            trace.converged = grad_norm_sq < params.grad_tol;
            break;
        }

        let mut proposals = Vec::with_capacity(n);
        for (local, w) in state.locals.iter_mut().zip(&work) {
            let upd = step(&state.u_g, &local.v_g, &local.u_l, &local.v_l, &w.evaluation.gradients, eta)?;
            proposals.push(upd.u_g_local);
            local.v_g = upd.v_g;
            local.u_l = upd.u_l;
            local.v_l = upd.v_l;
        }
        state.u_g = server_average(&proposals)?;
        trace.iterations_run = t + 1;
    }

    Ok((state, trace))
}
