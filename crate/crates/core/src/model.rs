//! Observations, factors, hyperparameters and fit traces, plus the joint
//! validity check used before any fit.

use std::collections::HashSet;
use std::fmt;

use crate::error::{HmfError, Result};
use crate::matrix::DenseMatrix;

/// Observed cells of one source, kept sorted row-major.
///
/// The checked constructor [`ObservationMask::new`] rejects out-of-range and
/// duplicate pairs; building the struct literally skips those checks, and
/// [`validate`] reports whatever is wrong.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationMask {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(usize, usize)>,
}

impl ObservationMask {
    pub fn new(rows: usize, cols: usize, mut entries: Vec<(usize, usize)>) -> Result<Self> {
        entries.sort_unstable();
        let mut problems = Vec::new();
        for (k, &(r, c)) in entries.iter().enumerate() {
            if r >= rows || c >= cols {
                problems.push(format!("mask entry ({r},{c}) outside {rows}x{cols}"));
            } else if k > 0 && entries[k - 1] == (r, c) {
                problems.push(format!("duplicate mask entry ({r},{c})"));
            }
        }
        if !problems.is_empty() {
            return Err(HmfError::Invalid(problems));
        }
        Ok(ObservationMask { rows, cols, entries })
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        let entries = (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect();
        ObservationMask { rows, cols, entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.rows * self.cols
    }

    /// Fraction of cells observed.
    pub fn coverage(&self) -> f64 {
        let total = self.rows * self.cols;
        if total == 0 {
            0.0
        } else {
            self.entries.len() as f64 / total as f64
        }
    }

    pub fn to_dense(&self) -> Vec<bool> {
        let mut bits = vec![false; self.rows * self.cols];
        for &(r, c) in &self.entries {
            if r < self.rows && c < self.cols {
                bits[r * self.cols + c] = true;
            }
        }
        bits
    }
}

/// One source's data. Unobserved cells of `matrix` hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceObservation {
    pub matrix: DenseMatrix,
    pub mask: Option<ObservationMask>,
}

impl SourceObservation {
    pub fn dense(matrix: DenseMatrix) -> Self {
        SourceObservation { matrix, mask: None }
    }

    /// Attaches a mask and zeroes every unobserved cell.
    pub fn masked(mut matrix: DenseMatrix, mask: ObservationMask) -> Result<Self> {
        if (mask.rows, mask.cols) != matrix.shape() {
            return Err(HmfError::dim(
                "SourceObservation::masked",
                format!("{}x{} mask", matrix.rows(), matrix.cols()),
                format!("{}x{}", mask.rows, mask.cols),
            ));
        }
        let bits = mask.to_dense();
        for (v, keep) in matrix.data_mut().iter_mut().zip(bits) {
            if !keep {
                *v = 0.0;
            }
        }
        Ok(SourceObservation {
            matrix,
            mask: Some(mask),
        })
    }

    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.cols()
    }

    pub fn observed_count(&self) -> usize {
        self.mask.as_ref().map_or(self.matrix.rows() * self.matrix.cols(), |m| m.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub n1: usize,
    pub sources: Vec<SourceObservation>,
}

impl ObservationSet {
    /// Takes `n1` from the first source and checks the others agree.
    pub fn new(sources: Vec<SourceObservation>) -> Result<Self> {
        let first = sources
            .first()
            .ok_or_else(|| HmfError::Parameter("an observation set needs at least one source".into()))?;
        let n1 = first.rows();
        if let Some((i, s)) = sources.iter().enumerate().find(|(_, s)| s.rows() != n1) {
            return Err(HmfError::dim(format!("source {i} row count"), n1, s.rows()));
        }
        Ok(ObservationSet { n1, sources })
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn n2(&self) -> Vec<usize> {
        self.sources.iter().map(|s| s.cols()).collect()
    }
}

/// Per-source block of decision variables.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFactors {
    /// `n2 × r1` coefficients on the shared factor.
    pub v_g: DenseMatrix,
    /// `n1 × r2` unique column factor.
    pub u_l: DenseMatrix,
    /// `n2 × r2` coefficients on the unique factor.
    pub v_l: DenseMatrix,
}

impl LocalFactors {
    /// `u_g v_gᵀ + u_l v_lᵀ`.
    pub fn reconstruct(&self, u_g: &DenseMatrix) -> Result<DenseMatrix> {
        u_g.matmul_nt(&self.v_g)?.add(&self.u_l.matmul_nt(&self.v_l)?)
    }
}

/// Shared factor plus one [`LocalFactors`] per source.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorState {
    pub u_g: DenseMatrix,
    pub locals: Vec<LocalFactors>,
}

impl FactorState {
    pub fn r1(&self) -> usize {
        self.u_g.cols()
    }

    pub fn u_l_list(&self) -> Vec<DenseMatrix> {
        self.locals.iter().map(|l| l.u_l.clone()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.u_g.is_finite()
            && self
                .locals
                .iter()
                .all(|l| l.v_g.is_finite() && l.u_l.is_finite() && l.v_l.is_finite())
    }
}

/// Generating factors and noise of a synthetic instance.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub u_g: DenseMatrix,
    pub locals: Vec<LocalFactors>,
    pub noise: Vec<DenseMatrix>,
}

impl GroundTruth {
    pub fn to_state(&self) -> FactorState {
        FactorState {
            u_g: self.u_g.clone(),
            locals: self.locals.clone(),
        }
    }

    /// Noise-free part of source `i`.
    pub fn signal(&self, i: usize) -> Result<DenseMatrix> {
        self.locals[i].reconstruct(&self.u_g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// `½‖M − M̂‖²_F`.
    Se,
    /// `½‖P_Ω(M − M̂)‖²_F`; a missing mask counts as fully observed.
    Pse,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepsizePolicy {
    Fixed(f64),
    /// `η = c / σ̂²` with σ̂ the largest estimated spectral norm over sources.
    Auto(f64),
}

impl Default for StepsizePolicy {
    fn default() -> Self {
        StepsizePolicy::Auto(0.25)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub stepsize: StepsizePolicy,
    pub beta: f64,
    pub r1: usize,
    /// Unique rank per source.
    pub r2: Vec<usize>,
    pub max_iters: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub init_scale: f64,
    /// Stop once the weighted squared gradient norm drops below this.
    pub grad_tol: f64,
}

impl HyperParams {
    /// Defaults: `Auto(0.25)` stepsize, `beta = 0.1`, 5000 iterations,
    /// `init_scale = 1e-2`, no gradient stop, SE loss, seed 0.
    pub fn new(r1: usize, r2: Vec<usize>) -> Self {
        HyperParams {
            stepsize: StepsizePolicy::default(),
            beta: 0.1,
            r1,
            r2,
            max_iters: 5000,
            seed: 0,
            loss: LossKind::Se,
            init_scale: 1e-2,
            grad_tol: 0.0,
        }
    }

    pub fn uniform(r1: usize, r2: usize, n_sources: usize) -> Self {
        Self::new(r1, vec![r2; n_sources])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    pub objective: f64,
    pub shared_err: Option<f64>,
    pub unique_err: Option<f64>,
    pub orth_residual: f64,
    pub grad_norm_sq: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitTrace {
    pub records: Vec<TraceRecord>,
    /// Stepsize actually used.
    pub stepsize: f64,
    /// Iterations whose correction step needed the ridge fallback.
    pub ridge_iterations: Vec<usize>,
    /// Worst orthogonality residual seen right after any correction step.
    pub max_orth_residual: f64,
    /// Gradient steps performed.
    pub iterations_run: usize,
    /// Whether the gradient threshold stopped the run.
    pub converged: bool,
}

impl FitTrace {
    /// Appends a record; iteration indices must strictly increase.
    pub fn push(&mut self, record: TraceRecord) {
        if let Some(last) = self.records.last() {
            assert!(record.iter > last.iter, "trace records must strictly increase");
        }
        self.records.push(record);
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }
}

/// One broken invariant found by [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NoSources,
    EmptySource { source: usize },
    SourceRowCount { source: usize, expected: usize, found: usize },
    NonFiniteObservation { source: usize },
    MaskShape { source: usize, mask: (usize, usize), matrix: (usize, usize) },
    MaskEntryOutOfBounds { source: usize, row: usize, col: usize },
    MaskDuplicate { source: usize, row: usize, col: usize },
    FactorShape { factor: String, expected: (usize, usize), found: (usize, usize) },
    NonFiniteFactor { factor: String },
    SourceCount { what: &'static str, expected: usize, found: usize },
    ZeroRank { what: String },
    RankBudget { r1: usize, r2_max: usize, n1: usize },
    BadParameter { name: &'static str, value: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        match self {
            NoSources => write!(f, "observation set has no sources"),
            EmptySource { source } => write!(f, "source {source} has an empty matrix"),
            SourceRowCount { source, expected, found } => {
                write!(f, "source {source} has {found} rows, expected {expected}")
            }
            NonFiniteObservation { source } => write!(f, "source {source} contains non-finite values"),
            MaskShape { source, mask, matrix } => write!(
                f,
                "source {source} mask is {}x{} but matrix is {}x{}",
                mask.0, mask.1, matrix.0, matrix.1
            ),
            MaskEntryOutOfBounds { source, row, col } => {
                write!(f, "source {source} mask entry ({row},{col}) is out of bounds")
            }
            MaskDuplicate { source, row, col } => {
                write!(f, "source {source} mask entry ({row},{col}) appears twice")
            }
            FactorShape { factor, expected, found } => write!(
                f,
                "{factor} is {}x{}, expected {}x{}",
                found.0, found.1, expected.0, expected.1
            ),
            NonFiniteFactor { factor } => write!(f, "{factor} contains non-finite values"),
            SourceCount { what, expected, found } => {
                write!(f, "{what} has {found} entries, expected one per source ({expected})")
            }
            ZeroRank { what } => write!(f, "{what} must be positive"),
            RankBudget { r1, r2_max, n1 } => {
                write!(f, "r1 + max(r2) = {} exceeds n1 = {n1}", r1 + r2_max)
            }
            BadParameter { name, value } => write!(f, "parameter {name} = {value} is out of range"),
        }
    }
}

/// Checks every cross-type invariant at once and lists what is broken. An
/// empty report means the triple is safe to fit.
pub fn validate(observations: &ObservationSet, state: &FactorState, params: &HyperParams) -> Vec<Violation> {
    let mut out = validate_observations(observations);
    out.extend(validate_params(observations, params));
    out.extend(validate_state(observations, state, params));
    out
}

pub fn validate_observations(observations: &ObservationSet) -> Vec<Violation> {
    let mut out = Vec::new();
    if observations.sources.is_empty() {
        out.push(Violation::NoSources);
    }
    let n1 = observations.n1;
    for (i, s) in observations.sources.iter().enumerate() {
        let (rows, cols) = s.matrix.shape();
        if rows != n1 {
            out.push(Violation::SourceRowCount {
                source: i,
                expected: n1,
                found: rows,
            });
        }
        if rows == 0 || cols == 0 {
            out.push(Violation::EmptySource { source: i });
        }
        if !s.matrix.is_finite() {
            out.push(Violation::NonFiniteObservation { source: i });
        }
        if let Some(mask) = &s.mask {
            if (mask.rows, mask.cols) != (rows, cols) {
                out.push(Violation::MaskShape {
                    source: i,
                    mask: (mask.rows, mask.cols),
                    matrix: (rows, cols),
                });
            }
            let mut seen = HashSet::with_capacity(mask.entries.len());
            for &(r, c) in &mask.entries {
                if r >= rows || c >= cols {
                    out.push(Violation::MaskEntryOutOfBounds {
                        source: i,
                        row: r,
                        col: c,
                    });
                } else if !seen.insert((r, c)) {
                    out.push(Violation::MaskDuplicate {
                        source: i,
                        row: r,
                        col: c,
                    });
                }
            }
        }
    }
    out
}

pub fn validate_params(observations: &ObservationSet, params: &HyperParams) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = observations.sources.len();
    if params.r1 == 0 {
        out.push(Violation::ZeroRank { what: "r1".into() });
    }
    if params.r2.len() != n {
        out.push(Violation::SourceCount {
            what: "r2",
            expected: n,
            found: params.r2.len(),
        });
    }
    for (i, &r) in params.r2.iter().enumerate() {
        if r == 0 {
            out.push(Violation::ZeroRank {
                what: format!("r2 of source {i}"),
            });
        }
    }
    let r2_max = params.r2.iter().copied().max().unwrap_or(0);
    if params.r1 + r2_max > observations.n1 {
        out.push(Violation::RankBudget {
            r1: params.r1,
            r2_max,
            n1: observations.n1,
        });
    }
    match params.stepsize {
        StepsizePolicy::Fixed(eta) if !(eta > 0.0 && eta.is_finite()) => {
            out.push(Violation::BadParameter { name: "eta", value: eta })
        }
        StepsizePolicy::Auto(c) if !(c > 0.0 && c <= 1.0) => {
            out.push(Violation::BadParameter { name: "stepsize c", value: c })
        }
        _ => {}
    }
    if !(params.beta >= 0.0 && params.beta.is_finite()) {
        out.push(Violation::BadParameter {
            name: "beta",
            value: params.beta,
        });
    }
    if !(params.init_scale > 0.0 && params.init_scale.is_finite()) {
        out.push(Violation::BadParameter {
            name: "init_scale",
            value: params.init_scale,
        });
    }
    if params.grad_tol.is_nan() || params.grad_tol < 0.0 {
        out.push(Violation::BadParameter {
            name: "grad_tol",
            value: params.grad_tol,
        });
    }
    out
}

fn validate_state(observations: &ObservationSet, state: &FactorState, params: &HyperParams) -> Vec<Violation> {
    let mut out = Vec::new();
    let n1 = observations.n1;
    let mut check = |name: String, m: &DenseMatrix, expected: (usize, usize)| {
        if m.shape() != expected {
            out.push(Violation::FactorShape {
                factor: name.clone(),
                expected,
                found: m.shape(),
            });
        }
        if !m.is_finite() {
            out.push(Violation::NonFiniteFactor { factor: name });
        }
    };
    check("u_g".into(), &state.u_g, (n1, params.r1));
    for (i, (local, source)) in state.locals.iter().zip(&observations.sources).enumerate() {
        let n2 = source.cols();
        let r2 = params.r2.get(i).copied().unwrap_or(local.u_l.cols());
        check(format!("v_g[{i}]"), &local.v_g, (n2, params.r1));
        check(format!("u_l[{i}]"), &local.u_l, (n1, r2));
        check(format!("v_l[{i}]"), &local.v_l, (n2, r2));
    }
    if state.locals.len() != observations.sources.len() {
        out.push(Violation::SourceCount {
            what: "factor state",
            expected: observations.sources.len(),
            found: state.locals.len(),
        });
    }
    out
}
