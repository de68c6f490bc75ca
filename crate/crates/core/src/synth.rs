//! Synthetic instances with a shared factor and per-source unique factors
//! orthogonal to it, plus uniform per-source masking.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{HmfError, Result};
use crate::linalg;
use crate::matrix::DenseMatrix;
use crate::model::{GroundTruth, LocalFactors, ObservationMask, ObservationSet, SourceObservation};
use crate::solver::gaussian_block;

/// Retries allowed when deflation leaves a rank-deficient unique factor.
pub const MAX_REGENERATIONS: u64 = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n1: usize,
    /// Column count per source; its length is the number of sources.
    pub n2: Vec<usize>,
    pub r1: usize,
    pub r2: usize,
    /// Standard deviation of the noise entries.
    pub noise_scale: f64,
    /// Standard deviation of the factor entries.
    pub factor_scale: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// `n_sources` sources of equal width, noiseless, unit factor scale.
    pub fn uniform(n1: usize, n2: usize, n_sources: usize, r1: usize, r2: usize, seed: u64) -> Self {
        SynthConfig {
            n1,
            n2: vec![n2; n_sources],
            r1,
            r2,
            noise_scale: 0.0,
            factor_scale: 1.0,
            seed,
        }
    }

    /// Factor scale `(n1·n2)^(-1/4)` for the widest source, which keeps the
    /// signal's singular values of order one.
    pub fn unit_spectrum_scale(&self) -> f64 {
        let n2 = self.n2.iter().copied().max().unwrap_or(1);
        ((self.n1 * n2) as f64).powf(-0.25)
    }

    pub fn with_unit_spectrum(mut self) -> Self {
        self.factor_scale = self.unit_spectrum_scale();
        self
    }

    pub fn n_sources(&self) -> usize {
        self.n2.len()
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n2.is_empty() {
            problems.push("at least one source is required".to_string());
        }
        if self.r1 == 0 || self.r2 == 0 {
            problems.push("r1 and r2 must be positive".to_string());
        }
        for (i, &n2) in self.n2.iter().enumerate() {
            if self.r1 + self.r2 > self.n1.min(n2) {
                problems.push(format!(
                    "source {i}: r1 + r2 = {} exceeds min(n1, n2) = {}",
                    self.r1 + self.r2,
                    self.n1.min(n2)
                ));
            }
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            problems.push(format!("noise_scale must be non-negative, got {}", self.noise_scale));
        }
        if !(self.factor_scale > 0.0 && self.factor_scale.is_finite()) {
            problems.push(format!("factor_scale must be positive, got {}", self.factor_scale));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(HmfError::Invalid(problems))
        }
    }
}

// Stream ids: 0 for the shared factor, then four per source.
fn source_block(i: usize, offset: u64) -> u64 {
    1 + 4 * i as u64 + offset
}

fn deflate(u_l: &DenseMatrix, q_g: &DenseMatrix) -> Result<DenseMatrix> {
    let mut out = u_l.clone();
    // Twice, so the residual is at rounding level even when u_l is nearly in span(q_g).
    for _ in 0..2 {
        out = out.sub(&q_g.matmul(&q_g.matmul_tn(&out)?)?)?;
    }
    Ok(out)
}

/// Draws every factor i.i.d. `N(0, factor_scale²)`, projects each unique
/// factor onto the orthogonal complement of the shared one, and adds i.i.d.
/// `N(0, noise_scale²)` noise to every entry.
pub fn generate_instance(config: &SynthConfig) -> Result<(ObservationSet, GroundTruth)> {
    config.validate()?;
    let SynthConfig {
        n1,
        r1,
        r2,
        factor_scale: s,
        seed,
        ..
    } = *config;
    let u_g = gaussian_block(seed, 0, n1, r1, s);
    let (q_g, _) = linalg::orthonormalize(&u_g)?;

    let mut locals = Vec::with_capacity(config.n_sources());
    let mut noise = Vec::with_capacity(config.n_sources());
    let mut sources = Vec::with_capacity(config.n_sources());
    for (i, &n2) in config.n2.iter().enumerate() {
        let mut attempt = 0;
        let u_l = loop {
            let raw = gaussian_block(seed.wrapping_add(attempt), source_block(i, 1), n1, r2, s);
            let deflated = deflate(&raw, &q_g)?;
            if linalg::orthonormalize(&deflated).is_ok() {
                break deflated;
            }
            attempt += 1;
            if attempt > MAX_REGENERATIONS {
                return Err(HmfError::Singular(format!(
                    "source {i}: unique factor stayed rank deficient after {MAX_REGENERATIONS} regenerations"
                )));
            }
        };
        let local = LocalFactors {
            v_g: gaussian_block(seed, source_block(i, 0), n2, r1, s),
            u_l,
            v_l: gaussian_block(seed, source_block(i, 2), n2, r2, s),
        };
        let e = if config.noise_scale > 0.0 {
            gaussian_block(seed, source_block(i, 3), n1, n2, config.noise_scale)
        } else {
            DenseMatrix::zeros(n1, n2)
        };
        let m = local.reconstruct(&u_g)?.add(&e)?;
        sources.push(SourceObservation::dense(m));
        locals.push(local);
        noise.push(e);
    }
    Ok((ObservationSet::new(sources)?, GroundTruth { u_g, locals, noise }))
}

/// Result of [`apply_missingness`].
#[derive(Debug, Clone)]
pub struct MaskedObservations {
    pub observations: ObservationSet,
    /// Sources left with fewer observed cells than the identifiability rule of
    /// thumb `rank · max(n1, n2)`.
    pub warnings: Vec<String>,
}

/// Keeps exactly `⌈(1 − ratio)·n1·n2⌉` uniformly chosen cells of each source
/// and zeroes the rest.
///
/// Each source shuffles its cells with its own stream of `seed` and keeps a
/// prefix, so for a fixed seed a lower ratio observes a superset of the cells
/// a higher ratio observes. `rank_hint` (normally `r1 + r2`) enables the
/// sparsity warning.
pub fn apply_missingness(
    observations: &ObservationSet,
    missing_ratio: f64,
    seed: u64,
    rank_hint: Option<usize>,
) -> Result<MaskedObservations> {
    if !(0.0..1.0).contains(&missing_ratio) {
        return Err(HmfError::Parameter(format!(
            "missing ratio must lie in [0, 1), got {missing_ratio}"
        )));
    }
    let mut warnings = Vec::new();
    let mut sources = Vec::with_capacity(observations.len());
    for (i, source) in observations.sources.iter().enumerate() {
        let (n1, n2) = source.matrix.shape();
        let total = n1 * n2;
        let keep = (((1.0 - missing_ratio) * total as f64) - 1e-9).ceil().max(0.0) as usize;
        let keep = keep.min(total);
        let mut cells: Vec<(usize, usize)> = (0..n1).flat_map(|r| (0..n2).map(move |c| (r, c))).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        cells.shuffle(&mut rng);
        cells.truncate(keep);
        let mask = ObservationMask::new(n1, n2, cells)?;
        if let Some(rank) = rank_hint {
            let needed = rank * n1.max(n2);
            if keep < needed {
                warnings.push(format!(
                    "source {i}: {keep} observed cells is below rank * max(n1, n2) = {needed}"
                ));
            }
        }
        sources.push(SourceObservation::masked(source.matrix.clone(), mask)?);
    }
    Ok(MaskedObservations {
        observations: ObservationSet::new(sources)?,
        warnings,
    })
}
