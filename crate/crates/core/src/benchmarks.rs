//! The two synthetic studies: convergence traces for several row counts, and
//! subspace error against the fraction of missing entries.

use crate::error::Result;
use crate::metrics;
use crate::model::{FitTrace, HyperParams, LossKind, StepsizePolicy};
use crate::solver::{fit, Execution, FitConfig};
use crate::synth::{apply_missingness, generate_instance, SynthConfig};

/// Both factor errors at or below this count as recovered.
pub const RECOVERY_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Fig1Config {
    pub n1_values: Vec<usize>,
    pub n2: usize,
    pub n_sources: usize,
    pub r1: usize,
    pub r2: usize,
    pub max_iters: usize,
    pub beta: f64,
    pub stepsize_constant: f64,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for Fig1Config {
    fn default() -> Self {
        Fig1Config {
            n1_values: vec![30, 60, 120],
            n2: 100,
            n_sources: 20,
            r1: 3,
            r2: 3,
            max_iters: 5000,
            beta: 0.1,
            stepsize_constant: 0.25,
            seed: 0,
            execution: Execution::Sequential,
        }
    }
}

impl Fig1Config {
    pub fn full_scale() -> Self {
        Fig1Config {
            n_sources: 100,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fig1Run {
    pub n1: usize,
    pub trace: FitTrace,
    /// First traced iteration with both errors at or below [`RECOVERY_THRESHOLD`].
    pub recovered_at: Option<usize>,
}

/// Noiseless instances with unit-spectrum factors, fitted with the SE loss
/// and every iteration traced against the truth.
pub fn run_fig1(config: &Fig1Config) -> Result<Vec<Fig1Run>> {
    config
        .n1_values
        .iter()
        .map(|&n1| {
            let synth = SynthConfig::uniform(n1, config.n2, config.n_sources, config.r1, config.r2, config.seed)
                .with_unit_spectrum();
            let (obs, truth) = generate_instance(&synth)?;
            let mut params = HyperParams::uniform(config.r1, config.r2, config.n_sources);
            params.max_iters = config.max_iters;
            params.beta = config.beta;
            params.stepsize = StepsizePolicy::Auto(config.stepsize_constant);
            params.seed = config.seed;
            let mut fit_config = FitConfig::new(params);
            fit_config.execution = config.execution;
            fit_config.reference = Some(truth);
            let (_, trace) = fit(&obs, &fit_config)?;
            let recovered_at = trace
                .records
                .iter()
                .find(|r| {
                    r.shared_err.is_some_and(|e| e <= RECOVERY_THRESHOLD)
                        && r.unique_err.is_some_and(|e| e <= RECOVERY_THRESHOLD)
                })
                .map(|r| r.iter);
            Ok(Fig1Run { n1, trace, recovered_at })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table2Config {
    pub missing_ratios: Vec<f64>,
    pub seeds: Vec<u64>,
    pub n1: usize,
    pub n2: usize,
    pub n_sources: usize,
    pub r1: usize,
    pub r2: usize,
    pub noise_scale: f64,
    pub max_iters: usize,
    pub beta: f64,
    pub stepsize_constant: f64,
    pub execution: Execution,
}

impl Default for Table2Config {
    fn default() -> Self {
        Table2Config {
            missing_ratios: vec![0.5, 0.1, 0.05, 0.01],
            seeds: vec![0, 1, 2],
            n1: 60,
            n2: 100,
            n_sources: 100,
            r1: 3,
            r2: 3,
            noise_scale: 5e-5,
            max_iters: 800,
            beta: 0.1,
            stepsize_constant: 0.25,
            execution: Execution::Sequential,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table2Row {
    pub missing_ratio: f64,
    pub mean: f64,
    /// Sample standard deviation (`n − 1` denominator); zero for one seed.
    pub std: f64,
    pub per_seed: Vec<f64>,
}

/// For each seed one instance is generated and masked at every ratio with
/// the same mask seed, so lower ratios observe supersets of the cells seen
/// at higher ratios. Fits use the PSE loss.
pub fn run_table2(config: &Table2Config) -> Result<Vec<Table2Row>> {
    let mut per_ratio = vec![Vec::with_capacity(config.seeds.len()); config.missing_ratios.len()];
    for &seed in &config.seeds {
        let mut synth = SynthConfig::uniform(config.n1, config.n2, config.n_sources, config.r1, config.r2, seed)
            .with_unit_spectrum();
        synth.noise_scale = config.noise_scale;
        let (obs, truth) = generate_instance(&synth)?;
        for (k, &ratio) in config.missing_ratios.iter().enumerate() {
            let masked = apply_missingness(&obs, ratio, seed, Some(config.r1 + config.r2))?;
            for w in &masked.warnings {
                log::warn!("missing ratio {ratio}: {w}");
            }
            let mut params = HyperParams::uniform(config.r1, config.r2, config.n_sources);
            params.loss = LossKind::Pse;
            params.max_iters = config.max_iters;
            params.beta = config.beta;
            params.stepsize = StepsizePolicy::Auto(config.stepsize_constant);
            params.seed = seed;
            let mut fit_config = FitConfig::new(params);
            fit_config.execution = config.execution;
            fit_config.trace_every = config.max_iters.max(1);
            let (state, _) = fit(&masked.observations, &fit_config)?;
            per_ratio[k].push(metrics::subspace_error(&state, &truth)?);
        }
    }
    Ok(config
        .missing_ratios
        .iter()
        .zip(per_ratio)
        .map(|(&missing_ratio, per_seed)| {
            let (mean, std) = mean_std(&per_seed);
            Table2Row {
                missing_ratio,
                mean,
                std,
                per_seed,
            }
        })
        .collect())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
