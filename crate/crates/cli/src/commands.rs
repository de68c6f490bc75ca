use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hmf::benchmarks::{run_fig1, run_table2, Fig1Config, Table2Config};
use hmf::io;
use hmf::metrics::{self, SpectrumInput, SpectrumReport};
use hmf::{
    apply_missingness, fit, generate_instance, DenseMatrix, Execution, FitConfig, GroundTruth, HmfError,
    ObservationSet, SourceObservation, SynthConfig,
};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::{DataFormat, RunConfig, SynthSection};
use crate::CliError;

pub const MANIFEST: &str = "manifest.json";

/// Source count used by the benchmarks unless `--full-scale` is given.
pub const DESK_SOURCES: usize = 20;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub synth: SynthSection,
    pub factor_scale_used: f64,
    pub n1: usize,
    pub n2: Vec<usize>,
    pub sources: Vec<String>,
    pub truth: String,
    pub warnings: Vec<String>,
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Core(HmfError::Io { path: dir.into(), source: e }))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("summary types serialize");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Core(HmfError::Io { path: path.into(), source: e }))
}

fn source_name(i: usize, format: DataFormat) -> String {
    format!("source_{i}.{}", format.extension())
}

struct Generated {
    config: SynthConfig,
    observations: ObservationSet,
    truth: GroundTruth,
    warnings: Vec<String>,
}

fn generate(section: &SynthSection) -> Result<Generated, CliError> {
    let config = section.to_config()?;
    let (obs, truth) = generate_instance(&config)?;
    let mut warnings = Vec::new();
    let observations = if section.missing_ratio > 0.0 {
        let masked = apply_missingness(&obs, section.missing_ratio, section.seed, Some(config.r1 + config.r2))
            ?;
        warnings = masked.warnings;
        masked.observations
    } else {
        obs
    };
    for w in &warnings {
        warn!("{w}");
    }
    Ok(Generated {
        config,
        observations,
        truth,
        warnings,
    })
}

fn synth_section(config: &RunConfig) -> Result<&SynthSection, CliError> {
    config
        .synth
        .as_ref()
        .ok_or_else(|| CliError::Usage("the config has no `synth` section".into()))
}

/// Generates the configured instance in memory instead of reading files.
pub fn synth_dataset(config: &RunConfig) -> Result<Dataset, CliError> {
    let section = synth_section(config)?;
    let g = generate(section)?;
    Ok(Dataset {
        observations: g.observations,
        truth: Some(g.truth),
        ranks: Some((section.r1, section.r2)),
    })
}

pub fn synth(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    let section = synth_section(config)?;
    let Generated {
        config: synth,
        observations: obs,
        truth,
        warnings,
    } = generate(section)?;

    create_dir(out)?;
    let mut names = Vec::new();
    for (i, s) in obs.sources.iter().enumerate() {
        let name = source_name(i, section.format);
        match section.format {
            DataFormat::Dense => io::write_dense_csv(out.join(&name), &s.matrix)?,
            DataFormat::Triplet => io::write_triplets(out.join(&name), s)?,
        }
        names.push(name);
    }
    io::write_ground_truth(out.join("truth"), &truth)?;
    let manifest = Manifest {
        synth: section.clone(),
        factor_scale_used: synth.factor_scale,
        n1: synth.n1,
        n2: synth.n2.clone(),
        sources: names,
        truth: "truth".into(),
        warnings,
    };
    write_json(&out.join(MANIFEST), &manifest)?;
    info!("wrote {} sources to {}", obs.len(), out.display());
    Ok(())
}

pub struct Dataset {
    pub observations: ObservationSet,
    pub truth: Option<GroundTruth>,
    pub ranks: Option<(usize, usize)>,
}

fn read_source(path: &Path) -> Result<SourceObservation, CliError> {
    Ok(match path.extension().and_then(|e| e.to_str()) {
        Some("tri") => io::read_triplets(path, false)?,
        _ => SourceObservation::dense(io::read_dense_csv(path)?),
    })
}

/// Reads a data directory. Without a manifest, `source_0.csv` /
/// `source_0.tri`, `source_1.*`, ... are loaded until one is missing.
pub fn load_dataset(dir: &Path) -> Result<Dataset, CliError> {
    let manifest_path = dir.join(MANIFEST);
    let (files, truth_dir, ranks) = if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path)
            .map_err(|e| CliError::Core(HmfError::Io { path: manifest_path.clone(), source: e }))?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", manifest_path.display())))?;
        let files: Vec<PathBuf> = m.sources.iter().map(|s| dir.join(s)).collect();
        (files, dir.join(&m.truth), Some((m.synth.r1, m.synth.r2)))
    } else {
        let mut files = Vec::new();
        loop {
            let i = files.len();
            let found = [DataFormat::Dense, DataFormat::Triplet]
                .into_iter()
                .map(|f| dir.join(source_name(i, f)))
                .find(|p| p.exists());
            match found {
                Some(p) => files.push(p),
                None => break,
            }
        }
        (files, dir.join("truth"), None)
    };
    if files.is_empty() {
        return Err(CliError::Usage(format!("no sources found in {}", dir.display())));
    }
    let sources = files.iter().map(|p| read_source(p)).collect::<Result<Vec<_>, _>>()?;
    let observations = ObservationSet::new(sources)?;
    let truth = if truth_dir.join("u_g.csv").exists() {
        Some(io::read_ground_truth(&truth_dir)?)
    } else {
        None
    };
    Ok(Dataset {
        observations,
        truth,
        ranks,
    })
}

#[derive(Debug, Serialize)]
pub struct FitSummary {
    pub status: String,
    pub final_objective: Option<f64>,
    pub orth_residual: Option<f64>,
    pub max_orth_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub stepsize: f64,
    pub loss: String,
    pub ridge_iterations: Vec<usize>,
    pub final_shared_err: Option<f64>,
    pub final_unique_err: Option<f64>,
    pub subspace_error: Option<f64>,
    pub wall_time_secs: f64,
}

pub fn fit_command(config: &RunConfig, dataset: Dataset, out: &Path, execution: Execution) -> Result<(), CliError> {
    let obs = &dataset.observations;
    let partial = obs.sources.iter().any(|s| s.mask.as_ref().is_some_and(|m| !m.is_full()));
    let params = config.fit.to_params(obs.len(), partial, dataset.ranks)?;
    let loss = format!("{:?}", params.loss).to_lowercase();
    let mut fit_config = FitConfig::new(params);
    fit_config.execution = execution;
    fit_config.trace_every = config.fit.trace_every;
    fit_config.reference = dataset.truth.clone();

    create_dir(out)?;
    let start = Instant::now();
    let result = fit(obs, &fit_config);
    let wall_time_secs = start.elapsed().as_secs_f64();
    match result {
        Ok((state, trace)) => {
            io::write_factors(out.join("state"), &state)?;
            io::write_trace(out.join("trace.csv"), &trace.records)?;
            let last = trace.last();
            let subspace_error = match &dataset.truth {
                Some(t) => Some(metrics::subspace_error(&state, t)?),
                None => None,
            };
            let summary = FitSummary {
                status: "ok".into(),
                final_objective: last.map(|r| r.objective),
                orth_residual: last.map(|r| r.orth_residual),
                max_orth_residual: trace.max_orth_residual,
                iterations: trace.iterations_run,
                converged: trace.converged,
                stepsize: trace.stepsize,
                loss,
                ridge_iterations: trace.ridge_iterations.clone(),
                final_shared_err: last.and_then(|r| r.shared_err),
                final_unique_err: last.and_then(|r| r.unique_err),
                subspace_error,
                wall_time_secs,
            };
            write_json(&out.join("summary.json"), &summary)?;
            Ok(())
        }
        Err(HmfError::Divergence { iteration, reason, trace }) => {
            io::write_trace(out.join("trace.csv"), &trace.records)?;
            let last = trace.last();
            let summary = FitSummary {
                status: format!("diverged at iteration {iteration}: {reason}"),
                final_objective: last.map(|r| r.objective),
                orth_residual: last.map(|r| r.orth_residual),
                max_orth_residual: trace.max_orth_residual,
                iterations: trace.iterations_run,
                converged: false,
                stepsize: trace.stepsize,
                loss,
                ridge_iterations: trace.ridge_iterations.clone(),
                final_shared_err: last.and_then(|r| r.shared_err),
                final_unique_err: last.and_then(|r| r.unique_err),
                subspace_error: None,
                wall_time_secs,
            };
            write_json(&out.join("summary.json"), &summary)?;
            Err(CliError::Core(HmfError::Divergence { iteration, reason, trace }))
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Serialize)]
pub struct EvalSummary {
    pub subspace_error: f64,
    pub shared_factor_error: f64,
    pub unique_factor_error: f64,
    pub reconstruction_error: f64,
    pub truth_misalignment_theta: f64,
    pub truth_misalignment_lambda_max: f64,
    pub truth_spectrum: SpectrumSummary,
    pub objective_gap: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct SpectrumSummary {
    pub sigma_max: f64,
    pub sigma_min_nonzero: f64,
    pub per_source_sigma_max: Vec<f64>,
    pub per_source_sigma_min_nonzero: Vec<f64>,
}

impl From<SpectrumReport> for SpectrumSummary {
    fn from(r: SpectrumReport) -> Self {
        SpectrumSummary {
            sigma_max: r.sigma_max,
            sigma_min_nonzero: r.sigma_min_nonzero,
            per_source_sigma_max: r.per_source_sigma_max,
            per_source_sigma_min_nonzero: r.per_source_sigma_min_nonzero,
        }
    }
}

fn check_state_shapes(state: &hmf::FactorState, truth: &GroundTruth) -> Result<(), CliError> {
    let mismatch = |what: String| CliError::Usage(format!("state and truth differ: {what}"));
    if state.locals.len() != truth.locals.len() {
        return Err(mismatch(format!("{} vs {} sources", state.locals.len(), truth.locals.len())));
    }
    if state.u_g.shape() != truth.u_g.shape() {
        return Err(mismatch(format!("u_g {:?} vs {:?}", state.u_g.shape(), truth.u_g.shape())));
    }
    for (i, (s, t)) in state.locals.iter().zip(&truth.locals).enumerate() {
        if s.v_g.rows() != t.v_g.rows() || s.u_l.rows() != t.u_l.rows() {
            return Err(mismatch(format!("source {i} dimensions")));
        }
    }
    Ok(())
}

pub fn eval(config: &RunConfig, state_dir: &Path, truth_dir: &Path, data: Option<&Path>) -> Result<EvalSummary, CliError> {
    let state = io::read_factors(state_dir)?;
    let truth = io::read_ground_truth(truth_dir)?;
    check_state_shapes(&state, &truth)?;
    let (shared, unique) = metrics::factor_error(&state, &truth)?;
    let unique_list: Vec<DenseMatrix> = truth.locals.iter().map(|l| l.u_l.clone()).collect();
    let mis = metrics::misalignment(&unique_list)?;
    let objective_gap = match data {
        Some(dir) => {
            let dataset = load_dataset(dir)?;
            let obs = &dataset.observations;
            let partial = obs.sources.iter().any(|s| s.mask.as_ref().is_some_and(|m| !m.is_full()));
            let params = config
                .fit
                .to_params(obs.len(), partial, Some((state.r1(), truth.locals[0].u_l.cols())))?;
            Some(metrics::objective_gap(obs, &state, params.loss, params.beta, Some(&truth))?)
        }
        None => None,
    };
    Ok(EvalSummary {
        subspace_error: metrics::subspace_error(&state, &truth)?,
        shared_factor_error: shared,
        unique_factor_error: unique,
        reconstruction_error: metrics::reconstruction_error(&state, &truth)?,
        truth_misalignment_theta: mis.theta,
        truth_misalignment_lambda_max: mis.lambda_max,
        truth_spectrum: metrics::spectrum_report(SpectrumInput::Truth(&truth))?.into(),
        objective_gap,
    })
}

pub fn write_eval(summary: &EvalSummary, out: Option<&Path>) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(summary).expect("summary types serialize");
    println!("{text}");
    if let Some(dir) = out {
        create_dir(dir)?;
        write_json(&dir.join("eval.json"), summary)?;
    }
    Ok(())
}

fn parse_override<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("override {key}: cannot parse `{value}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError> {
    value.split(':').map(|v| parse_override(key, v)).collect()
}

fn split_override(item: &str) -> Result<(&str, &str), CliError> {
    item.split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{item}` is not key=value")))
}

#[derive(Debug, Serialize)]
struct Fig1Summary {
    n1: usize,
    n_sources: usize,
    iterations: usize,
    recovered_at: Option<usize>,
    final_shared_err: Option<f64>,
    final_unique_err: Option<f64>,
    trace: String,
}

pub fn bench_fig1(overrides: &[String], full_scale: bool, execution: Execution, out: &Path) -> Result<(), CliError> {
    let mut cfg = if full_scale {
        Fig1Config::full_scale()
    } else {
        Fig1Config {
            n_sources: DESK_SOURCES,
            ..Fig1Config::default()
        }
    };
    cfg.execution = execution;
    for item in overrides {
        let (k, v) = split_override(item)?;
        match k {
            "N" => cfg.n_sources = parse_override(k, v)?,
            "n1" => cfg.n1_values = parse_list(k, v)?,
            "n2" => cfg.n2 = parse_override(k, v)?,
            "r1" => cfg.r1 = parse_override(k, v)?,
            "r2" => cfg.r2 = parse_override(k, v)?,
            "max_iters" => cfg.max_iters = parse_override(k, v)?,
            "beta" => cfg.beta = parse_override(k, v)?,
            "stepsize" => cfg.stepsize_constant = parse_override(k, v)?,
            "seed" => cfg.seed = parse_override(k, v)?,
            _ => return Err(CliError::Usage(format!("unknown fig1 override `{k}`"))),
        }
    }
    create_dir(out)?;
    let runs = run_fig1(&cfg)?;
    let mut summaries = Vec::new();
    for run in runs {
        let name = format!("fig1_n1_{}.csv", run.n1);
        io::write_trace(out.join(&name), &run.trace.records)?;
        let last = run.trace.last();
        summaries.push(Fig1Summary {
            n1: run.n1,
            n_sources: cfg.n_sources,
            iterations: run.trace.iterations_run,
            recovered_at: run.recovered_at,
            final_shared_err: last.and_then(|r| r.shared_err),
            final_unique_err: last.and_then(|r| r.unique_err),
            trace: name,
        });
    }
    write_json(&out.join("fig1_summary.json"), &summaries)
}

pub fn bench_table2(overrides: &[String], full_scale: bool, execution: Execution, out: &Path) -> Result<(), CliError> {
    let mut cfg = Table2Config {
        n_sources: if full_scale { 100 } else { DESK_SOURCES },
        ..Table2Config::default()
    };
    cfg.execution = execution;
    for item in overrides {
        let (k, v) = split_override(item)?;
        match k {
            "N" => cfg.n_sources = parse_override(k, v)?,
            "n1" => cfg.n1 = parse_override(k, v)?,
            "n2" => cfg.n2 = parse_override(k, v)?,
            "r1" => cfg.r1 = parse_override(k, v)?,
            "r2" => cfg.r2 = parse_override(k, v)?,
            "max_iters" => cfg.max_iters = parse_override(k, v)?,
            "beta" => cfg.beta = parse_override(k, v)?,
            "stepsize" => cfg.stepsize_constant = parse_override(k, v)?,
            "noise_scale" => cfg.noise_scale = parse_override(k, v)?,
            "ratios" => cfg.missing_ratios = parse_list(k, v)?,
            "seeds" => cfg.seeds = (0..parse_override::<u64>(k, v)?).collect(),
            _ => return Err(CliError::Usage(format!("unknown table2 override `{k}`"))),
        }
    }
    create_dir(out)?;
    let rows = run_table2(&cfg)?;
    let mut text = String::from("missing_ratio,mean_subspace_error,std_subspace_error\n");
    for r in &rows {
        text.push_str(&format!(
            "{},{},{}\n",
            r.missing_ratio,
            io::format_real(r.mean),
            io::format_real(r.std)
        ));
    }
    let path = out.join("table2.csv");
    fs::write(&path, text).map_err(|e| CliError::Core(HmfError::Io { path, source: e }))
}
