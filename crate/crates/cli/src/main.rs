mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hmf::{Execution, HmfError};

use crate::config::{ExecutionArg, RunConfig};

const CONFIG_HELP: &str = "\
Configuration (JSON, unknown keys are rejected):
  synth.n1                 rows shared by all sources (required)
  synth.n2                 columns, a number (needs synth.n_sources) or one per source (required)
  synth.r1, synth.r2       shared and unique ranks (required)
  synth.noise_scale        noise standard deviation [0]
  synth.factor_scale       factor entry standard deviation [1]
  synth.unit_spectrum      scale factors by (n1*n2)^(-1/4) instead [false]
  synth.seed               generator seed [0]
  synth.missing_ratio      fraction of entries dropped per source [0]
  synth.format             \"dense\" or \"triplet\" [dense]
  fit.r1, fit.r2           ranks [taken from the data manifest]
  fit.beta                 orthonormality penalty weight [0.1]
  fit.stepsize             {\"auto\": c} for c / sigma_max^2 or {\"fixed\": eta} [{\"auto\": 0.25}]
  fit.max_iters            iteration budget [5000]
  fit.seed                 initialization seed [0]
  fit.loss                 \"se\" or \"pse\" [pse when any entry is missing, else se]
  fit.init_scale           initial factor standard deviation [0.01]
  fit.grad_tol             stop below this squared gradient norm [0]
  fit.trace_every          trace stride in iterations [1]
  execution                \"sequential\" or \"parallel:<workers>\" [sequential]
  paths.data, paths.out, paths.state, paths.truth   defaults for the matching flags

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.";

#[derive(Debug, Parser)]
#[command(name = "hmf", version, about = "Heterogeneous matrix factorization", after_long_help = CONFIG_HELP)]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides both synth.seed and fit.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory [paths.out].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// `sequential` or `parallel:<workers>` [execution, else sequential].
    #[arg(long, global = true)]
    execution: Option<ExecutionArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic instance: source files, ground truth and a manifest.
    Synth,
    /// Fit a data directory, or the configured synthetic instance when no data is given.
    Fit {
        /// Directory written by `synth`, or holding source_<i>.csv / source_<i>.tri [paths.data].
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Compare fitted factors with ground truth and print a JSON summary.
    Eval {
        /// Directory of fitted factors [paths.state].
        #[arg(long)]
        state: Option<PathBuf>,
        /// Directory of true factors [paths.truth].
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Data directory; adds the objective gap to the summary.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run one of the synthetic benchmarks.
    Bench {
        name: Bench,
        /// 100 sources instead of 20.
        #[arg(long, alias = "paper-scale")]
        full_scale: bool,
        /// key=value pairs, e.g. `N=10`; lists use `:` as in `ratios=0.5:0.1`.
        #[arg(long, value_delimiter = ',')]
        overrides: Vec<String>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Bench {
    Fig1,
    Table2,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] HmfError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(HmfError::Divergence { .. } | HmfError::Singular(_) | HmfError::NonFinite { .. }) => 3,
            _ => 2,
        }
    }
}

fn resolve(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Usage(format!("--{name} is required (or set paths.{name})")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        if let Some(s) = config.synth.as_mut() {
            s.seed = seed;
        }
        config.fit.seed = seed;
    }
    let execution = match (cli.execution, &config.execution) {
        (Some(e), _) => e.0,
        (None, Some(s)) => s.parse::<ExecutionArg>().map_err(CliError::Usage)?.0,
        (None, None) => Execution::Sequential,
    };
    let out = cli.out.or_else(|| config.paths.out.clone());

    match cli.command {
        Command::Synth => {
            let out = resolve(out, &None, "out")?;
            commands::synth(&config, &out)
        }
        Command::Fit { data } => {
            let out = resolve(out, &None, "out")?;
            let dataset = match data.or_else(|| config.paths.data.clone()) {
                Some(dir) => commands::load_dataset(&dir)?,
                None if config.synth.is_some() => commands::synth_dataset(&config)?,
                None => return Err(CliError::Usage("--data is required unless the config has a synth section".into())),
            };
            commands::fit_command(&config, dataset, &out, execution)
        }
        Command::Eval { state, truth, data } => {
            let state = resolve(state, &config.paths.state, "state")?;
            let truth = resolve(truth, &config.paths.truth, "truth")?;
            let data = data.or_else(|| config.paths.data.clone());
            let summary = commands::eval(&config, &state, &truth, data.as_deref())?;
            commands::write_eval(&summary, out.as_deref())
        }
        Command::Bench {
            name,
            full_scale,
            overrides,
        } => {
            let out = out.unwrap_or_else(|| Path::new(".").to_path_buf());
            match name {
                Bench::Fig1 => commands::bench_fig1(&overrides, full_scale, execution, &out),
                Bench::Table2 => commands::bench_table2(&overrides, full_scale, execution, &out),
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
