//! JSON run configuration. Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use hmf::{Execution, HyperParams, LossKind, StepsizePolicy, SynthConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub synth: Option<SynthSection>,
    #[serde(default)]
    pub fit: FitSection,
    /// `"sequential"` or `"parallel:<workers>"`.
    #[serde(default)]
    pub execution: Option<String>,
    #[serde(default)]
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Widths {
    Uniform(usize),
    PerSource(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    #[default]
    Dense,
    Triplet,
}

impl DataFormat {
    pub fn extension(self) -> &'static str {
        match self {
            DataFormat::Dense => "csv",
            DataFormat::Triplet => "tri",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub n1: usize,
    pub n2: Widths,
    /// Required when `n2` is a single number.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_sources: Option<usize>,
    pub r1: usize,
    pub r2: usize,
    #[serde(default)]
    pub noise_scale: f64,
    /// Standard deviation of factor entries; defaults to 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factor_scale: Option<f64>,
    /// Use `(n1·n2)^(-1/4)` as the factor scale.
    #[serde(default)]
    pub unit_spectrum: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub missing_ratio: f64,
    #[serde(default)]
    pub format: DataFormat,
}

impl SynthSection {
    pub fn to_config(&self) -> Result<SynthConfig, CliError> {
        let n2 = match &self.n2 {
            Widths::PerSource(v) => {
                if self.n_sources.is_some_and(|n| n != v.len()) {
                    return Err(CliError::Usage("synth.n_sources disagrees with the length of synth.n2".into()));
                }
                v.clone()
            }
            Widths::Uniform(w) => {
                let n = self
                    .n_sources
                    .ok_or_else(|| CliError::Usage("synth.n_sources is required when synth.n2 is a number".into()))?;
                vec![*w; n]
            }
        };
        if self.unit_spectrum && self.factor_scale.is_some() {
            return Err(CliError::Usage("synth.factor_scale and synth.unit_spectrum are exclusive".into()));
        }
        let mut cfg = SynthConfig {
            n1: self.n1,
            n2,
            r1: self.r1,
            r2: self.r2,
            noise_scale: self.noise_scale,
            factor_scale: self.factor_scale.unwrap_or(1.0),
            seed: self.seed,
        };
        if self.unit_spectrum {
            cfg = cfg.with_unit_spectrum();
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepsizeSpec {
    Auto(f64),
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossSpec {
    Se,
    Pse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    pub r1: Option<usize>,
    pub r2: Option<Widths>,
    pub beta: f64,
    pub stepsize: StepsizeSpec,
    pub max_iters: usize,
    pub seed: u64,
    /// Defaults to `pse` when any source carries a partial mask, else `se`.
    pub loss: Option<LossSpec>,
    pub init_scale: f64,
    pub grad_tol: f64,
    pub trace_every: usize,
}

impl Default for FitSection {
    fn default() -> Self {
        let p = HyperParams::new(0, Vec::new());
        let stepsize = match p.stepsize {
            StepsizePolicy::Auto(c) => StepsizeSpec::Auto(c),
            StepsizePolicy::Fixed(e) => StepsizeSpec::Fixed(e),
        };
        FitSection {
            r1: None,
            r2: None,
            beta: p.beta,
            stepsize,
            max_iters: p.max_iters,
            seed: p.seed,
            loss: None,
            init_scale: p.init_scale,
            grad_tol: p.grad_tol,
            trace_every: 1,
        }
    }
}

impl FitSection {
    /// `fallback_ranks` fills ranks missing from the config.
    pub fn to_params(
        &self,
        n_sources: usize,
        has_partial_masks: bool,
        fallback_ranks: Option<(usize, usize)>,
    ) -> Result<HyperParams, CliError> {
        let r1 = self
            .r1
            .or(fallback_ranks.map(|r| r.0))
            .ok_or_else(|| CliError::Usage("fit.r1 is required (no manifest ranks available)".into()))?;
        let r2 = match &self.r2 {
            Some(Widths::Uniform(r)) => vec![*r; n_sources],
            Some(Widths::PerSource(v)) => v.clone(),
            None => vec![
                fallback_ranks
                    .map(|r| r.1)
                    .ok_or_else(|| CliError::Usage("fit.r2 is required (no manifest ranks available)".into()))?;
                n_sources
            ],
        };
        let mut p = HyperParams::new(r1, r2);
        p.beta = self.beta;
        p.stepsize = match self.stepsize {
            StepsizeSpec::Auto(c) => StepsizePolicy::Auto(c),
            StepsizeSpec::Fixed(e) => StepsizePolicy::Fixed(e),
        };
        p.max_iters = self.max_iters;
        p.seed = self.seed;
        p.loss = match self.loss {
            Some(LossSpec::Se) => LossKind::Se,
            Some(LossSpec::Pse) => LossKind::Pse,
            None if has_partial_masks => LossKind::Pse,
            None => LossKind::Se,
        };
        p.init_scale = self.init_scale;
        p.grad_tol = self.grad_tol;
        Ok(p)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub state: Option<PathBuf>,
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecutionArg(pub Execution);

impl FromStr for ExecutionArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "sequential" {
            return Ok(ExecutionArg(Execution::Sequential));
        }
        let workers = s
            .strip_prefix("parallel:")
            .and_then(|w| w.parse::<usize>().ok())
            .filter(|&w| w > 0)
            .ok_or_else(|| format!("expected `sequential` or `parallel:<workers>`, got `{s}`"))?;
        Ok(ExecutionArg(Execution::ParallelClients(workers)))
    }
}
