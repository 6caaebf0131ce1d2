//! Run configuration: one JSON document (or its TOML rendering) with
//! `model`, `reaction`, `solver`, `initial`, `experiment` and `output`
//! blocks. Unknown keys are rejected everywhere.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use xdiff_core::hypotheses::{BoundednessVariant, CheckRequest, Hypothesis, LipschitzVariant};
use xdiff_core::{InitialData, ModelParams, ModelSpec, Reaction, SolverConfig};

/// A configuration problem, anchored to a line of the source when possible.
#[derive(Debug, Error)]
#[error("{location}: {message}")]
pub struct ConfigError {
    pub location: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(location: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            location: location.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
    #[default]
    Both,
}

impl Format {
    pub fn csv(self) -> bool {
        matches!(self, Self::Csv | Self::Both)
    }

    pub fn json(self) -> bool {
        matches!(self, Self::Json | Self::Both)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReactionConfig {
    /// `r_i = rate * u_i * (u_0 - 1/2)`.
    Logistic { rate: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Delta,
    Tau,
    Parameter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    /// Dotted path into the model block for the `parameter` axis, e.g.
    /// `alpha` or `d.1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parameter: Option<String>,
}

fn default_samples() -> usize {
    10_000
}
fn default_seed() -> u64 {
    42
}
fn default_delta() -> f64 {
    1e-2
}
fn default_time_refinement() -> usize {
    4
}
fn default_space_refinement() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub checks: Vec<Hypothesis>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Exponent for `H5prime`; defaults to the scalar model's `alpha`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    /// Constant for `LemG`; defaults to the empirical `H3` constant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lemma_constant: Option<f64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_time_refinement")]
    pub time_refinement: usize,
    #[serde(default = "default_space_refinement")]
    pub space_refinement: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            checks: Vec::new(),
            samples: default_samples(),
            seed: default_seed(),
            gamma: None,
            lemma_constant: None,
            delta: default_delta(),
            time_refinement: default_time_refinement(),
            space_refinement: default_space_refinement(),
            sweep: None,
        }
    }
}

fn default_directory() -> PathBuf {
    PathBuf::from("xdiff-out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_directory")]
    pub directory: PathBuf,
    #[serde(default)]
    pub format: Format,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: default_directory(),
            format: Format::Both,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reaction: Option<ReactionConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialData>,
    #[serde(default)]
    pub experiment: ExperimentConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// A parsed configuration together with its source text, kept for
/// line-anchored messages.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    path: String,
    source: String,
}

impl fmt::Display for LoadedConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.path)
    }
}

/// Line of the first mention of `key` as a JSON string or TOML key.
fn key_line(source: &str, key: &str) -> Option<usize> {
    let quoted = format!("\"{key}\"");
    source
        .lines()
        .position(|l| {
            let t = l.trim_start();
            t.contains(&quoted)
                || t.starts_with(&format!("{key} "))
                || t.starts_with(&format!("{key}="))
                || t.starts_with(&format!("[{key}]"))
                || t.starts_with(&format!("[experiment.{key}]"))
        })
        .map(|k| k + 1)
}

/// Serde reports unknown fields of tagged enums at the end of the enclosing
/// object; point at the offending key instead.
fn unknown_field_line(source: &str, message: &str) -> Option<usize> {
    let rest = message.split("unknown field `").nth(1)?;
    key_line(source, rest.split('`').next()?)
}

fn line_of_offset(source: &str, offset: usize) -> usize {
    source[..offset.min(source.len())].matches('\n').count() + 1
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let shown = path.display().to_string();
        let source =
            std::fs::read_to_string(path).map_err(|e| ConfigError::new(&shown, format!("cannot read config: {e}")))?;
        let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        Self::parse(&shown, source, is_toml)
    }

    pub fn parse(path: &str, source: String, is_toml: bool) -> Result<Self, ConfigError> {
        let config = if is_toml {
            toml::from_str::<RunConfig>(&source).map_err(|e| {
                let line = unknown_field_line(&source, e.message())
                    .or_else(|| e.span().map(|s| line_of_offset(&source, s.start)))
                    .unwrap_or(1);
                ConfigError::new(format!("{path}:{line}"), e.message().to_string())
            })?
        } else {
            serde_json::from_str::<RunConfig>(&source).map_err(|e| {
                let text = e.to_string();
                let message = text.split(" at line ").next().unwrap_or(&text).to_string();
                let location = match unknown_field_line(&source, &message) {
                    Some(line) => format!("{path}:{line}"),
                    None => format!("{path}:{}:{}", e.line(), e.column()),
                };
                ConfigError::new(location, message)
            })?
        };
        Ok(Self {
            config,
            path: path.to_string(),
            source,
        })
    }

    /// Error anchored at the first line mentioning `key`, or at the file.
    pub fn error_at(&self, key: &str, message: impl Into<String>) -> ConfigError {
        match key_line(&self.source, key) {
            Some(line) => ConfigError::new(format!("{}:{line}", self.path), message),
            None => ConfigError::new(&self.path, message),
        }
    }

    pub fn model(&self) -> Result<ModelSpec, ConfigError> {
        build_model(&self.config.model, self.config.reaction.as_ref()).map_err(|e| self.error_at("model", e))
    }

    pub fn solver(&self) -> Result<SolverConfig, ConfigError> {
        let cfg = self
            .config
            .solver
            .ok_or_else(|| self.error_at("solver", "a solver block is required for this command"))?;
        cfg.validate().map_err(|e| self.error_at("solver", e.to_string()))?;
        Ok(cfg)
    }

    /// Initial data, filled with the model's default profile when absent.
    pub fn initial(&mut self, species: usize) -> Result<InitialData, ConfigError> {
        let init = self
            .config
            .initial
            .get_or_insert_with(|| InitialData::default_for(species))
            .clone();
        if init.species() != species {
            return Err(self.error_at(
                "initial",
                format!("initial data has {} species, the model has {species}", init.species()),
            ));
        }
        Ok(init)
    }

    pub fn reference_solver(&self, cfg: &SolverConfig) -> Result<SolverConfig, ConfigError> {
        let e = &self.config.experiment;
        if e.time_refinement == 0 || e.space_refinement == 0 {
            return Err(self.error_at("time_refinement", "refinement factors must be positive"));
        }
        let fine = cfg.refined(e.time_refinement, e.space_refinement);
        xdiff_core::diagnostics::refinement_factors(cfg, &fine)
            .map_err(|err| self.error_at("time_refinement", err.to_string()))?;
        Ok(fine)
    }

    pub fn delta(&self) -> Result<f64, ConfigError> {
        let d = self.config.experiment.delta;
        if d >= 0.0 && d.is_finite() {
            Ok(d)
        } else {
            Err(self.error_at("delta", format!("delta must be a finite number >= 0, got {d}")))
        }
    }

    pub fn checks(&self, m: &ModelSpec) -> Result<Vec<CheckRequest>, ConfigError> {
        let e = &self.config.experiment;
        if e.checks.is_empty() {
            return Err(self.error_at("checks", "the check list must name at least one check"));
        }
        if e.samples == 0 {
            return Err(self.error_at("samples", "samples must be positive"));
        }
        let gamma = e.gamma.unwrap_or(match m.params {
            ModelParams::Scalar { alpha } if alpha > 0.0 => alpha,
            _ => 1.0,
        });
        e.checks
            .iter()
            .map(|h| {
                Ok(match h {
                    Hypothesis::H3 => CheckRequest::H3,
                    Hypothesis::H4i => CheckRequest::H4(BoundednessVariant::I),
                    Hypothesis::H4ii => CheckRequest::H4(BoundednessVariant::Ii),
                    Hypothesis::H5 => CheckRequest::H5(LipschitzVariant::H5),
                    Hypothesis::H5prime => {
                        if !(gamma > 0.0 && gamma.is_finite()) {
                            return Err(self.error_at("gamma", format!("gamma must be positive, got {gamma}")));
                        }
                        CheckRequest::H5(LipschitzVariant::H5Prime { gamma })
                    }
                    Hypothesis::LemG => CheckRequest::LemG(e.lemma_constant),
                    Hypothesis::Gpl => CheckRequest::Gpl,
                    Hypothesis::Reaction => {
                        if m.reaction_term().is_none() {
                            return Err(self.error_at("checks", "the Reaction check needs a reaction block"));
                        }
                        CheckRequest::Reaction
                    }
                    Hypothesis::IonLemma => {
                        if !matches!(m.params, ModelParams::IonChannel { .. }) {
                            return Err(self.error_at("checks", "IonLemma applies to the ion_channel model only"));
                        }
                        CheckRequest::IonLemma
                    }
                })
            })
            .collect()
    }

    pub fn sweep(&self) -> Result<SweepConfig, ConfigError> {
        let s = self
            .config
            .experiment
            .sweep
            .clone()
            .ok_or_else(|| self.error_at("experiment", "the sweep command needs experiment.sweep"))?;
        if s.values.is_empty() {
            return Err(self.error_at("values", "the sweep axis is empty"));
        }
        if let Some(v) = s.values.iter().find(|v| !v.is_finite()) {
            return Err(self.error_at("values", format!("sweep value {v} is not finite")));
        }
        match (s.axis, &s.parameter) {
            (SweepAxis::Parameter, None) => Err(self.error_at("axis", "a parameter axis needs `parameter`")),
            (SweepAxis::Parameter, Some(p)) => {
                with_parameter(&self.config.model, p, s.values[0]).map_err(|e| self.error_at("parameter", e))?;
                Ok(s)
            }
            (_, Some(_)) => Err(self.error_at("parameter", "`parameter` is only used with the parameter axis")),
            (SweepAxis::Delta, None) => {
                if let Some(v) = s.values.iter().find(|v| **v < 0.0) {
                    return Err(self.error_at("values", format!("delta must be >= 0, got {v}")));
                }
                Ok(s)
            }
            (SweepAxis::Tau, None) => {
                if let Some(v) = s.values.iter().find(|v| **v <= 0.0) {
                    return Err(self.error_at("values", format!("tau must be positive, got {v}")));
                }
                Ok(s)
            }
        }
    }
}

pub fn build_model(params: &ModelParams, reaction: Option<&ReactionConfig>) -> Result<ModelSpec, String> {
    let m = ModelSpec::from_params(params.clone()).map_err(|e| e.to_string())?;
    match reaction {
        None => Ok(m),
        Some(ReactionConfig::Logistic { rate }) => {
            if !rate.is_finite() {
                return Err(format!("reaction rate must be finite, got {rate}"));
            }
            m.with_reaction(Reaction::Logistic { rate: *rate }, rate.abs())
                .map_err(|e| e.to_string())
        }
    }
}

/// `params` with the entry at the dotted `path` replaced by `value`.
pub fn with_parameter(params: &ModelParams, path: &str, value: f64) -> Result<ModelParams, String> {
    let mut tree = serde_json::to_value(params).map_err(|e| e.to_string())?;
    let mut node = &mut tree;
    for seg in path.split('.') {
        if seg == "name" {
            return Err("the model name is not a sweepable parameter".into());
        }
        node = match node {
            Value::Object(map) => map.get_mut(seg),
            Value::Array(items) => seg.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| format!("model `{}` has no parameter `{path}`", params.name()))?;
    }
    if !node.is_number() {
        return Err(format!("`{path}` is not a scalar parameter"));
    }
    *node = serde_json::json!(value);
    let out: ModelParams = serde_json::from_value(tree).map_err(|e| e.to_string())?;
    ModelSpec::from_params(out.clone()).map_err(|e| e.to_string())?;
    Ok(out)
}
