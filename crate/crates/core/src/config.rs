//! Run configuration: a TOML file whose every key has a default, plus
//! dotted-path overrides from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::{DisturbanceModel, PriorSpec};
use crate::controllers::{PlannerConfig, PlannerKind};
use crate::cost::CostConfig;
use crate::mppi::MppiConfig;
use crate::sim::{ScenarioConfig, SimError, TrialConfig};
use crate::traffic::TrafficModel;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("override '{0}': expected key=value")]
    MalformedOverride(String),
    #[error("override '{key}': {reason}")]
    BadOverride { key: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Planner for the `run` command.
    pub planner: PlannerKind,
    /// Planners compared by the `montecarlo` command.
    pub planners: Vec<PlannerKind>,
    pub seed: u64,
    pub trials: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub n_filter_particles: usize,
    pub n_control_particles: usize,
    pub mppi: MppiConfig,
    pub disturbance: DisturbanceModel,
    pub cost: CostConfig,
    pub model: TrafficModel,
    pub prior: PriorSpec,
    pub scenario: ScenarioConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_trial(&TrialConfig::default())
    }
}

impl RunConfig {
    pub fn from_trial(t: &TrialConfig) -> Self {
        Self {
            planner: PlannerKind::Dmppi,
            planners: PlannerKind::ALL.to_vec(),
            seed: 0,
            trials: 100,
            workers: None,
            out_dir: None,
            n_filter_particles: t.n_filter_particles,
            n_control_particles: t.planner.n_control_particles,
            mppi: t.planner.mppi.clone(),
            disturbance: t.planner.disturbance,
            cost: t.planner.cost,
            model: t.planner.model,
            prior: t.prior.clone(),
            scenario: t.scenario.clone(),
        }
    }

    pub fn trial_config(&self) -> TrialConfig {
        TrialConfig {
            planner: PlannerConfig {
                mppi: self.mppi.clone(),
                n_control_particles: self.n_control_particles,
                disturbance: self.disturbance,
                cost: self.cost,
                model: self.model,
            },
            n_filter_particles: self.n_filter_particles,
            prior: self.prior.clone(),
            scenario: self.scenario.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.trial_config().validate().map_err(|e: SimError| ConfigError::Invalid(e.to_string()))?;
        if self.trials < 1 {
            return Err(ConfigError::Invalid("trials must be >= 1".into()));
        }
        if self.planners.is_empty() {
            return Err(ConfigError::Invalid("planners must not be empty".into()));
        }
        if self.workers == Some(0) {
            return Err(ConfigError::Invalid("workers must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text).map_err(|e| match e {
            ConfigError::Parse(m) => ConfigError::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Applies `a.b.c=value` overrides. The value is read as a TOML literal
    /// when it parses as one and as a bare string otherwise.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, ConfigError> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Table::try_from(self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for raw in overrides {
            let raw = raw.as_ref();
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| ConfigError::MalformedOverride(raw.to_string()))?;
            let key = key.trim();
            set_path(&mut root, key, parse_value(value.trim())).map_err(|reason| ConfigError::BadOverride {
                key: key.to_string(),
                reason,
            })?;
        }
        toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
    }
}

fn parse_value(text: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), String> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err("empty path segment".into());
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut table = root;
    for (depth, p) in parents.iter().enumerate() {
        table = match table.get_mut(*p) {
            Some(toml::Value::Table(t)) => t,
            Some(_) => return Err(format!("'{}' is not a table", parts[..=depth].join("."))),
            None => return Err(format!("unknown key '{}'", parts[..=depth].join("."))),
        };
    }
    table.insert(last.to_string(), value);
    Ok(())
}
