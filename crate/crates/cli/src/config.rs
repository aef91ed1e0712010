//! Experiment configuration: JSON schema, defaults, and validation that
//! reports every violation at once with field paths.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use fedbag_core::data::synth::SynthSpec;
use fedbag_core::model::ModelDims;
use fedbag_core::optim::{AdamHyper, EarlyStopConfig};
use fedbag_core::privacy::PrivacyConfig;
use fedbag_core::Task;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {detail}")]
    Parse {
        line: usize,
        column: usize,
        detail: String,
    },
    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
}

/// Training scenario. Serialized as `"single_site:<id>"`, `"centralized"`,
/// or `"federated"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Scenario {
    SingleSite(u32),
    Centralized,
    Federated,
}

impl Scenario {
    /// Federated runs sweep the alpha list; the baselines ignore it.
    pub fn uses_alpha(&self) -> bool {
        matches!(self, Scenario::Federated)
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scenario::SingleSite(id) => write!(f, "single_site:{id}"),
            Scenario::Centralized => write!(f, "centralized"),
            Scenario::Federated => write!(f, "federated"),
        }
    }
}

impl From<Scenario> for String {
    fn from(s: Scenario) -> String {
        s.to_string()
    }
}

impl std::str::FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "centralized" => Ok(Scenario::Centralized),
            "federated" => Ok(Scenario::Federated),
            other => {
                if let Some(id) = other.strip_prefix("single_site:") {
                    id.parse()
                        .map(Scenario::SingleSite)
                        .map_err(|_| format!("bad site id in scenario {other:?}"))
                } else {
                    Err(format!(
                        "unknown scenario {other:?} (expected single_site:<id>, centralized, federated)"
                    ))
                }
            }
        }
    }
}

impl TryFrom<String> for Scenario {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// Exactly one dataset source: a manifest on disk, or an in-memory
/// synthetic specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DatasetSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
}

/// Model sizes. Input and output widths are normally inferred from the
/// dataset; explicit values must agree with it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_in: Option<usize>,
    #[serde(default = "default_d_proj")]
    pub d_proj: usize,
    #[serde(default = "default_d_attn")]
    pub d_attn: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_out: Option<usize>,
}

fn default_d_proj() -> usize {
    ModelDims::DEFAULT_D_PROJ
}
fn default_d_attn() -> usize {
    ModelDims::DEFAULT_D_ATTN
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d_in: None,
            d_proj: default_d_proj(),
            d_attn: default_d_attn(),
            n_out: None,
        }
    }
}

fn default_scenarios() -> Vec<Scenario> {
    vec![Scenario::Federated]
}
fn default_alphas() -> Vec<f64> {
    vec![0.0, 0.001, 0.01, 0.1, 1.0]
}
fn default_beta() -> f64 {
    0.15
}
fn default_max_rounds() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: Task,
    #[serde(default = "default_scenarios")]
    pub scenarios: Vec<Scenario>,
    /// Noise levels swept by federated scenarios.
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub optimizer: AdamHyper,
    #[serde(default = "default_beta")]
    pub survival_beta: f64,
    #[serde(default)]
    pub early_stop: EarlyStopConfig,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: usize,
    /// Sensitivity and delta-reporting settings; alpha comes from `alphas`.
    #[serde(default)]
    pub privacy: PrivacyConfig,
    pub dataset: DatasetSource,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Semantic validation. Collects every violation, each tagged with the
    /// offending field path.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut issues = Vec::new();

        if self.scenarios.is_empty() {
            issues.push("scenarios: at least one scenario required".to_string());
        }
        if self.alphas.is_empty() && self.scenarios.iter().any(Scenario::uses_alpha) {
            issues.push("alphas: federated scenarios need at least one alpha".to_string());
        }
        for (i, &alpha) in self.alphas.iter().enumerate() {
            if !(alpha >= 0.0) || !alpha.is_finite() {
                issues.push(format!("alphas[{i}]: must be finite and >= 0, got {alpha}"));
            }
        }
        if !(self.optimizer.learning_rate > 0.0) {
            issues.push(format!(
                "optimizer.learning_rate: must be positive, got {}",
                self.optimizer.learning_rate
            ));
        }
        if !(self.optimizer.weight_decay >= 0.0) {
            issues.push(format!(
                "optimizer.weight_decay: must be >= 0, got {}",
                self.optimizer.weight_decay
            ));
        }
        if !(0.0..=1.0).contains(&self.survival_beta) {
            issues.push(format!(
                "survival_beta: must lie in [0, 1], got {}",
                self.survival_beta
            ));
        }
        if self.early_stop.patience == 0 {
            issues.push("early_stop.patience: must be >= 1".to_string());
        }
        if self.model.d_proj == 0 || self.model.d_attn == 0 {
            issues.push("model: d_proj and d_attn must be >= 1".to_string());
        }
        if !(self.privacy.sensitivity > 0.0) {
            issues.push(format!(
                "privacy.sensitivity: must be positive, got {}",
                self.privacy.sensitivity
            ));
        }

        match (&self.dataset.manifest, &self.dataset.synth) {
            (None, None) => {
                issues.push("dataset: either manifest or synth must be set".to_string())
            }
            (Some(_), Some(_)) => {
                issues.push("dataset: manifest and synth are mutually exclusive".to_string())
            }
            (None, Some(spec)) => {
                if let Err(e) = spec.validate() {
                    issues.push(format!("dataset.synth: {e}"));
                }
                if spec.task != self.task {
                    issues.push(format!(
                        "dataset.synth.task: {} does not match task {}",
                        spec.task, self.task
                    ));
                }
            }
            (Some(_), None) => {}
        }

        if issues.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(issues))
        }
    }
}

/// Parse and validate a configuration file.
pub fn validate_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let config: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
            line: e.line(),
            column: e.column(),
            detail: e.to_string(),
        })?;
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> serde_json::Value {
        serde_json::json!({
            "task": "classification",
            "seed": 7,
            "dataset": {
                "synth": {
                    "task": "classification",
                    "seed": 7,
                    "d_in": 16,
                    "sites": [{"cases": 20}, {"cases": 20}]
                }
            }
        })
    }

    fn parse(value: serde_json::Value) -> Result<ExperimentConfig, ConfigError> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, serde_json::to_string_pretty(&value).unwrap()).unwrap();
        validate_config(&path)
    }

    #[test]
    fn defaults_fill_omitted_hyperparameters() {
        let config = parse(minimal_json()).unwrap();
        assert_eq!(config.optimizer.learning_rate, 2e-4);
        assert_eq!(config.optimizer.weight_decay, 1e-5);
        assert_eq!(config.survival_beta, 0.15);
        assert_eq!(config.early_stop.min_rounds, 35);
        assert_eq!(config.early_stop.patience, 20);
        assert_eq!(config.alphas, vec![0.0, 0.001, 0.01, 0.1, 1.0]);
        assert_eq!(config.scenarios, vec![Scenario::Federated]);
    }

    #[test]
    fn negative_alpha_is_reported_with_path() {
        let mut value = minimal_json();
        value["alphas"] = serde_json::json!([0.0, -0.5]);
        match parse(value) {
            Err(ConfigError::Invalid(issues)) => {
                assert!(issues.iter().any(|i| i.starts_with("alphas[1]")), "{issues:?}");
            }
            other => panic!("expected invalid, got {other:?}"),
        }
    }

    #[test]
    fn both_dataset_sources_conflict() {
        let mut value = minimal_json();
        value["dataset"]["manifest"] = serde_json::json!("data/manifest.csv");
        match parse(value) {
            Err(ConfigError::Invalid(issues)) => {
                assert!(issues.iter().any(|i| i.contains("mutually exclusive")));
            }
            other => panic!("expected invalid, got {other:?}"),
        }
    }

    #[test]
    fn all_violations_reported_at_once() {
        let mut value = minimal_json();
        value["alphas"] = serde_json::json!([-1.0]);
        value["survival_beta"] = serde_json::json!(2.0);
        value["optimizer"] = serde_json::json!({"learning_rate": 0.0, "beta1": 0.9,
            "beta2": 0.999, "epsilon": 1e-8, "weight_decay": -1.0});
        match parse(value) {
            Err(ConfigError::Invalid(issues)) => {
                assert!(issues.len() >= 4, "{issues:?}");
            }
            other => panic!("expected invalid, got {other:?}"),
        }
    }

    #[test]
    fn parse_error_carries_line_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.json");
        std::fs::write(&path, "{\n  \"task\": classification\n}").unwrap();
        match validate_config(&path) {
            Err(ConfigError::Parse { line, column, .. }) => {
                assert_eq!(line, 2);
                assert!(column > 0);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn scenario_strings_roundtrip() {
        for (text, expected) in [
            ("centralized", Scenario::Centralized),
            ("federated", Scenario::Federated),
            ("single_site:3", Scenario::SingleSite(3)),
        ] {
            let parsed: Scenario = text.parse().unwrap();
            assert_eq!(parsed, expected);
            assert_eq!(parsed.to_string(), text);
        }
        assert!("single_site:x".parse::<Scenario>().is_err());
        assert!("pooled".parse::<Scenario>().is_err());
    }
}
