use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::CategorizeConfig;
use crate::generators::{EndpointConfig, OfflineConfig};
use crate::kto::ObjectiveConfig;
use crate::matrix::MatrixOptions;
use crate::model::ResourceLimits;
use crate::sandbox::SandboxConfig;
use crate::seed::sha256_hex;
use crate::selection::SelectionConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Offline,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub offline: OfflineConfig,
    pub endpoint: EndpointConfig,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Offline,
            offline: OfflineConfig::default(),
            endpoint: EndpointConfig::default(),
        }
    }
}

/// Everything a run needs besides the corpus. Serialized as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoundConfig {
    pub seed: u64,
    /// Solver samples per problem.
    pub k1: usize,
    /// Adversary samples per problem.
    pub k2: usize,
    pub temperature: f64,
    pub rounds: u32,
    /// Fraction of the corpus held out for pass@k evaluation, chosen once per run.
    pub eval_split: f64,
    pub eval_samples: usize,
    pub eval_temperature: f64,
    pub pass_at_k: Vec<u64>,
    /// Backbone identifier shared by both roles unless overridden below.
    pub model_id: String,
    pub solver_model: Option<String>,
    pub adversary_model: Option<String>,
    /// Shell command run after each round with `{kind}`, `{dataset}`,
    /// `{model_id}` and `{round}` substituted; its last output line is the
    /// new model id.
    pub trainer_hook: Option<String>,
    /// A round aborts when more than this fraction of its cells hit
    /// harness failures.
    pub max_sandbox_failure_fraction: f64,
    /// Problems processed concurrently.
    pub problem_parallelism: usize,
    pub selection: SelectionConfig,
    pub objective: ObjectiveConfig,
    pub limits: ResourceLimits,
    pub categorize: CategorizeConfig,
    pub execution: MatrixOptions,
    pub sandbox: SandboxConfig,
    pub backend: BackendConfig,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig {
            seed: 0,
            k1: 16,
            k2: 16,
            temperature: 1.0,
            rounds: 5,
            eval_split: 0.1,
            eval_samples: 16,
            eval_temperature: 0.8,
            pass_at_k: vec![1, 5, 10],
            model_id: "base".into(),
            solver_model: None,
            adversary_model: None,
            trainer_hook: None,
            max_sandbox_failure_fraction: 0.05,
            problem_parallelism: 1,
            selection: SelectionConfig::default(),
            objective: ObjectiveConfig::default(),
            limits: ResourceLimits::default(),
            categorize: CategorizeConfig::default(),
            execution: MatrixOptions::default(),
            sandbox: SandboxConfig::default(),
            backend: BackendConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl RoundConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: RoundConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate().map_err(ConfigError::Invalid)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.k1 == 0 || self.k2 == 0 || self.rounds == 0 || self.eval_samples == 0 {
            return Err("k1, k2, rounds and eval_samples must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.eval_split) {
            return Err(format!(
                "eval_split must lie in [0, 1), got {}",
                self.eval_split
            ));
        }
        for (name, t) in [
            ("temperature", self.temperature),
            ("eval_temperature", self.eval_temperature),
        ] {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(format!("{name} must be finite and >= 0, got {t}"));
            }
        }
        if self.pass_at_k.is_empty() || self.pass_at_k.contains(&0) {
            return Err("pass_at_k must be a non-empty list of positive integers".into());
        }
        if !(0.0..=1.0).contains(&self.max_sandbox_failure_fraction) {
            return Err("max_sandbox_failure_fraction must lie in [0, 1]".into());
        }
        if self.problem_parallelism == 0 {
            return Err("problem_parallelism must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.backend.offline.bug_rate) {
            return Err("backend.offline.bug_rate must lie in [0, 1]".into());
        }
        if self.model_id.trim().is_empty() {
            return Err("model_id must be non-empty".into());
        }
        self.selection.validate()?;
        self.objective.validate()?;
        self.limits.validate()?;
        self.categorize.validate()?;
        Ok(())
    }

    pub fn solver_model(&self) -> &str {
        self.solver_model.as_deref().unwrap_or(&self.model_id)
    }

    pub fn adversary_model(&self) -> &str {
        self.adversary_model.as_deref().unwrap_or(&self.model_id)
    }

    /// Hash of the settings that influence results. Concurrency knobs and the
    /// scratch location are excluded so a run can resume on another machine.
    pub fn config_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.execution.parallelism = 0;
        canonical.problem_parallelism = 1;
        canonical.sandbox.scratch_root = None;
        canonical.backend.endpoint.max_in_flight = 0;
        sha256_hex(&serde_json::to_vec(&canonical).expect("config serializes"))
    }
}
