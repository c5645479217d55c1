//! Run configuration: one TOML file describes a whole run, environment
//! variables override endpoint/secret values, and command-line flags
//! override both. The layering keeps a run reproducible from a single
//! serializable document while keeping secrets out of it.

use crate::decontam::DecontamSettings;
use crate::domain::GenerationConfig;
use crate::gateway::{GatewayConfig, HttpSettings, MockSettings};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Which backend the run talks to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendMode {
    /// Deterministic offline backend; the default so a bare invocation
    /// never reaches for the network.
    Mock,
    /// OpenAI-compatible HTTP serving endpoint.
    Http,
}

/// Backend selection plus the settings for both modes; only the selected
/// mode's settings are consulted at run time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub mode: BackendMode,
    pub mock: MockSettings,
    pub http: HttpSettings,
}

impl Default for BackendSection {
    fn default() -> Self {
        BackendSection {
            mode: BackendMode::Mock,
            mock: MockSettings::default(),
            http: HttpSettings::default(),
        }
    }
}

/// Decontamination stage configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct DecontamSection {
    #[serde(flatten)]
    pub settings: DecontamSettings,
    /// Benchmark question files (`.jsonl` records or plain text). Empty
    /// means the decontamination stage is skipped.
    pub benchmarks: Vec<String>,
}

/// Everything a run needs, as one serializable tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub generation: GenerationConfig,
    pub backend: BackendSection,
    pub gateway: GatewayConfig,
    pub decontam: DecontamSection,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("failed to read config file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config file {path} is not valid TOML: {message}")]
    Parse { path: String, message: String },
    #[error("invalid configuration: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

impl PipelineConfig {
    /// Parses a TOML config file. Missing sections and fields take their
    /// defaults; unknown keys are rejected so typos fail loudly.
    pub fn load(path: &Path) -> Result<PipelineConfig, ConfigError> {
        let display = path.display().to_string();
        let raw = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: display.clone(),
            source,
        })?;
        let config: PipelineConfig = toml::from_str(&raw).map_err(|e| ConfigError::Parse {
            path: display,
            message: e.to_string(),
        })?;
        Ok(config)
    }

    /// Applies environment overrides through a lookup function (injectable
    /// for tests). Recognized variables:
    /// `EVOFORGE_BACKEND_URL`, `EVOFORGE_EMBEDDING_URL`, `EVOFORGE_API_KEY`.
    pub fn apply_env_from(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        if let Some(url) = lookup("EVOFORGE_BACKEND_URL") {
            self.backend.http.base_url = url;
        }
        if let Some(url) = lookup("EVOFORGE_EMBEDDING_URL") {
            self.backend.http.embedding_base_url = Some(url);
        }
        if let Some(key) = lookup("EVOFORGE_API_KEY") {
            self.backend.http.api_key = Some(key);
        }
    }

    /// Applies the process environment.
    pub fn apply_env(&mut self) {
        self.apply_env_from(|name| std::env::var(name).ok());
    }

    /// Validates the whole tree, collecting every violation.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut problems = match self.generation.validate() {
            Ok(()) => Vec::new(),
            Err(err) => err.violations,
        };
        if self.gateway.max_in_flight == 0 {
            problems.push("gateway.max_in_flight must be ≥ 1".to_string());
        }
        let threshold = self.decontam.settings.screening_threshold;
        if !threshold.is_finite() || threshold < 0.0 {
            problems.push(format!(
                "decontam.screening_threshold must be a finite value ≥ 0, got {threshold}"
            ));
        }
        if self.backend.mode == BackendMode::Http && self.backend.http.base_url.trim().is_empty() {
            problems.push("backend.http.base_url must be set for http mode".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }

    /// Copy with every secret blanked, safe to embed in manifests and
    /// reports. The key's presence is preserved so a manifest still shows
    /// whether the run authenticated.
    pub fn redacted(&self) -> PipelineConfig {
        let mut copy = self.clone();
        if copy.backend.http.api_key.is_some() {
            copy.backend.http.api_key = Some("<redacted>".to_string());
        }
        copy
    }
}
