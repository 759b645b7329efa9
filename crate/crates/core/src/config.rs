//! Run configuration: everything a pipeline run needs, serialized verbatim
//! into the run directory so reports can be regenerated offline.

use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::client::{Cassette, CassetteMode, ModelEndpoint};
use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::gate::{DIRECT_GRID, PAIRWISE_GRID};
use crate::metrics::{AlphaLevel, BootstrapConfig};
use crate::model::{PolicyId, TaskKind};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    #[serde(default)]
    pub auth_token_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_concurrency")]
    pub max_concurrency: usize,
}

fn default_timeout_secs() -> f64 {
    60.0
}

fn default_max_concurrency() -> usize {
    4
}

impl EndpointConfig {
    pub fn to_endpoint(&self) -> ModelEndpoint {
        ModelEndpoint {
            base_url: self.base_url.clone(),
            model_name: self.model_name.clone(),
            auth_token_env: self.auth_token_env.clone(),
            timeout: Duration::from_secs_f64(self.timeout_secs),
            max_concurrency: self.max_concurrency,
        }
    }
}

/// How the direct-scoring bootstrap resamples: a per-instance proxy
/// (-|system - gold|, the default) or the full alpha statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectBootstrapMode {
    Proxy,
    Alpha,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetManifest,
    pub policies: Vec<PolicyId>,
    /// Gate thresholds to sweep; defaults to the task kind's full grid.
    #[serde(default)]
    pub grid: Option<Vec<f64>>,
    pub gen_endpoint: EndpointConfig,
    pub judge_endpoint: EndpointConfig,
    /// Endpoint for leave-one-out judging; defaults to the judge endpoint.
    #[serde(default)]
    pub ablation_endpoint: Option<EndpointConfig>,
    pub cassette_dir: PathBuf,
    pub cassette_mode: CassetteMode,
    /// Sampling temperatures are required run configuration: cassettes are
    /// only reproducible when they are pinned explicitly.
    pub gen_temperature: f64,
    pub judge_temperature: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_bootstrap_iterations")]
    pub bootstrap_iterations: usize,
    #[serde(default = "default_bootstrap_confidence")]
    pub bootstrap_confidence: f64,
    #[serde(default = "default_alpha_level")]
    pub alpha_level: AlphaLevel,
    #[serde(default = "default_direct_bootstrap")]
    pub direct_bootstrap: DirectBootstrapMode,
    /// Override for the checklist classification threshold
    /// (pairwise default 0.3, direct default 1.5).
    #[serde(default)]
    pub checklist_threshold: Option<f64>,
    pub out_dir: PathBuf,
}

fn default_seed() -> u64 {
    42
}

fn default_bootstrap_iterations() -> usize {
    1000
}

fn default_bootstrap_confidence() -> f64 {
    0.95
}

fn default_alpha_level() -> AlphaLevel {
    AlphaLevel::Interval
}

fn default_direct_bootstrap() -> DirectBootstrapMode {
    DirectBootstrapMode::Proxy
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            Error::Validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        let config: RunConfig = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Validation(format!("invalid config {}: {e}", path.display())))?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.policies.is_empty() {
            return Err(Error::Validation("at least one policy is required".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for policy in &self.policies {
            if !seen.insert(*policy) {
                return Err(Error::Validation(format!("duplicate policy {policy}")));
            }
        }
        if !self.dataset.path.exists() {
            return Err(Error::Validation(format!(
                "dataset path {} does not exist",
                self.dataset.path.display()
            )));
        }
        if self.cassette_mode == CassetteMode::Replay && !self.cassette_dir.exists() {
            return Err(Error::Validation(format!(
                "replay cassette directory {} does not exist",
                self.cassette_dir.display()
            )));
        }
        for k in self.grid() {
            let legal: &[f64] = match self.dataset.kind {
                TaskKind::Pairwise => &PAIRWISE_GRID,
                TaskKind::Direct => &DIRECT_GRID,
            };
            if !legal.contains(&k) {
                return Err(Error::Validation(format!(
                    "grid value {k} is not legal for {} tasks",
                    self.dataset.kind
                )));
            }
        }
        self.gen_endpoint.to_endpoint().validate()?;
        self.judge_endpoint.to_endpoint().validate()?;
        if let Some(ep) = &self.ablation_endpoint {
            ep.to_endpoint().validate()?;
        }
        self.bootstrap().validate()?;
        if self.gen_temperature < 0.0 || self.judge_temperature < 0.0 {
            return Err(Error::Validation("temperatures must be non-negative".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Vec<f64> {
        match &self.grid {
            Some(grid) => grid.clone(),
            None => match self.dataset.kind {
                TaskKind::Pairwise => PAIRWISE_GRID.to_vec(),
                TaskKind::Direct => DIRECT_GRID.to_vec(),
            },
        }
    }

    pub fn bootstrap(&self) -> BootstrapConfig {
        BootstrapConfig {
            iterations: self.bootstrap_iterations,
            seed: self.seed,
            confidence: self.bootstrap_confidence,
        }
    }

    pub fn cassette(&self) -> Cassette {
        Cassette::new(&self.cassette_dir, self.cassette_mode)
    }

    /// Policies in report order (fixed policy order, not config order).
    pub fn ordered_policies(&self) -> Vec<PolicyId> {
        PolicyId::ALL
            .iter()
            .copied()
            .filter(|p| self.policies.contains(p))
            .collect()
    }

    pub fn ablation_endpoint_config(&self) -> &EndpointConfig {
        self.ablation_endpoint.as_ref().unwrap_or(&self.judge_endpoint)
    }
}
