//! The TOML configuration file, and how command line flags override it.
//!
//! Every key is optional. Secrets never live in the file: the backend token
//! is read from the variable named by `backend.remote.token_env`, and the
//! service bearer token from `service.token_env`.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use chronoreason::backends::RemoteConfig;
use chronoreason::engine::EngineConfig;
use chronoreason::orchestrator::CaseConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub paths: Paths,
    pub backend: BackendConfig,
    pub engine: EngineConfig,
    /// Case pipeline settings. Its `engine` table is ignored: expert runs use
    /// the top-level `[engine]`.
    pub case: CaseConfig,
    pub service: ServiceConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub store: PathBuf,
    pub corpus: Option<PathBuf>,
    pub roster: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            store: PathBuf::from("runs"),
            corpus: None,
            roster: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Scripted,
    Remote,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Script file for the scripted backend.
    pub script: Option<PathBuf>,
    /// Let the scripted backend answer unscripted calls with seeded filler.
    /// Always on when no script is given.
    pub fallback: bool,
    pub remote: RemoteConfig,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ApproverKind {
    /// Approves when the proposed answer matches the case ground truth.
    #[default]
    Auto,
    Always,
    /// Waits on the review queue (service only).
    Human,
}

impl FromStr for ApproverKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        <Self as clap::ValueEnum>::from_str(s, true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    /// Environment variable holding the optional bearer token.
    pub token_env: String,
    pub approver: ApproverKind,
    pub review_timeout_ms: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            token_env: "CHRONOREASON_SERVICE_TOKEN".into(),
            approver: ApproverKind::Human,
            review_timeout_ms: 30 * 60 * 1000,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if let Err(e) = self.engine.validate() {
            bail!("engine: {e}");
        }
        if self.case.max_rounds == 0 {
            bail!("case.max_rounds must be at least 1");
        }
        Ok(())
    }

    /// The case settings with the shared engine settings folded in.
    pub fn case_config(&self) -> CaseConfig {
        CaseConfig {
            engine: self.engine.clone(),
            ..self.case.clone()
        }
    }

    /// Bearer token for the service, when its variable is set and non-empty.
    pub fn service_token(&self) -> Option<String> {
        std::env::var(&self.service.token_env).ok().filter(|t| !t.trim().is_empty())
    }
}
