//! Service configuration: storage location, listen address, scoring weights
//! and the static bearer tokens of API principals.

use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use auditbox_core::engine::ScoringWeights;
use auditbox_core::model::{AuditorIdentity, Party, Relationship};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Permission {
    ScopeAudit,
    RegisterBinding,
    Ingest,
    Query,
    Report,
    Admin,
}

impl Permission {
    pub const ALL: [Permission; 6] = [
        Permission::ScopeAudit,
        Permission::RegisterBinding,
        Permission::Ingest,
        Permission::Query,
        Permission::Report,
        Permission::Admin,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Permission::ScopeAudit => "scope_audit",
            Permission::RegisterBinding => "register_binding",
            Permission::Ingest => "ingest",
            Permission::Query => "query",
            Permission::Report => "report",
            Permission::Admin => "admin",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Principal {
    pub token: String,
    pub auditor: AuditorIdentity,
    pub permissions: BTreeSet<Permission>,
}

impl Principal {
    pub fn has(&self, permission: Permission) -> bool {
        self.permissions.contains(&permission)
    }

    /// Principal used by the command line when it works on a local data
    /// directory without a server.
    pub fn local() -> Self {
        Principal {
            token: String::new(),
            auditor: AuditorIdentity {
                id: "local-operator".into(),
                display_name: "Local operator".into(),
                relationship: Relationship::Internal,
                party: Party::First,
            },
            permissions: Permission::ALL.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    #[serde(default = "default_listen")]
    pub listen: SocketAddr,
    /// Catalog document loaded at first start instead of the bundled one.
    #[serde(default)]
    pub catalog: Option<PathBuf>,
    #[serde(default = "default_max_batch")]
    pub max_batch: usize,
    /// fsync every committed batch and event.
    #[serde(default = "default_sync")]
    pub sync: bool,
    #[serde(default)]
    pub scoring: ScoringWeights,
    #[serde(default = "default_principals")]
    pub principals: Vec<Principal>,
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("auditbox-data")
}

fn default_listen() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 8080))
}

fn default_max_batch() -> usize {
    auditbox_core::ingest::DEFAULT_MAX_BATCH
}

fn default_sync() -> bool {
    true
}

/// Development principals: an internal operator with every permission and an
/// external auditor who may query and report.
pub fn default_principals() -> Vec<Principal> {
    let operator = Principal { token: "operator-token".into(), ..Principal::local() };
    let auditor = Principal {
        token: "auditor-token".into(),
        auditor: AuditorIdentity {
            id: "external-auditor".into(),
            display_name: "External auditor".into(),
            relationship: Relationship::External,
            party: Party::Third,
        },
        permissions: [Permission::Query, Permission::Report].into(),
    };
    vec![operator, auditor]
}

impl Default for Config {
    fn default() -> Self {
        Config {
            data_dir: default_data_dir(),
            listen: default_listen(),
            catalog: None,
            max_batch: default_max_batch(),
            sync: default_sync(),
            scoring: ScoringWeights::default(),
            principals: default_principals(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: Config = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_owned(), source })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_batch == 0 {
            return Err(ConfigError::Invalid("max_batch must be at least 1".into()));
        }
        let w = &self.scoring;
        if [w.goal, w.component, w.phase, w.threshold].iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(ConfigError::Invalid("scoring weights must be finite and non-negative".into()));
        }
        if (w.goal + w.component + w.phase - 1.0).abs() > 1e-9 {
            return Err(ConfigError::Invalid("scoring weights must sum to 1".into()));
        }
        let mut tokens = BTreeSet::new();
        let mut ids = BTreeSet::new();
        for p in &self.principals {
            if p.token.is_empty() {
                return Err(ConfigError::Invalid(format!("principal {:?} has an empty token", p.auditor.id)));
            }
            if p.auditor.id.is_empty() {
                return Err(ConfigError::Invalid("auditor id must be non-empty".into()));
            }
            if !tokens.insert(&p.token) {
                return Err(ConfigError::Invalid(format!("token of {:?} is not unique", p.auditor.id)));
            }
            if !ids.insert(&p.auditor.id) {
                return Err(ConfigError::Invalid(format!("auditor id {:?} is not unique", p.auditor.id)));
            }
            if p.auditor.is_external() {
                for forbidden in [Permission::Ingest, Permission::RegisterBinding] {
                    if p.has(forbidden) {
                        return Err(ConfigError::Invalid(format!(
                            "external auditor {:?} may not hold {}",
                            p.auditor.id,
                            forbidden.as_str()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn principal(&self, token: &str) -> Option<&Principal> {
        self.principals.iter().find(|p| p.token == token)
    }
}
