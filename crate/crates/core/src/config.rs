//! Operator configuration, read from a TOML file. Relative paths resolve
//! against the file's directory.
//!
//! ```toml
//! state_dir = ".goex"
//!
//! [fs]
//! root = "workspace"
//!
//! [db.connections.main]
//! path = "app.sqlite"
//!
//! [rest.base_urls]
//! slack = "https://slack.com/api"
//!
//! [generator]
//! backend = "mock"
//! mock_fixture = "mock.jsonl"
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::handlers::db::ConnectionConfig;
use crate::handlers::fs::DEFAULT_LFS_THRESHOLD;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Journal, vault, registry and policy files live here unless
    /// overridden below.
    pub state_dir: PathBuf,
    pub journal: Option<PathBuf>,
    pub vault: Option<PathBuf>,
    pub registry: Option<PathBuf>,
    pub policy: Option<PathBuf>,
    /// JSON list of function declarations for function-calling mode.
    pub functions: Option<PathBuf>,
    pub fs: FsConfig,
    pub db: DbConfig,
    pub rest: RestSection,
    pub generator: GeneratorConfig,
    pub sandbox: SandboxConfig,
    pub runtime: RuntimeConfig,
    pub server: ServerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FsConfig {
    pub root: Option<PathBuf>,
    /// Snapshot repository; must be outside `root`.
    pub state_dir: Option<PathBuf>,
    pub lfs_threshold_bytes: u64,
    pub timeout_secs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DbConfig {
    pub connections: BTreeMap<String, ConnectionConfig>,
    pub hold_timeout_secs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestSection {
    pub base_urls: BTreeMap<String, String>,
    pub hosts: BTreeMap<String, String>,
    pub timeout_secs: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorBackend {
    None,
    Mock,
    Remote,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub backend: GeneratorBackend,
    pub mock_fixture: Option<PathBuf>,
    pub base_url: Option<String>,
    pub model: String,
    /// Environment variable holding the endpoint's bearer token.
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SandboxKind {
    Process,
    Container,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SandboxConfig {
    pub backend: SandboxKind,
    /// Container CLI, e.g. `docker` or `podman`.
    pub program: String,
    pub image: String,
    pub scratch_dir: Option<PathBuf>,
    pub rev_test_timeout_secs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeConfig {
    pub guaranteed_undo_only: bool,
    /// Auto-undo Executed transactions older than this. Off by default.
    pub auto_undo_ttl_secs: Option<u64>,
    pub rev_test: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub listen: String,
    /// Environment variable holding the operator token.
    pub token_env: String,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            state_dir: PathBuf::from(".goex"),
            journal: None,
            vault: None,
            registry: None,
            policy: None,
            functions: None,
            fs: FsConfig::default(),
            db: DbConfig::default(),
            rest: RestSection::default(),
            generator: GeneratorConfig::default(),
            sandbox: SandboxConfig::default(),
            runtime: RuntimeConfig::default(),
            server: ServerConfig::default(),
        }
    }
}

impl Default for FsConfig {
    fn default() -> Self {
        FsConfig { root: None, state_dir: None, lfs_threshold_bytes: DEFAULT_LFS_THRESHOLD, timeout_secs: 60 }
    }
}

impl Default for DbConfig {
    fn default() -> Self {
        DbConfig { connections: BTreeMap::new(), hold_timeout_secs: crate::handlers::db::DEFAULT_HOLD_TIMEOUT.as_secs() }
    }
}

impl Default for RestSection {
    fn default() -> Self {
        RestSection { base_urls: BTreeMap::new(), hosts: BTreeMap::new(), timeout_secs: 30 }
    }
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            backend: GeneratorBackend::None,
            mock_fixture: None,
            base_url: None,
            model: "default".into(),
            api_key_env: Some("GOEX_GENERATOR_API_KEY".into()),
            timeout_secs: 120,
        }
    }
}

impl Default for SandboxConfig {
    fn default() -> Self {
        SandboxConfig {
            backend: SandboxKind::Process,
            program: "docker".into(),
            image: "debian:stable-slim".into(),
            scratch_dir: None,
            rev_test_timeout_secs: 30,
        }
    }
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig { guaranteed_undo_only: false, auto_undo_ttl_secs: None, rev_test: true }
    }
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig { listen: "127.0.0.1:8420".into(), token_env: "GOEX_OPERATOR_TOKEN".into() }
    }
}

impl Config {
    pub fn load(path: impl AsRef<Path>) -> Result<Config, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let mut cfg: Config = toml::from_str(&text).map_err(|source| ConfigError::Parse { path: path.into(), source })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.rebase(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Makes every relative path absolute against `base`.
    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.state_dir);
        for p in [
            &mut self.journal,
            &mut self.vault,
            &mut self.registry,
            &mut self.policy,
            &mut self.functions,
            &mut self.fs.root,
            &mut self.fs.state_dir,
            &mut self.generator.mock_fixture,
            &mut self.sandbox.scratch_dir,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        for c in self.db.connections.values_mut() {
            fix(&mut c.path);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.generator.backend == GeneratorBackend::Mock && self.generator.mock_fixture.is_none() {
            return Err(ConfigError::Invalid("generator.backend = \"mock\" needs generator.mock_fixture".into()));
        }
        if self.generator.backend == GeneratorBackend::Remote && self.generator.base_url.is_none() {
            return Err(ConfigError::Invalid("generator.backend = \"remote\" needs generator.base_url".into()));
        }
        if let (Some(root), Some(state)) = (&self.fs.root, &self.fs.state_dir) {
            if state.starts_with(root) {
                return Err(ConfigError::Invalid("fs.state_dir must be outside fs.root".into()));
            }
        }
        Ok(())
    }

    pub fn journal_path(&self) -> PathBuf {
        self.journal.clone().unwrap_or_else(|| self.state_dir.join("journal.jsonl"))
    }

    pub fn vault_path(&self) -> PathBuf {
        self.vault.clone().unwrap_or_else(|| self.state_dir.join("vault.jsonl"))
    }

    pub fn vault_audit_path(&self) -> PathBuf {
        self.state_dir.join("vault-audit.jsonl")
    }

    pub fn registry_path(&self) -> PathBuf {
        self.registry.clone().unwrap_or_else(|| self.state_dir.join("registry.jsonl"))
    }

    pub fn policy_path(&self) -> PathBuf {
        self.policy.clone().unwrap_or_else(|| self.state_dir.join("policy.jsonl"))
    }

    pub fn fs_state_dir(&self) -> PathBuf {
        self.fs.state_dir.clone().unwrap_or_else(|| self.state_dir.join("fs"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("goex.toml");
        std::fs::write(
            &p,
            "[fs]\nroot = \"work\"\nlfs_threshold_bytes = 1048576\n[db.connections.main]\npath = \"app.sqlite\"\n[rest.base_urls]\nslack = \"http://127.0.0.1:1\"\n",
        )
        .unwrap();
        let c = Config::load(&p).unwrap();
        assert_eq!(c.fs.root.as_deref(), Some(dir.path().join("work").as_path()));
        assert_eq!(c.db.connections["main"].path, dir.path().join("app.sqlite"));
        assert_eq!(c.fs.lfs_threshold_bytes, 1 << 20);
        assert_eq!(c.journal_path(), dir.path().join(".goex/journal.jsonl"));
        assert_eq!(Config::default().fs.lfs_threshold_bytes, 200 * 1024 * 1024);
        assert_eq!(Config::default().runtime.auto_undo_ttl_secs, None);
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("goex.toml");
        std::fs::write(&p, "colour = 1\n").unwrap();
        assert!(matches!(Config::load(&p), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn mock_needs_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("goex.toml");
        std::fs::write(&p, "[generator]\nbackend = \"mock\"\n").unwrap();
        assert!(matches!(Config::load(&p), Err(ConfigError::Invalid(_))));
    }
}
