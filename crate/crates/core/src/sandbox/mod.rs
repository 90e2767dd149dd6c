//! Isolated execution boundary for handler and reversibility-test runs.
//!
//! A [`SandboxSpec`] names the host paths a run may see and how (read-only
//! or read-write), the network posture, the environment variables that
//! pass through, and a wall-clock timeout. Two backends implement it:
//!
//! * [`ProcessBackend`]: a scrubbed child process in a scratch directory.
//!   Mounts are copies; read-only is verified by content hash after each
//!   run and read-write copies are published back only on request. Network
//!   denial uses a private network namespace when the host allows one.
//!   Weaker than a container, but hermetic and always available.
//! * [`ContainerBackend`]: an OCI container runtime driven through its CLI,
//!   with real bind mounts and `--network none`.

mod container;
mod process;

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use container::ContainerBackend;
pub use process::ProcessBackend;

/// Captured stream cap.
pub const DEFAULT_OUTPUT_CAP: usize = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MountMode {
    ReadOnly,
    ReadWrite,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mount {
    pub host: PathBuf,
    /// Location inside the sandbox, relative to its root.
    pub guest: PathBuf,
    pub mode: MountMode,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "hosts", rename_all = "snake_case")]
pub enum Network {
    Deny,
    AllowHosts(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SandboxSpec {
    pub mounts: Vec<Mount>,
    pub network: Network,
    pub env_allowlist: Vec<String>,
    pub timeout: Duration,
    /// Working directory, relative to the sandbox root.
    pub workdir: PathBuf,
    pub output_cap: usize,
}

impl Default for SandboxSpec {
    fn default() -> Self {
        SandboxSpec {
            mounts: Vec::new(),
            network: Network::Deny,
            env_allowlist: Vec::new(),
            timeout: Duration::from_secs(30),
            workdir: PathBuf::from("."),
            output_cap: DEFAULT_OUTPUT_CAP,
        }
    }
}

impl SandboxSpec {
    pub fn mount(mut self, host: impl Into<PathBuf>, guest: impl Into<PathBuf>, mode: MountMode) -> Self {
        self.mounts.push(Mount { host: host.into(), guest: guest.into(), mode });
        self
    }

    pub fn workdir(mut self, guest: impl Into<PathBuf>) -> Self {
        self.workdir = guest.into();
        self
    }

    pub fn timeout(mut self, t: Duration) -> Self {
        self.timeout = t;
        self
    }

    pub fn allow_env(mut self, name: &str) -> Self {
        self.env_allowlist.push(name.into());
        self
    }

    /// Rules every backend enforces before provisioning.
    pub fn validate(&self) -> Result<(), SandboxError> {
        let mut guests: Vec<PathBuf> = Vec::new();
        for m in &self.mounts {
            if !m.host.exists() {
                return Err(SandboxError::MissingPath(m.host.clone()));
            }
            let g = normalize_guest(&m.guest)?;
            if g.as_os_str().is_empty() {
                return Err(SandboxError::InvalidSpec("a mount cannot cover the sandbox root".into()));
            }
            if guests.iter().any(|o| o.starts_with(&g) || g.starts_with(o)) {
                return Err(SandboxError::InvalidSpec(format!("mount {} overlaps another mount", g.display())));
            }
            guests.push(g);
        }
        normalize_guest(&self.workdir)?;
        Ok(())
    }

    /// Reversibility-test specs must not write through to real data: at
    /// most one read-write mount, and it may not be any of `protected`.
    pub fn validate_for_test(&self, protected: &[&Path]) -> Result<(), SandboxError> {
        let rw: Vec<&Mount> = self.mounts.iter().filter(|m| m.mode == MountMode::ReadWrite).collect();
        if rw.len() > 1 {
            return Err(SandboxError::InvalidSpec("at most one read-write scratch mount".into()));
        }
        for m in rw {
            let host = m.host.canonicalize().unwrap_or_else(|_| m.host.clone());
            if protected.iter().any(|p| host.starts_with(p.canonicalize().unwrap_or_else(|_| p.to_path_buf()))) {
                return Err(SandboxError::InvalidSpec(format!("{} is user data and cannot be mounted read-write", m.host.display())));
            }
        }
        Ok(())
    }
}

/// Strips a leading `/` and `.` components; rejects `..`.
pub(crate) fn normalize_guest(p: &Path) -> Result<PathBuf, SandboxError> {
    let mut out = PathBuf::new();
    for c in p.components() {
        match c {
            std::path::Component::RootDir | std::path::Component::CurDir => {}
            std::path::Component::Normal(n) => out.push(n),
            _ => return Err(SandboxError::InvalidSpec(format!("guest path {} escapes the sandbox", p.display()))),
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunResult {
    pub exit_status: i32,
    #[serde(with = "crate::serde_bytes")]
    pub stdout: Vec<u8>,
    #[serde(with = "crate::serde_bytes")]
    pub stderr: Vec<u8>,
    pub timed_out: bool,
    pub wall_time_ms: u64,
    /// Confinement breaches detected after the run (writes through a
    /// read-only mount, writes outside every read-write mount).
    pub violations: Vec<String>,
    /// Whether network denial was enforced by the OS for this run.
    pub network_enforced: bool,
}

impl RunResult {
    pub fn success(&self) -> bool {
        self.exit_status == 0 && !self.timed_out && self.violations.is_empty()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SandboxError {
    #[error("host path {0} does not exist")]
    MissingPath(PathBuf),
    #[error("invalid sandbox spec: {0}")]
    InvalidSpec(String),
    #[error("sandbox backend {backend} unavailable: {reason}")]
    BackendUnavailable { backend: String, reason: String },
    #[error("sandbox handle has been torn down")]
    InvalidHandle,
    #[error("failed to spawn {program}: {source}")]
    Spawn {
        program: String,
        #[source]
        source: std::io::Error,
    },
    #[error("sandbox io: {0}")]
    Io(#[from] std::io::Error),
}

pub trait SandboxBackend: Send + Sync {
    fn name(&self) -> &str;
    fn provision(&self, spec: &SandboxSpec) -> Result<Box<dyn SandboxHandle>, SandboxError>;
}

pub trait SandboxHandle: Send {
    fn run(&mut self, argv: &[String], stdin: &[u8]) -> Result<RunResult, SandboxError>;

    /// Host-side location of a guest path, for inspection.
    fn host_path(&self, guest: &Path) -> Result<PathBuf, SandboxError>;

    /// Makes read-write mount contents visible on the host. A no-op for
    /// backends with real bind mounts.
    fn publish(&mut self) -> Result<(), SandboxError>;

    /// Removes the scratch root. Idempotent.
    fn teardown(&mut self) -> Result<(), SandboxError>;
}

/// Shell invocation helper.
pub fn sh(script: &str) -> Vec<String> {
    vec!["/bin/sh".into(), "-c".into(), script.into()]
}

pub(crate) fn truncate_output(mut buf: Vec<u8>, total: usize, cap: usize) -> Vec<u8> {
    if total > cap {
        buf.truncate(cap);
        buf.extend_from_slice(format!("\n[output truncated: {total} bytes, cap {cap}]\n").as_bytes());
    }
    buf
}
