//! Filesystem actions confined to a managed root.
//!
//! Versioning snapshots the root with git before each action. The git
//! directory lives in a state directory outside the root, so the user's
//! tree never gains a `.git`. Git does not record empty directories or
//! full mode bits, so every snapshot also stores a manifest of the tree
//! that restore re-applies and verifies against.

use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Component, Path, PathBuf};
use std::process::Command;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::action::FsAction;
use crate::ids::TxnId;
use crate::sandbox::{sh, MountMode, RunResult, SandboxBackend, SandboxError, SandboxSpec};
use crate::tree::{self, DirectoryTree, EntryKind, FsState};
use crate::txn::ExecutionOutcome;

pub const DEFAULT_LFS_THRESHOLD: u64 = 200 * 1024 * 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LargeFileMode {
    /// The git-lfs extension, tracking everything through the filter.
    Lfs,
    /// Plain git tuned for big blobs, used when git-lfs is not installed.
    NativeBigFiles,
}

#[derive(Debug, thiserror::Error)]
pub enum FsError {
    #[error("version control unavailable: {0}")]
    VcsUnavailable(String),
    #[error("git {args}: {stderr}")]
    Git { args: String, stderr: String },
    #[error("scope {0:?} is outside the managed root")]
    ScopeEscape(String),
    #[error("scope {0:?} does not exist")]
    ScopeMissing(String),
    #[error("no snapshot for action {index} of {txn}")]
    NoSnapshot { txn: TxnId, index: usize },
    #[error("restore did not reproduce the snapshot: {0}")]
    RestoreMismatch(String),
    /// The script ran and failed or breached confinement. Carries the outcome.
    #[error("{}", .0.structured_summary)]
    Failed(ExecutionOutcome),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    commit: String,
    manifest: FsState,
}

pub struct FsManager {
    root: PathBuf,
    state_dir: PathBuf,
    backend: Arc<dyn SandboxBackend>,
    threshold: u64,
    timeout: Duration,
    /// Snapshots are root-global, so one execution at a time.
    lock: Mutex<()>,
}

impl FsManager {
    pub fn new(root: impl Into<PathBuf>, state_dir: impl Into<PathBuf>, backend: Arc<dyn SandboxBackend>) -> Result<Self, FsError> {
        let root: PathBuf = root.into();
        let root = root.canonicalize().map_err(|_| FsError::ScopeMissing(root.display().to_string()))?;
        let state_dir = state_dir.into();
        if state_dir.starts_with(&root) {
            return Err(FsError::ScopeEscape(format!("state directory {} must be outside the managed root", state_dir.display())));
        }
        fs::create_dir_all(&state_dir)?;
        Ok(FsManager {
            root,
            state_dir,
            backend,
            threshold: DEFAULT_LFS_THRESHOLD,
            timeout: Duration::from_secs(30),
            lock: Mutex::new(()),
        })
    }

    pub fn with_threshold(mut self, bytes: u64) -> Self {
        self.threshold = bytes;
        self
    }

    pub fn with_timeout(mut self, t: Duration) -> Self {
        self.timeout = t;
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn threshold(&self) -> u64 {
        self.threshold
    }

    pub fn walk(&self) -> std::io::Result<DirectoryTree> {
        tree::walk_tree(&self.root)
    }

    /// Host path of an action scope, confined to the root.
    pub fn resolve_scope(&self, scope: &str) -> Result<PathBuf, FsError> {
        let mut rel = PathBuf::new();
        for c in Path::new(scope).components() {
            match c {
                Component::CurDir => {}
                Component::Normal(n) => rel.push(n),
                _ => return Err(FsError::ScopeEscape(scope.into())),
            }
        }
        let path = self.root.join(&rel);
        let real = path.canonicalize().map_err(|_| FsError::ScopeMissing(scope.into()))?;
        if !real.starts_with(&self.root) {
            return Err(FsError::ScopeEscape(scope.into()));
        }
        if !real.is_dir() {
            return Err(FsError::ScopeMissing(scope.into()));
        }
        Ok(real)
    }

    fn git_dir(&self) -> PathBuf {
        self.state_dir.join("repo.git")
    }

    fn git(&self, args: &[&str]) -> Result<String, FsError> {
        let out = Command::new("git")
            .arg("--git-dir")
            .arg(self.git_dir())
            .arg("--work-tree")
            .arg(&self.root)
            .args(["-c", "user.name=goex", "-c", "user.email=goex@localhost", "-c", "commit.gpgsign=false"])
            .args(args)
            .env_remove("GIT_DIR")
            .env_remove("GIT_WORK_TREE")
            .env_remove("GIT_INDEX_FILE")
            .output()
            .map_err(|e| FsError::VcsUnavailable(format!("git: {e}")))?;
        if !out.status.success() {
            return Err(FsError::Git { args: args.join(" "), stderr: String::from_utf8_lossy(&out.stderr).trim().to_owned() });
        }
        Ok(String::from_utf8_lossy(&out.stdout).trim().to_owned())
    }

    fn ensure_repo(&self) -> Result<(), FsError> {
        if self.git_dir().join("HEAD").exists() {
            return Ok(());
        }
        Command::new("git")
            .arg("--version")
            .output()
            .ok()
            .filter(|o| o.status.success())
            .ok_or_else(|| FsError::VcsUnavailable("git not found on PATH".into()))?;
        self.git(&["init", "-q"])?;
        self.git(&["config", "core.fileMode", "true"])?;
        self.git(&["config", "gc.auto", "0"])?;
        Ok(())
    }

    /// Large-file storage mode, once initialized.
    pub fn large_file_mode(&self) -> Option<LargeFileMode> {
        let text = fs::read_to_string(self.state_dir.join("large-files")).ok()?;
        serde_json::from_str(&text).ok()
    }

    fn init_large_files(&self) -> Result<LargeFileMode, FsError> {
        if let Some(m) = self.large_file_mode() {
            return Ok(m);
        }
        let lfs = Command::new("git").args(["lfs", "version"]).output().is_ok_and(|o| o.status.success());
        let mode = if lfs {
            self.git(&["lfs", "install", "--local"])?;
            // Attributes live in the git dir so the user's tree is untouched.
            let info = self.git_dir().join("info");
            fs::create_dir_all(&info)?;
            fs::write(info.join("attributes"), "* filter=lfs diff=lfs merge=lfs -text\n")?;
            LargeFileMode::Lfs
        } else {
            self.git(&["config", "core.bigFileThreshold", "1m"])?;
            self.git(&["config", "core.compression", "0"])?;
            self.git(&["config", "pack.window", "0"])?;
            LargeFileMode::NativeBigFiles
        };
        fs::write(self.state_dir.join("large-files"), serde_json::to_string(&mode).expect("mode serializes"))?;
        log::info!("large-file storage initialized for {} ({mode:?})", self.root.display());
        Ok(mode)
    }

    fn snapshot_path(&self, txn: &TxnId, index: usize) -> PathBuf {
        self.state_dir.join("snapshots").join(format!("{txn}-{index}.json"))
    }

    /// Records the current root as the pre-action state of (`txn`, `index`).
    pub fn snapshot(&self, txn: &TxnId, index: usize) -> Result<String, FsError> {
        self.ensure_repo()?;
        let walk = self.walk()?;
        if walk.total_bytes >= self.threshold {
            self.init_large_files()?;
        }
        self.git(&["add", "-f", "-A", "."])?;
        self.git(&["commit", "-q", "--allow-empty", "--no-verify", "-m", &format!("snapshot {txn} action {index}")])?;
        let commit = self.git(&["rev-parse", "HEAD"])?;
        self.git(&["update-ref", &format!("refs/goex/{txn}/{index}"), &commit])?;
        let manifest = FsState::capture(&self.root)?;
        let snap = Snapshot { commit: commit.clone(), manifest };
        let path = self.snapshot_path(txn, index);
        fs::create_dir_all(path.parent().expect("has parent"))?;
        fs::write(&path, serde_json::to_vec(&snap).expect("snapshot serializes"))?;
        Ok(commit)
    }

    /// Puts the root back exactly as it was before action `index` of `txn`.
    pub fn restore(&self, txn: &TxnId, index: usize) -> Result<ExecutionOutcome, FsError> {
        let _g = self.lock.lock().unwrap_or_else(|p| p.into_inner());
        self.restore_locked(txn, index)
    }

    fn restore_locked(&self, txn: &TxnId, index: usize) -> Result<ExecutionOutcome, FsError> {
        let started = Instant::now();
        let bytes = fs::read(self.snapshot_path(txn, index)).map_err(|_| FsError::NoSnapshot { txn: txn.clone(), index })?;
        let snap: Snapshot = serde_json::from_slice(&bytes).map_err(|e| FsError::RestoreMismatch(format!("corrupt snapshot record: {e}")))?;
        let before = FsState::capture(&self.root)?;
        make_dirs_writable(&self.root);
        self.git(&["reset", "-q", "--hard", &snap.commit])?;
        self.git(&["clean", "-q", "-ffdx"])?;
        apply_manifest(&self.root, &snap.manifest)?;
        let after = FsState::capture(&self.root)?;
        let residue = snap.manifest.diff(&after);
        if !residue.is_empty() {
            return Err(FsError::RestoreMismatch(residue.join(", ")));
        }
        let changed = before.diff(&after);
        Ok(ExecutionOutcome {
            exit_status: 0,
            stdout: Vec::new(),
            stderr: Vec::new(),
            structured_summary: format!(
                "restored snapshot {} for action {index}; {} path(s) reverted{}",
                &snap.commit[..12],
                changed.len(),
                list_suffix(&changed)
            ),
            duration_ms: started.elapsed().as_millis() as u64,
        })
    }

    /// Finalizes a transaction's snapshots; they stay as history.
    pub fn commit(&self, txn: &TxnId) -> Result<(), FsError> {
        if self.git_dir().join("HEAD").exists() {
            if let Ok(head) = self.git(&["rev-parse", "HEAD"]) {
                self.git(&["update-ref", &format!("refs/goex/committed/{txn}"), &head])?;
            }
        }
        Ok(())
    }

    /// Snapshot, run, and restore on failure.
    pub fn execute_versioning(&self, txn: &TxnId, index: usize, action: &FsAction) -> Result<ExecutionOutcome, FsError> {
        let _g = self.lock.lock().unwrap_or_else(|p| p.into_inner());
        let scope = self.resolve_scope(&action.scope)?;
        self.snapshot(txn, index)?;
        match self.run_script(&scope, &action.scope, &action.script) {
            Ok(outcome) => Ok(outcome),
            Err(e) => {
                if let Err(r) = self.restore_locked(txn, index) {
                    log::error!("auto-restore after failed action {index} of {txn} failed: {r}");
                }
                Err(e)
            }
        }
    }

    /// Runs a script immediately; its undo is another script.
    pub fn execute_reversal(&self, action: &FsAction) -> Result<ExecutionOutcome, FsError> {
        let _g = self.lock.lock().unwrap_or_else(|p| p.into_inner());
        let scope = self.resolve_scope(&action.scope)?;
        self.run_script(&scope, &action.scope, &action.script)
    }

    /// Runs `script` in a sandbox that sees only the scope, read-write.
    /// Changes reach the host only if the run succeeded cleanly.
    fn run_script(&self, scope: &Path, scope_name: &str, script: &str) -> Result<ExecutionOutcome, FsError> {
        let started = Instant::now();
        let before = FsState::capture(&self.root)?;
        let spec = SandboxSpec::default().mount(scope, "scope", MountMode::ReadWrite).workdir("scope").timeout(self.timeout);
        let mut handle = self.backend.provision(&spec)?;
        let run = handle.run(&sh(script), b"");
        let result: Result<RunResult, FsError> = match run {
            Ok(r) if r.success() => handle.publish().map(|_| r).map_err(FsError::from),
            Ok(r) => Ok(r),
            Err(e) => Err(e.into()),
        };
        handle.teardown()?;
        let r = result?;
        let after = FsState::capture(&self.root)?;
        let changed = before.diff(&after);
        let walk = self.walk()?;
        let mut summary = format!(
            "exit {}{} in {} ms; scope {scope_name}; {} path(s) changed{}\ntree: {} entries, {} bytes\n{}",
            r.exit_status,
            if r.timed_out { " (timed out)" } else { "" },
            r.wall_time_ms,
            changed.len(),
            list_suffix(&changed),
            walk.entry_count,
            walk.total_bytes,
            walk.rendering
        );
        if !r.violations.is_empty() {
            summary = format!("confinement violation: {}; changes discarded\n{summary}", r.violations.join("; "));
        }
        let outcome = ExecutionOutcome {
            exit_status: if r.success() { 0 } else if r.exit_status == 0 { 126 } else { r.exit_status },
            stdout: r.stdout,
            stderr: r.stderr,
            structured_summary: summary,
            duration_ms: started.elapsed().as_millis() as u64,
        };
        if outcome.succeeded() {
            Ok(outcome)
        } else {
            Err(FsError::Failed(outcome))
        }
    }
}

fn list_suffix(paths: &[String]) -> String {
    if paths.is_empty() {
        return String::new();
    }
    let shown: Vec<&str> = paths.iter().take(20).map(String::as_str).collect();
    let more = if paths.len() > shown.len() { format!(" and {} more", paths.len() - shown.len()) } else { String::new() };
    format!(": {}{more}", shown.join(", "))
}

fn make_dirs_writable(root: &Path) {
    for e in WalkDir::new(root).follow_links(false).into_iter().filter_map(Result::ok) {
        if e.file_type().is_dir() {
            if let Ok(m) = e.metadata() {
                let mode = m.permissions().mode();
                if mode & 0o700 != 0o700 {
                    let _ = fs::set_permissions(e.path(), fs::Permissions::from_mode(mode | 0o700));
                }
            }
        }
    }
}

/// Re-creates directories git dropped and re-applies recorded modes,
/// deepest paths first so parents are adjusted last.
fn apply_manifest(root: &Path, manifest: &FsState) -> std::io::Result<()> {
    for (rel, entry) in &manifest.entries {
        if matches!(entry.kind, EntryKind::Dir) {
            fs::create_dir_all(root.join(rel))?;
        }
    }
    for (rel, entry) in manifest.entries.iter().rev() {
        if matches!(entry.kind, EntryKind::Symlink { .. }) {
            continue;
        }
        fs::set_permissions(root.join(rel), fs::Permissions::from_mode(entry.mode))?;
    }
    Ok(())
}
