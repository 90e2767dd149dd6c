use std::fs;
use std::io::{Read, Write};
use std::os::unix::fs::PermissionsExt;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::OnceLock;
use std::thread;
use std::time::{Duration, Instant};

use walkdir::WalkDir;

use super::{normalize_guest, truncate_output, MountMode, Network, RunResult, SandboxBackend, SandboxError, SandboxHandle, SandboxSpec};
use crate::tree::{self, FsState, Parallelism};

const SAFE_PATH: &str = "/usr/local/sbin:/usr/local/bin:/usr/sbin:/usr/bin:/sbin:/bin";

/// Restricted child processes in scratch directories.
#[derive(Clone, Debug)]
pub struct ProcessBackend {
    scratch_parent: PathBuf,
}

impl ProcessBackend {
    pub fn new(scratch_parent: impl Into<PathBuf>) -> Self {
        ProcessBackend { scratch_parent: scratch_parent.into() }
    }

    /// Scratch roots under the system temp directory.
    pub fn in_temp() -> Self {
        Self::new(std::env::temp_dir())
    }

    pub fn scratch_parent(&self) -> &Path {
        &self.scratch_parent
    }
}

/// How network denial can be enforced on this host, probed once.
fn netns_prefix() -> Option<&'static [&'static str]> {
    static PROBE: OnceLock<Option<&'static [&'static str]>> = OnceLock::new();
    *PROBE.get_or_init(|| {
        let candidates: [&'static [&'static str]; 2] = [&["unshare", "-n", "--"], &["unshare", "-rn", "--"]];
        candidates.into_iter().find(|prefix| {
            Command::new(prefix[0])
                .args(&prefix[1..])
                .arg("true")
                .stdin(Stdio::null())
                .stdout(Stdio::null())
                .stderr(Stdio::null())
                .status()
                .is_ok_and(|s| s.success())
        })
    })
}

struct MountState {
    guest: PathBuf,
    host: PathBuf,
    mode: MountMode,
    digest: String,
}

struct ProcessHandle {
    root: Option<PathBuf>,
    spec: SandboxSpec,
    mounts: Vec<MountState>,
    /// State of the sandbox outside every mount, re-baselined after each run.
    outside: FsState,
}

impl SandboxBackend for ProcessBackend {
    fn name(&self) -> &str {
        "process"
    }

    fn provision(&self, spec: &SandboxSpec) -> Result<Box<dyn SandboxHandle>, SandboxError> {
        spec.validate()?;
        fs::create_dir_all(&self.scratch_parent)?;
        let root = tempfile::Builder::new().prefix("goex-sbx-").tempdir_in(&self.scratch_parent)?.keep();
        for d in ["fs", "tmp", "home"] {
            fs::create_dir_all(root.join(d))?;
        }
        let fs_root = root.join("fs");
        let mut mounts = Vec::new();
        let setup = (|| -> Result<(), SandboxError> {
            for m in &spec.mounts {
                let guest = normalize_guest(&m.guest)?;
                let target = fs_root.join(&guest);
                if m.host.is_dir() {
                    tree::copy_tree(&m.host, &target)?;
                } else {
                    fs::create_dir_all(target.parent().expect("guest has a parent"))?;
                    fs::copy(&m.host, &target)?;
                }
                if m.mode == MountMode::ReadOnly {
                    strip_write(&target)?;
                }
                let digest = mount_digest(&target)?;
                mounts.push(MountState { guest, host: m.host.clone(), mode: m.mode, digest });
            }
            fs::create_dir_all(fs_root.join(normalize_guest(&spec.workdir)?))?;
            Ok(())
        })();
        if let Err(e) = setup {
            let _ = remove_root(&root);
            return Err(e);
        }
        let mut handle = ProcessHandle { root: Some(root), spec: spec.clone(), mounts, outside: FsState::default() };
        handle.outside = handle.capture_outside()?;
        Ok(Box::new(handle))
    }
}

fn mount_digest(path: &Path) -> Result<String, SandboxError> {
    if path.is_dir() {
        Ok(tree::content_hash(path)?)
    } else {
        let bytes = fs::read(path)?;
        let mode = fs::metadata(path)?.permissions().mode();
        Ok(format!("{}:{:o}", hex::encode(<sha2::Sha256 as sha2::Digest>::digest(&bytes)), mode & 0o7777))
    }
}

/// Removes write bits below `path`. Only effective for non-root callers;
/// the post-run hash check is what detects writes either way. Permission
/// bits are part of the digest, so this runs before it is taken.
fn strip_write(path: &Path) -> std::io::Result<()> {
    for e in WalkDir::new(path).follow_links(false).into_iter().filter_map(Result::ok) {
        if e.file_type().is_symlink() {
            continue;
        }
        let mode = e.metadata()?.permissions().mode();
        fs::set_permissions(e.path(), fs::Permissions::from_mode(mode & !0o222))?;
    }
    Ok(())
}

fn restore_write(path: &Path) {
    for e in WalkDir::new(path).follow_links(false).into_iter().filter_map(Result::ok) {
        if e.file_type().is_dir() {
            if let Ok(m) = e.metadata() {
                let _ = fs::set_permissions(e.path(), fs::Permissions::from_mode(m.permissions().mode() | 0o700));
            }
        }
    }
}

fn remove_root(root: &Path) -> std::io::Result<()> {
    if !root.exists() {
        return Ok(());
    }
    restore_write(root);
    fs::remove_dir_all(root)
}

impl ProcessHandle {
    fn root(&self) -> Result<&Path, SandboxError> {
        self.root.as_deref().ok_or(SandboxError::InvalidHandle)
    }

    fn capture_outside(&self) -> Result<FsState, SandboxError> {
        let fs_root = self.root()?.join("fs");
        let mut state = FsState::capture_with(&fs_root, &[], Parallelism::default())?;
        state.entries.retain(|path, _| {
            let p = Path::new(path);
            !self.mounts.iter().any(|m| p.starts_with(&m.guest) || m.guest.starts_with(p))
        });
        Ok(state)
    }
}

impl SandboxHandle for ProcessHandle {
    fn run(&mut self, argv: &[String], stdin: &[u8]) -> Result<RunResult, SandboxError> {
        let root = self.root()?.to_path_buf();
        let (program, args) = argv.split_first().ok_or_else(|| SandboxError::InvalidSpec("empty argv".into()))?;
        let fs_root = root.join("fs");
        let cwd = fs_root.join(normalize_guest(&self.spec.workdir)?);

        let netns = match self.spec.network {
            Network::Deny => netns_prefix(),
            Network::AllowHosts(_) => None,
        };
        let mut cmd = match netns {
            Some(prefix) => {
                let mut c = Command::new(prefix[0]);
                c.args(&prefix[1..]).arg(program).args(args);
                c
            }
            None => {
                let mut c = Command::new(program);
                c.args(args);
                c
            }
        };
        cmd.current_dir(&cwd)
            .env_clear()
            .env("PATH", SAFE_PATH)
            .env("HOME", root.join("home"))
            .env("TMPDIR", root.join("tmp"))
            .env("GOEX_SANDBOX_ROOT", &fs_root)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .process_group(0);
        if self.spec.network == Network::Deny && netns.is_none() {
            // Best effort without a network namespace.
            for var in ["http_proxy", "https_proxy", "HTTP_PROXY", "HTTPS_PROXY", "ALL_PROXY"] {
                cmd.env(var, "http://127.0.0.1:9");
            }
        }
        for name in &self.spec.env_allowlist {
            if let Ok(v) = std::env::var(name) {
                cmd.env(name, v);
            }
        }

        let started = Instant::now();
        let mut child = cmd.spawn().map_err(|source| SandboxError::Spawn { program: program.clone(), source })?;
        let pgid = child.id() as i32;
        let mut child_stdin = child.stdin.take().expect("piped");
        let input = stdin.to_vec();
        let writer = thread::spawn(move || {
            let _ = child_stdin.write_all(&input);
        });
        let cap = self.spec.output_cap;
        let out_reader = spawn_capped_reader(child.stdout.take().expect("piped"), cap);
        let err_reader = spawn_capped_reader(child.stderr.take().expect("piped"), cap);

        let deadline = started + self.spec.timeout;
        let mut timed_out = false;
        let status = loop {
            if let Some(s) = child.try_wait()? {
                break s;
            }
            if Instant::now() >= deadline {
                timed_out = true;
                // SAFETY: signalling our own child's process group.
                unsafe {
                    libc::kill(-pgid, libc::SIGKILL);
                }
                break child.wait()?;
            }
            thread::sleep(Duration::from_millis(5));
        };
        // The group may still hold the pipes open after the leader exits.
        unsafe {
            libc::kill(-pgid, libc::SIGKILL);
        }
        let _ = writer.join();
        let stdout = out_reader.join().unwrap_or_default();
        let stderr = err_reader.join().unwrap_or_default();
        let wall_time_ms = started.elapsed().as_millis() as u64;
        let exit_status = status.code().unwrap_or_else(|| 128 + status.signal().unwrap_or(0));

        let mut violations = Vec::new();
        for m in &self.mounts {
            if m.mode == MountMode::ReadOnly {
                let target = fs_root.join(&m.guest);
                let now = if target.exists() { mount_digest(&target)? } else { String::from("<removed>") };
                if now != m.digest {
                    violations.push(format!("write through read-only mount {}", m.guest.display()));
                }
            }
        }
        let outside = self.capture_outside()?;
        let changed = self.outside.diff(&outside);
        if !changed.is_empty() {
            violations.push(format!("write outside read-write mounts: {}", changed.join(", ")));
        }
        self.outside = outside;

        Ok(RunResult {
            exit_status: if timed_out && exit_status == 0 { 124 } else { exit_status },
            stdout,
            stderr,
            timed_out,
            wall_time_ms,
            violations,
            network_enforced: netns.is_some(),
        })
    }

    fn host_path(&self, guest: &Path) -> Result<PathBuf, SandboxError> {
        Ok(self.root()?.join("fs").join(normalize_guest(guest)?))
    }

    fn publish(&mut self) -> Result<(), SandboxError> {
        let fs_root = self.root()?.join("fs");
        for m in self.mounts.iter_mut().filter(|m| m.mode == MountMode::ReadWrite) {
            let copy = fs_root.join(&m.guest);
            if m.host.is_dir() {
                tree::mirror_tree(&copy, &m.host)?;
            } else {
                fs::copy(&copy, &m.host)?;
            }
            m.digest = mount_digest(&copy)?;
        }
        Ok(())
    }

    fn teardown(&mut self) -> Result<(), SandboxError> {
        if let Some(root) = self.root.take() {
            if let Err(e) = remove_root(&root) {
                log::warn!("sandbox teardown of {} incomplete: {e}", root.display());
            }
        }
        Ok(())
    }
}

impl Drop for ProcessHandle {
    fn drop(&mut self) {
        let _ = self.teardown();
    }
}

fn spawn_capped_reader(mut stream: impl Read + Send + 'static, cap: usize) -> thread::JoinHandle<Vec<u8>> {
    thread::spawn(move || {
        let mut kept = Vec::new();
        let mut total = 0usize;
        let mut buf = [0u8; 8192];
        loop {
            match stream.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    total += n;
                    if kept.len() < cap {
                        let room = cap - kept.len();
                        kept.extend_from_slice(&buf[..n.min(room)]);
                    }
                }
            }
        }
        truncate_output(kept, total, cap)
    })
}
