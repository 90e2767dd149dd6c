use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use super::process::ProcessBackend;
use super::{normalize_guest, MountMode, Network, RunResult, SandboxBackend, SandboxError, SandboxHandle, SandboxSpec};

/// OCI container runtime (docker, podman) driven through its CLI.
#[derive(Clone, Debug)]
pub struct ContainerBackend {
    program: String,
    image: String,
    scratch: ProcessBackend,
}

impl ContainerBackend {
    pub fn new(program: &str, image: &str, scratch_parent: impl Into<PathBuf>) -> Self {
        ContainerBackend { program: program.into(), image: image.into(), scratch: ProcessBackend::new(scratch_parent) }
    }

    pub fn available(&self) -> Result<(), SandboxError> {
        let out = Command::new(&self.program)
            .arg("version")
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status();
        match out {
            Ok(s) if s.success() => Ok(()),
            Ok(s) => Err(self.unavailable(format!("`{} version` exited with {s}", self.program))),
            Err(e) => Err(self.unavailable(e.to_string())),
        }
    }

    fn unavailable(&self, reason: String) -> SandboxError {
        SandboxError::BackendUnavailable { backend: format!("container ({})", self.program), reason }
    }

    /// The `run` invocation for `argv` under `spec`, with the scratch
    /// directory mounted at `/scratch`.
    pub fn command_line(&self, spec: &SandboxSpec, scratch: &Path, argv: &[String]) -> Result<Vec<String>, SandboxError> {
        let mut cmd = vec![self.program.clone(), "run".into(), "--rm".into(), "-i".into()];
        match &spec.network {
            Network::Deny => cmd.extend(["--network".into(), "none".into()]),
            Network::AllowHosts(hosts) => {
                for h in hosts {
                    cmd.extend(["--add-host".into(), format!("{h}:host-gateway")]);
                }
            }
        }
        cmd.extend(["-v".into(), format!("{}:/scratch:rw", scratch.display())]);
        for m in &spec.mounts {
            let guest = normalize_guest(&m.guest)?;
            let mode = match m.mode {
                MountMode::ReadOnly => "ro",
                MountMode::ReadWrite => "rw",
            };
            cmd.extend(["-v".into(), format!("{}:/{}:{mode}", m.host.display(), guest.display())]);
        }
        for name in &spec.env_allowlist {
            if let Ok(v) = std::env::var(name) {
                cmd.extend(["-e".into(), format!("{name}={v}")]);
            }
        }
        cmd.extend(["-w".into(), format!("/{}", normalize_guest(&spec.workdir)?.display())]);
        cmd.push(self.image.clone());
        cmd.extend(argv.iter().cloned());
        Ok(cmd)
    }
}

struct ContainerHandle {
    backend: ContainerBackend,
    spec: SandboxSpec,
    /// Runs the container CLI itself; its scratch root holds `/scratch`.
    driver: Box<dyn SandboxHandle>,
    scratch: PathBuf,
}

impl SandboxBackend for ContainerBackend {
    fn name(&self) -> &str {
        "container"
    }

    fn provision(&self, spec: &SandboxSpec) -> Result<Box<dyn SandboxHandle>, SandboxError> {
        spec.validate()?;
        self.available()?;
        let driver_spec = SandboxSpec { mounts: Vec::new(), network: Network::AllowHosts(Vec::new()), ..spec.clone() };
        let driver = self.scratch.provision(&driver_spec)?;
        let scratch = driver.host_path(Path::new("scratch"))?;
        fs::create_dir_all(&scratch)?;
        Ok(Box::new(ContainerHandle { backend: self.clone(), spec: spec.clone(), driver, scratch }))
    }
}

impl SandboxHandle for ContainerHandle {
    fn run(&mut self, argv: &[String], stdin: &[u8]) -> Result<RunResult, SandboxError> {
        let cmd = self.backend.command_line(&self.spec, &self.scratch, argv)?;
        let mut r = self.driver.run(&cmd, stdin)?;
        r.network_enforced = self.spec.network == Network::Deny;
        // The driver sees only its own scratch; container writes land in
        // bind mounts, which the runtime enforces.
        r.violations.clear();
        Ok(r)
    }

    fn host_path(&self, guest: &Path) -> Result<PathBuf, SandboxError> {
        let g = normalize_guest(guest)?;
        for m in &self.spec.mounts {
            if let Ok(rest) = g.strip_prefix(normalize_guest(&m.guest)?) {
                return Ok(m.host.join(rest));
            }
        }
        Ok(self.scratch.join(g))
    }

    fn publish(&mut self) -> Result<(), SandboxError> {
        Ok(())
    }

    fn teardown(&mut self) -> Result<(), SandboxError> {
        self.driver.teardown()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_line_maps_spec() {
        let host = tempfile::tempdir().unwrap();
        let b = ContainerBackend::new("docker", "alpine:3", "/tmp");
        let spec = SandboxSpec::default().mount(host.path(), "/data", MountMode::ReadOnly).workdir("/data");
        let cmd = b.command_line(&spec, Path::new("/tmp/s"), &["ls".into()]).unwrap();
        let joined = cmd.join(" ");
        assert!(joined.starts_with("docker run --rm -i --network none"));
        assert!(joined.contains(&format!("{}:/data:ro", host.path().display())));
        assert!(joined.ends_with("-w /data alpine:3 ls"));
    }

    #[test]
    fn missing_runtime_is_named() {
        let b = ContainerBackend::new("/nonexistent/container-runtime", "img", std::env::temp_dir());
        match b.provision(&SandboxSpec::default()) {
            Err(SandboxError::BackendUnavailable { backend, .. }) => assert!(backend.contains("container-runtime")),
            other => panic!("expected BackendUnavailable, got {:?}", other.err()),
        }
    }
}
