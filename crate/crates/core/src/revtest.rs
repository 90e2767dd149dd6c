//! Empirical reversibility testing.
//!
//! A [`TestBed`] is materialized in a throwaway fixture, the action and its
//! undo run against it, and the state before and after is compared. The
//! verdict is a filter for the operator, not a proof.
//!
//! FS fixtures start as a copy of the action's scope, mounted read-write in
//! a sandbox next to a read-only mount of the original. DB fixtures are
//! fresh SQLite files built from the setup script alone, so their size
//! depends on the test bed and never on the real database.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::action::Kind;
use crate::generator::TestBed;
use crate::handlers::db::{Connector, RowState, SqliteConnector};
use crate::records::{self, RecordLog};
use crate::sandbox::{self, MountMode, SandboxBackend, SandboxHandle, SandboxSpec};
use crate::tree::{copy_tree, FsState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparator {
    NamesOnly,
    FullContent,
    RowMultiset,
}

impl Comparator {
    pub fn fits(self, kind: Kind) -> bool {
        match self {
            Comparator::NamesOnly | Comparator::FullContent => kind == Kind::Fs,
            Comparator::RowMultiset => kind == Kind::Db,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictResult {
    Reversible,
    NotReversible,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub result: VerdictResult,
    pub comparator_used: Comparator,
    pub diff_summary: String,
    pub fixture_log: String,
}

impl Verdict {
    fn inconclusive(comparator: Comparator, log: String) -> Self {
        Verdict { result: VerdictResult::Inconclusive, comparator_used: comparator, diff_summary: String::new(), fixture_log: log }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Capture {
    Fs(FsState),
    Db(RowState),
}

/// `Ok` when equal under `comparator`, else a diff summary.
///
/// Panics when the captures or the comparator belong to different fixture
/// types; callers check [`Comparator::fits`] first.
pub fn compare_state(before: &Capture, after: &Capture, comparator: Comparator) -> Result<(), String> {
    let diff = match (before, after, comparator) {
        (Capture::Fs(b), Capture::Fs(a), Comparator::NamesOnly) => {
            let (bn, an) = (b.names(), a.names());
            let mut d: Vec<String> = bn.iter().filter(|n| !an.contains(n)).map(|n| format!("missing {n}")).collect();
            d.extend(an.iter().filter(|n| !bn.contains(n)).map(|n| format!("extra {n}")));
            d
        }
        (Capture::Fs(b), Capture::Fs(a), Comparator::FullContent) => b.diff(a),
        (Capture::Db(b), Capture::Db(a), Comparator::RowMultiset) => b.diff(a),
        _ => panic!("compare_state: {comparator:?} cannot compare these captures"),
    };
    if diff.is_empty() {
        Ok(())
    } else {
        Err(diff.join("\n"))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("comparator {0:?} does not apply to {1} fixtures")]
    ComparatorMismatch(Comparator, Kind),
    #[error("REST actions have no local fixture")]
    Unsupported,
    #[error(transparent)]
    Sandbox(#[from] sandbox::SandboxError),
    #[error("fixture io: {0}")]
    Io(#[from] std::io::Error),
    #[error("fixture database: {0}")]
    Db(#[from] crate::handlers::db::DbError),
    #[error("setup failed: {0}")]
    Setup(String),
}

#[derive(Clone)]
pub struct FixtureEnv {
    pub backend: Arc<dyn SandboxBackend>,
    pub timeout: Duration,
    /// Real data that may never be mounted read-write in a fixture.
    pub protected: Vec<PathBuf>,
}

impl FixtureEnv {
    pub fn new(backend: Arc<dyn SandboxBackend>) -> Self {
        FixtureEnv { backend, timeout: Duration::from_secs(30), protected: Vec::new() }
    }
}

pub enum Fixture {
    Fs { _scratch: tempfile::TempDir, handle: Box<dyn SandboxHandle>, log: String },
    Db { dir: tempfile::TempDir, conn: SqliteConnector, log: String },
}

const WORK: &str = "work";

impl Fixture {
    pub fn log(&self) -> &str {
        match self {
            Fixture::Fs { log, .. } | Fixture::Db { log, .. } => log,
        }
    }

    fn log_mut(&mut self) -> &mut String {
        match self {
            Fixture::Fs { log, .. } | Fixture::Db { log, .. } => log,
        }
    }

    /// Host-side directory the FS fixture works in.
    pub fn work_dir(&self) -> Option<PathBuf> {
        match self {
            Fixture::Fs { handle, .. } => handle.host_path(Path::new(WORK)).ok(),
            Fixture::Db { .. } => None,
        }
    }

    /// On-disk size of the fixture's data.
    pub fn data_bytes(&self) -> u64 {
        match self {
            Fixture::Fs { .. } => self.work_dir().map(|d| crate::tree::total_bytes(&d)).unwrap_or(0),
            Fixture::Db { dir, .. } => crate::tree::total_bytes(dir.path()),
        }
    }

    pub fn capture(&mut self) -> Result<Capture, String> {
        match self {
            Fixture::Fs { .. } => {
                let dir = self.work_dir().ok_or("fixture work dir unavailable")?;
                FsState::capture(&dir).map(Capture::Fs).map_err(|e| e.to_string())
            }
            Fixture::Db { conn, .. } => conn.row_state().map(Capture::Db).map_err(|e| e.to_string()),
        }
    }

    /// Runs one form against the fixture; `Err` describes a crash.
    pub fn run(&mut self, label: &str, form: &str) -> Result<(), String> {
        let result = match self {
            Fixture::Fs { handle, .. } => match handle.run(&sandbox::sh(form), &[]) {
                Ok(r) => {
                    let out = format!(
                        "[{label}] exit {}{}\n{}{}",
                        r.exit_status,
                        if r.timed_out { " (timed out)" } else { "" },
                        String::from_utf8_lossy(&r.stdout),
                        String::from_utf8_lossy(&r.stderr)
                    );
                    if r.success() {
                        Ok(out)
                    } else if !r.violations.is_empty() {
                        Err(format!("{out}violations: {}", r.violations.join("; ")))
                    } else {
                        Err(out)
                    }
                }
                Err(e) => Err(format!("[{label}] {e}")),
            },
            Fixture::Db { conn, .. } => {
                conn.execute_batch(form).map(|()| format!("[{label}] ok\n")).map_err(|e| format!("[{label}] {e}"))
            }
        };
        match result {
            Ok(out) => {
                self.log_mut().push_str(&out);
                Ok(())
            }
            Err(out) => {
                self.log_mut().push_str(&out);
                self.log_mut().push('\n');
                Err(out)
            }
        }
    }

    pub fn teardown(&mut self) {
        if let Fixture::Fs { handle, .. } = self {
            if let Err(e) = handle.teardown() {
                log::warn!("fixture teardown: {e}");
            }
        }
    }
}

impl Drop for Fixture {
    fn drop(&mut self) {
        self.teardown();
    }
}

/// Materializes a fixture. For FS, `scope` is the user directory the
/// action would run in; it is copied, never mounted writable.
pub fn build_fixture(testbed: &TestBed, kind: Kind, scope: Option<&Path>, env: &FixtureEnv) -> Result<Fixture, FixtureError> {
    if !testbed.comparator.fits(kind) {
        return Err(FixtureError::ComparatorMismatch(testbed.comparator, kind));
    }
    let mut fixture = match kind {
        Kind::Rest => return Err(FixtureError::Unsupported),
        Kind::Fs => {
            let scratch = tempfile::Builder::new().prefix("goex-fixture-").tempdir()?;
            let work = scratch.path().join(WORK);
            std::fs::create_dir(&work)?;
            let mut spec = SandboxSpec::default().timeout(env.timeout).workdir(WORK).mount(&work, WORK, MountMode::ReadWrite);
            if let Some(scope) = scope {
                copy_tree(scope, &work)?;
                spec = spec.mount(scope, "original", MountMode::ReadOnly);
            }
            let protected: Vec<&Path> = env.protected.iter().map(PathBuf::as_path).chain(scope).collect();
            spec.validate_for_test(&protected)?;
            let handle = env.backend.provision(&spec)?;
            Fixture::Fs { _scratch: scratch, handle, log: String::new() }
        }
        Kind::Db => {
            let dir = tempfile::Builder::new().prefix("goex-fixture-").tempdir()?;
            let mut conn = SqliteConnector::open(dir.path().join("fixture.sqlite"))?;
            conn.confine()?;
            Fixture::Db { dir, conn, log: String::new() }
        }
    };
    fixture.run("setup", &testbed.setup_script).map_err(FixtureError::Setup)?;
    Ok(fixture)
}

/// Capture, action, undo, capture, compare.
pub fn run_pair(fixture: &mut Fixture, action_form: &str, undo_form: &str, comparator: Comparator) -> Verdict {
    let before = match fixture.capture() {
        Ok(c) => c,
        Err(e) => return Verdict::inconclusive(comparator, format!("{}capture failed: {e}", fixture.log())),
    };
    let crashed = |fixture: &Fixture, what: &str, detail: String| Verdict {
        result: VerdictResult::NotReversible,
        comparator_used: comparator,
        diff_summary: format!("{what} crashed: {}", detail.trim()),
        fixture_log: fixture.log().to_owned(),
    };
    if let Err(e) = fixture.run("action", action_form) {
        return crashed(fixture, "action", e);
    }
    if let Err(e) = fixture.run("undo", undo_form) {
        return crashed(fixture, "undo", e);
    }
    let after = match fixture.capture() {
        Ok(c) => c,
        Err(e) => return Verdict::inconclusive(comparator, format!("{}capture failed: {e}", fixture.log())),
    };
    match compare_state(&before, &after, comparator) {
        Ok(()) => Verdict {
            result: VerdictResult::Reversible,
            comparator_used: comparator,
            diff_summary: String::new(),
            fixture_log: fixture.log().to_owned(),
        },
        Err(diff) => Verdict {
            result: VerdictResult::NotReversible,
            comparator_used: comparator,
            diff_summary: diff,
            fixture_log: fixture.log().to_owned(),
        },
    }
}

/// Builds a fixture, runs the pair and tears the fixture down.
pub fn test_pair(testbed: &TestBed, kind: Kind, scope: Option<&Path>, env: &FixtureEnv) -> Verdict {
    match build_fixture(testbed, kind, scope, env) {
        Ok(mut fixture) => {
            let v = run_pair(&mut fixture, &testbed.action_form, &testbed.undo_form, testbed.comparator);
            fixture.teardown();
            v
        }
        Err(e) => Verdict::inconclusive(testbed.comparator, format!("fixture build failed: {e}")),
    }
}

/// Comparator used when the generator does not pick one.
pub fn default_comparator(kind: Kind, content_op: bool) -> Comparator {
    match (kind, content_op) {
        (Kind::Db, _) => Comparator::RowMultiset,
        (_, true) => Comparator::FullContent,
        (_, false) => Comparator::NamesOnly,
    }
}

/// A hand-labeled (action, undo, test bed) tuple.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusCase {
    pub name: String,
    pub kind: Kind,
    pub testbed: TestBed,
    pub expected: VerdictResult,
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<CorpusCase>, records::RecordError> {
    let path = path.as_ref();
    let (recs, _) = RecordLog::read(path)?;
    recs.into_iter()
        .filter(|r| r.event_type == "case")
        .map(|r| {
            serde_json::from_value(r.payload).map_err(|e| records::RecordError::Corrupt {
                path: path.to_path_buf(),
                line: r.seq as usize,
                reason: e.to_string(),
            })
        })
        .collect()
}

pub fn save_corpus(path: impl AsRef<Path>, cases: &[CorpusCase]) -> Result<(), records::RecordError> {
    let entries: Vec<_> =
        cases.iter().map(|c| (None, "case".to_owned(), serde_json::to_value(c).expect("cases serialize"))).collect();
    records::rewrite(path, &entries, false)
}

/// Verdicts for every case, in input order. Fixtures are independent, so
/// with the `parallel` feature they run concurrently.
pub fn run_corpus(cases: &[CorpusCase], env: &FixtureEnv) -> Vec<Verdict> {
    let one = |c: &CorpusCase| test_pair(&c.testbed, c.kind, None, env);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        cases.par_iter().map(one).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        cases.iter().map(one).collect()
    }
}

/// Sequential variant, for comparison and for callers that must not fan out.
pub fn run_corpus_sequential(cases: &[CorpusCase], env: &FixtureEnv) -> Vec<Verdict> {
    cases.iter().map(|c| test_pair(&c.testbed, c.kind, None, env)).collect()
}
