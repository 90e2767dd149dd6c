//! Directory walking, content capture and tree copying.
//!
//! Walks never follow symlinks: a link is recorded by its target text.
//! Ordering is lexicographic per directory so renderings and hashes are
//! deterministic. File content hashing is data-parallel when the
//! `parallel` feature is on.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::os::unix::fs::{MetadataExt, PermissionsExt};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

/// Formatted snapshot of a directory for generator context and display.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectoryTree {
    pub root: PathBuf,
    pub rendering: String,
    pub entry_count: usize,
    pub total_bytes: u64,
}

/// Exhaustive recursive walk. Entries that cannot be read are marked and
/// the walk continues.
pub fn walk_tree(root: &Path) -> io::Result<DirectoryTree> {
    let meta = fs::metadata(root)?;
    if !meta.is_dir() {
        return Err(io::Error::new(io::ErrorKind::NotADirectory, format!("{} is not a directory", root.display())));
    }
    let label = root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| ".".into());
    let mut rendering = format!("{label}/\n");
    let mut entry_count = 0;
    let mut total_bytes = 0;
    let walker = WalkDir::new(root).min_depth(1).follow_links(false).sort_by_file_name();
    for entry in walker {
        match entry {
            Ok(e) => {
                entry_count += 1;
                let indent = "  ".repeat(e.depth());
                let name = e.file_name().to_string_lossy();
                let ft = e.file_type();
                if ft.is_dir() {
                    rendering.push_str(&format!("{indent}{name}/\n"));
                } else if ft.is_symlink() {
                    let target = fs::read_link(e.path()).map(|t| t.display().to_string()).unwrap_or_default();
                    rendering.push_str(&format!("{indent}{name} -> {target}\n"));
                } else {
                    let len = e.metadata().map(|m| m.len()).unwrap_or(0);
                    total_bytes += len;
                    rendering.push_str(&format!("{indent}{name} ({len} bytes)\n"));
                }
            }
            Err(err) => {
                entry_count += 1;
                let depth = err.depth();
                let name = err.path().and_then(|p| p.file_name()).map(|n| n.to_string_lossy().into_owned());
                rendering.push_str(&format!(
                    "{}{} [unreadable]\n",
                    "  ".repeat(depth),
                    name.unwrap_or_else(|| "?".into())
                ));
            }
        }
    }
    Ok(DirectoryTree { root: root.to_path_buf(), rendering, entry_count, total_bytes })
}

/// Total size of regular files below `root`.
pub fn total_bytes(root: &Path) -> u64 {
    WalkDir::new(root)
        .follow_links(false)
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .filter_map(|e| e.metadata().ok())
        .map(|m| m.len())
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    /// Data-parallel; identical to `Sequential` without the `parallel` feature.
    Parallel,
}

impl Default for Parallelism {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Parallelism::Parallel
        } else {
            Parallelism::Sequential
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum EntryKind {
    File { sha256: String, len: u64 },
    Dir,
    Symlink { target: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryState {
    #[serde(flatten)]
    pub kind: EntryKind,
    /// Permission bits (`mode & 0o7777`); zero for symlinks.
    pub mode: u32,
}

/// Content and mode of every entry below a root, keyed by relative path.
/// Timestamps are not captured.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FsState {
    pub entries: BTreeMap<String, EntryState>,
}

impl FsState {
    pub fn capture(root: &Path) -> io::Result<FsState> {
        Self::capture_with(root, &[], Parallelism::default())
    }

    /// Captures state, skipping top-level names in `exclude`.
    pub fn capture_with(root: &Path, exclude: &[&str], par: Parallelism) -> io::Result<FsState> {
        let mut pending: Vec<(String, PathBuf, u32)> = Vec::new();
        let mut entries = BTreeMap::new();
        let walker = WalkDir::new(root)
            .min_depth(1)
            .follow_links(false)
            .sort_by_file_name()
            .into_iter()
            .filter_entry(|e| !(e.depth() == 1 && exclude.iter().any(|x| e.file_name() == *x)));
        for entry in walker {
            let entry = entry.map_err(io::Error::other)?;
            let rel = relative(root, entry.path());
            let meta = entry.path().symlink_metadata()?;
            let ft = meta.file_type();
            if ft.is_symlink() {
                let target = fs::read_link(entry.path())?.display().to_string();
                entries.insert(rel, EntryState { kind: EntryKind::Symlink { target }, mode: 0 });
            } else if ft.is_dir() {
                entries.insert(rel, EntryState { kind: EntryKind::Dir, mode: meta.mode() & 0o7777 });
            } else {
                pending.push((rel, entry.path().to_path_buf(), meta.mode() & 0o7777));
            }
        }
        for (rel, state) in hash_files(pending, par)? {
            entries.insert(rel, state);
        }
        Ok(FsState { entries })
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (path, e) in &self.entries {
            h.update(path.as_bytes());
            h.update([0]);
            match &e.kind {
                EntryKind::File { sha256, len } => h.update(format!("f:{sha256}:{len}")),
                EntryKind::Dir => h.update("d"),
                EntryKind::Symlink { target } => h.update(format!("l:{target}")),
            }
            h.update(format!(":{:o}\n", e.mode));
        }
        hex::encode(h.finalize())
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    /// Human-readable difference against `after`; empty when equal.
    pub fn diff(&self, after: &FsState) -> Vec<String> {
        let mut out = Vec::new();
        for (path, before) in &self.entries {
            match after.entries.get(path) {
                None => out.push(format!("removed {path}")),
                Some(a) if a.kind != before.kind => out.push(format!("content changed {path}")),
                Some(a) if a.mode != before.mode => {
                    out.push(format!("mode changed {path} {:o} -> {:o}", before.mode, a.mode))
                }
                Some(_) => {}
            }
        }
        for path in after.entries.keys() {
            if !self.entries.contains_key(path) {
                out.push(format!("added {path}"));
            }
        }
        out
    }
}

/// Recursive content hash (paths, kinds, content, permission bits).
pub fn content_hash(root: &Path) -> io::Result<String> {
    Ok(FsState::capture(root)?.digest())
}

pub fn content_hash_with(root: &Path, par: Parallelism) -> io::Result<String> {
    Ok(FsState::capture_with(root, &[], par)?.digest())
}

fn hash_one(path: &Path) -> io::Result<(String, u64)> {
    let mut file = fs::File::open(path)?;
    let mut h = Sha256::new();
    let len = io::copy(&mut file, &mut h)?;
    Ok((hex::encode(h.finalize()), len))
}

fn hash_files(pending: Vec<(String, PathBuf, u32)>, par: Parallelism) -> io::Result<Vec<(String, EntryState)>> {
    let one = |(rel, path, mode): (String, PathBuf, u32)| -> io::Result<(String, EntryState)> {
        let (sha256, len) = hash_one(&path)?;
        Ok((rel, EntryState { kind: EntryKind::File { sha256, len }, mode }))
    };
    match par {
        #[cfg(feature = "parallel")]
        Parallelism::Parallel => {
            use rayon::prelude::*;
            pending.into_par_iter().map(one).collect()
        }
        _ => pending.into_iter().map(one).collect(),
    }
}

fn relative(root: &Path, path: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).to_string_lossy().into_owned()
}

/// Copies `src` into `dst` (created if missing), preserving permission bits
/// and recreating symlinks without following them.
pub fn copy_tree(src: &Path, dst: &Path) -> io::Result<()> {
    fs::create_dir_all(dst)?;
    for entry in WalkDir::new(src).min_depth(1).follow_links(false).sort_by_file_name() {
        let entry = entry.map_err(io::Error::other)?;
        let target = dst.join(entry.path().strip_prefix(src).expect("walk stays under src"));
        copy_entry(entry.path(), &target)?;
    }
    let mode = fs::metadata(src)?.permissions().mode();
    fs::set_permissions(dst, fs::Permissions::from_mode(mode))
}

fn copy_entry(from: &Path, to: &Path) -> io::Result<()> {
    let meta = from.symlink_metadata()?;
    let ft = meta.file_type();
    if ft.is_symlink() {
        std::os::unix::fs::symlink(fs::read_link(from)?, to)
    } else if ft.is_dir() {
        fs::create_dir_all(to)?;
        fs::set_permissions(to, fs::Permissions::from_mode(meta.mode() & 0o7777))
    } else {
        fs::copy(from, to)?;
        fs::set_permissions(to, fs::Permissions::from_mode(meta.mode() & 0o7777))
    }
}

/// Makes `dst` an exact copy of `src` (content, links and permission bits),
/// touching only entries that differ.
pub fn mirror_tree(src: &Path, dst: &Path) -> io::Result<()> {
    let want = FsState::capture(src)?;
    let have = FsState::capture(dst)?;
    // Remove deepest first so directories are empty when reached.
    for (rel, state) in have.entries.iter().rev() {
        let keep = want.entries.get(rel).is_some_and(|w| same_type(&w.kind, &state.kind));
        if !keep {
            let p = dst.join(rel);
            if matches!(state.kind, EntryKind::Dir) {
                fs::remove_dir_all(&p).or_else(ignore_missing)?;
            } else {
                fs::remove_file(&p).or_else(ignore_missing)?;
            }
        }
    }
    for (rel, state) in &want.entries {
        let from = src.join(rel);
        let to = dst.join(rel);
        let current = if to.symlink_metadata().is_ok() { have.entries.get(rel) } else { None };
        match (&state.kind, current) {
            (_, Some(cur)) if cur == state => {}
            (EntryKind::Dir, Some(_)) => fs::set_permissions(&to, fs::Permissions::from_mode(state.mode))?,
            (EntryKind::Symlink { .. }, Some(_)) => {
                fs::remove_file(&to)?;
                copy_entry(&from, &to)?;
            }
            _ => copy_entry(&from, &to)?,
        }
    }
    let mode = fs::metadata(src)?.permissions().mode();
    fs::set_permissions(dst, fs::Permissions::from_mode(mode))
}

fn same_type(a: &EntryKind, b: &EntryKind) -> bool {
    std::mem::discriminant(a) == std::mem::discriminant(b)
}

fn ignore_missing(e: io::Error) -> io::Result<()> {
    if e.kind() == io::ErrorKind::NotFound {
        Ok(())
    } else {
        Err(e)
    }
}
