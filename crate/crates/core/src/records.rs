//! Append-only, one-record-per-line log shared by the journal, the
//! reversion registry, the vault and the policy rules file.
//!
//! Each line is a JSON object `{seq, timestamp, txn_id, event_type, payload}`.
//! A final line that is incomplete (no newline, or not parseable) is treated
//! as a torn write: it is dropped with a warning and, when the log is opened
//! for appending, truncated away. Damage anywhere before the final line is a
//! hard error.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::os::unix::fs::OpenOptionsExt;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::ids::TxnId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub seq: u64,
    pub timestamp: DateTime<Utc>,
    pub txn_id: Option<TxnId>,
    pub event_type: String,
    pub payload: Value,
}

#[derive(Debug, thiserror::Error)]
pub enum RecordError {
    #[error("record log {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("record log {path}: corrupt record at line {line}: {reason}")]
    Corrupt { path: PathBuf, line: usize, reason: String },
    #[error("record log {path}: sequence number {seq} at line {line} is not increasing")]
    OutOfOrder { path: PathBuf, line: usize, seq: u64 },
}

/// What a read found at the tail of the log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReadReport {
    pub intact: usize,
    /// Bytes of torn trailing data dropped.
    pub torn_bytes: u64,
    pub warning: Option<String>,
}

enum Sink {
    File { path: PathBuf, file: File },
    Memory(Vec<Record>),
}

struct Inner {
    sink: Sink,
    next_seq: u64,
}

pub struct RecordLog {
    inner: Mutex<Inner>,
}


impl RecordLog {
    pub fn in_memory() -> Self {
        RecordLog {
            inner: Mutex::new(Inner { sink: Sink::Memory(Vec::new()), next_seq: 1 }),
        }
    }

    /// Opens (creating if needed) a log for appending and returns the intact
    /// records already in it. A torn tail is truncated from the file.
    pub fn open(path: impl AsRef<Path>, private: bool) -> Result<(Self, Vec<Record>, ReadReport), RecordError> {
        let path = path.as_ref().to_path_buf();
        let io_err = |source| RecordError::Io { path: path.clone(), source };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io_err)?;
        }
        let mut opts = OpenOptions::new();
        opts.read(true).append(true).create(true);
        if private {
            opts.mode(0o600);
        }
        let file = opts.open(&path).map_err(io_err)?;
        let bytes = fs::read(&path).map_err(io_err)?;
        let (records, report, keep) = parse(&path, &bytes)?;
        if keep < bytes.len() as u64 {
            log::warn!("{}: truncating {} torn trailing bytes", path.display(), bytes.len() as u64 - keep);
            file.set_len(keep).map_err(io_err)?;
        }
        let next_seq = records.last().map_or(1, |r| r.seq + 1);
        let log = RecordLog { inner: Mutex::new(Inner { sink: Sink::File { path, file }, next_seq }) };
        Ok((log, records, report))
    }

    /// Reads a log without modifying it.
    pub fn read(path: impl AsRef<Path>) -> Result<(Vec<Record>, ReadReport), RecordError> {
        let path = path.as_ref();
        let bytes = match fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok((Vec::new(), ReadReport::default())),
            Err(source) => return Err(RecordError::Io { path: path.to_path_buf(), source }),
        };
        let (records, report, _) = parse(path, &bytes)?;
        Ok((records, report))
    }

    /// Appends one record. `durable` forces an fsync before returning.
    pub fn append(
        &self,
        txn_id: Option<&TxnId>,
        event_type: &str,
        payload: Value,
        durable: bool,
    ) -> Result<Record, RecordError> {
        let mut inner = self.inner.lock().unwrap_or_else(|p| p.into_inner());
        let record = Record {
            seq: inner.next_seq,
            timestamp: Utc::now(),
            txn_id: txn_id.cloned(),
            event_type: event_type.to_owned(),
            payload,
        };
        match &mut inner.sink {
            Sink::Memory(records) => records.push(record.clone()),
            Sink::File { path, file } => {
                let mut line = serde_json::to_vec(&record).expect("records always serialize");
                line.push(b'\n');
                let io_err = |source| RecordError::Io { path: path.clone(), source };
                file.write_all(&line).map_err(io_err)?;
                if durable {
                    file.sync_data().map_err(io_err)?;
                }
            }
        }
        inner.next_seq += 1;
        Ok(record)
    }

    /// Records held by an in-memory log; empty for file-backed logs.
    pub fn memory_records(&self) -> Vec<Record> {
        match &self.inner.lock().unwrap_or_else(|p| p.into_inner()).sink {
            Sink::Memory(r) => r.clone(),
            Sink::File { .. } => Vec::new(),
        }
    }

    pub fn path(&self) -> Option<PathBuf> {
        match &self.inner.lock().unwrap_or_else(|p| p.into_inner()).sink {
            Sink::File { path, .. } => Some(path.clone()),
            Sink::Memory(_) => None,
        }
    }

    /// Every record currently in the log, whichever sink backs it.
    pub fn snapshot(&self) -> Result<Vec<Record>, RecordError> {
        match self.path() {
            Some(p) => Ok(Self::read(p)?.0),
            None => Ok(self.memory_records()),
        }
    }
}

/// Atomically replaces a log file with the given records (renumbered from 1).
pub fn rewrite(path: impl AsRef<Path>, entries: &[(Option<TxnId>, String, Value)], private: bool) -> Result<(), RecordError> {
    let path = path.as_ref();
    let io_err = |source| RecordError::Io { path: path.to_path_buf(), source };
    let tmp = path.with_extension("tmp");
    {
        let mut opts = OpenOptions::new();
        opts.write(true).create(true).truncate(true);
        if private {
            opts.mode(0o600);
        }
        let mut file = opts.open(&tmp).map_err(io_err)?;
        for (i, (txn_id, event_type, payload)) in entries.iter().enumerate() {
            let record = Record {
                seq: i as u64 + 1,
                timestamp: Utc::now(),
                txn_id: txn_id.clone(),
                event_type: event_type.clone(),
                payload: payload.clone(),
            };
            let mut line = serde_json::to_vec(&record).expect("records always serialize");
            line.push(b'\n');
            file.write_all(&line).map_err(io_err)?;
        }
        file.sync_all().map_err(io_err)?;
    }
    fs::rename(&tmp, path).map_err(io_err)
}

/// Parses log bytes; returns the intact records, a report, and the byte
/// length of the intact prefix.
fn parse(path: &Path, bytes: &[u8]) -> Result<(Vec<Record>, ReadReport, u64), RecordError> {
    let mut records: Vec<Record> = Vec::new();
    let mut offset = 0usize;
    let mut line_no = 0usize;
    let mut report = ReadReport::default();
    while offset < bytes.len() {
        line_no += 1;
        let rest = &bytes[offset..];
        let (line, complete) = match rest.iter().position(|&b| b == b'\n') {
            Some(i) => (&rest[..i], true),
            None => (rest, false),
        };
        let parsed = std::str::from_utf8(line)
            .map_err(|e| e.to_string())
            .and_then(|s| serde_json::from_str::<Record>(s).map_err(|e| e.to_string()));
        let is_last = !complete || offset + line.len() + 1 == bytes.len();
        match parsed {
            Ok(rec) if complete => {
                if records.last().is_some_and(|prev| prev.seq >= rec.seq) {
                    return Err(RecordError::OutOfOrder { path: path.to_path_buf(), line: line_no, seq: rec.seq });
                }
                records.push(rec);
                offset += line.len() + 1;
            }
            Ok(_) | Err(_) if is_last => {
                report.torn_bytes = (bytes.len() - offset) as u64;
                report.warning = Some(format!(
                    "{}: dropped torn final record at line {} ({} bytes)",
                    path.display(),
                    line_no,
                    report.torn_bytes
                ));
                break;
            }
            Ok(_) => unreachable!("an incomplete line is always the last"),
            Err(reason) => {
                return Err(RecordError::Corrupt { path: path.to_path_buf(), line: line_no, reason });
            }
        }
    }
    report.intact = records.len();
    Ok((records, report, offset as u64))
}
