//! Transaction journal: the record log specialised to [`TxEvent`]s.
//!
//! The journal doubles as the audit trail. Terminal-state transitions are
//! fsynced; everything else relies on the OS page cache.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{TxState, Transaction, UndoSource};
use crate::action::{ActionSpec, Kind, Mode, UndoSpec};
use crate::ids::TxnId;
use crate::policy::BlastRadius;
use crate::records::{ReadReport, Record, RecordError, RecordLog};
use crate::revtest::Verdict;
use crate::txn::ExecutionOutcome;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event_type", content = "payload", rename_all = "snake_case")]
pub enum TxEvent {
    Begun { prompt: String, mode: Mode, kind: Kind, atomic: bool },
    Staged { action: ActionSpec, undo: Option<UndoSpec>, source: UndoSource },
    UndoAttached { index: usize, undo: Option<UndoSpec>, source: UndoSource },
    PolicyResolved { radius: BlastRadius },
    Gated { reason: String },
    Acknowledged,
    VerdictRecorded { index: usize, verdict: Verdict },
    Transition { to: TxState },
    Outcome { index: usize, outcome: ExecutionOutcome },
    UndoOutcome { index: usize, outcome: ExecutionOutcome },
    Error { message: String },
    Note { message: String },
}

impl TxEvent {
    fn split(&self) -> (String, Value) {
        let mut v = serde_json::to_value(self).expect("events always serialize");
        let obj = v.as_object_mut().expect("adjacently tagged");
        let kind = obj.remove("event_type").and_then(|k| k.as_str().map(str::to_owned)).unwrap_or_default();
        let payload = obj.remove("payload").unwrap_or(Value::Null);
        (kind, payload)
    }

    fn join(event_type: &str, payload: &Value) -> Result<TxEvent, serde_json::Error> {
        let mut obj = serde_json::Map::new();
        obj.insert("event_type".into(), Value::String(event_type.to_owned()));
        if !payload.is_null() {
            obj.insert("payload".into(), payload.clone());
        }
        serde_json::from_value(Value::Object(obj))
    }

    fn is_durable(&self) -> bool {
        matches!(self, TxEvent::Transition { to } if to.is_terminal())
    }
}

pub struct Journal {
    log: RecordLog,
}

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error(transparent)]
    Records(#[from] RecordError),
    #[error("journal record {seq}: {reason}")]
    Inconsistent { seq: u64, reason: String },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReplayReport {
    pub read: ReadReport,
    pub transactions: usize,
    /// Transactions interrupted mid-execution or mid-undo; they need an operator.
    pub interrupted: Vec<TxnId>,
    /// Records of other event families (registry, audit) skipped during replay.
    pub foreign_records: usize,
}

impl Journal {
    pub fn in_memory() -> Self {
        Journal { log: RecordLog::in_memory() }
    }

    /// Opens a journal and replays it.
    pub fn open(path: impl AsRef<Path>) -> Result<(Self, BTreeMap<TxnId, Transaction>, ReplayReport), ReplayError> {
        let (log, records, read) = RecordLog::open(path, false)?;
        if let Some(w) = &read.warning {
            log::warn!("{w}");
        }
        let (table, mut report) = replay_records(&records)?;
        report.read = read;
        Ok((Journal { log }, table, report))
    }

    pub fn append(&self, txn: &TxnId, event: &TxEvent) -> Result<Record, RecordError> {
        let (kind, payload) = event.split();
        self.log.append(Some(txn), &kind, payload, event.is_durable())
    }

    /// Appends a record outside the transaction event family (e.g. registry
    /// contradictions or alarms).
    pub fn append_raw(&self, txn: Option<&TxnId>, event_type: &str, payload: Value) -> Result<Record, RecordError> {
        self.log.append(txn, event_type, payload, false)
    }

    pub fn records(&self) -> Result<Vec<Record>, RecordError> {
        self.log.snapshot()
    }
}

/// Rebuilds the transaction table from journal records. Pure and idempotent.
pub fn replay_records(records: &[Record]) -> Result<(BTreeMap<TxnId, Transaction>, ReplayReport), ReplayError> {
    let mut table: BTreeMap<TxnId, Transaction> = BTreeMap::new();
    let mut report = ReplayReport::default();
    for rec in records {
        let Some(id) = &rec.txn_id else {
            report.foreign_records += 1;
            continue;
        };
        let event = match TxEvent::join(&rec.event_type, &rec.payload) {
            Ok(e) => e,
            Err(_) => {
                report.foreign_records += 1;
                continue;
            }
        };
        let bad = |reason: String| ReplayError::Inconsistent { seq: rec.seq, reason };
        match &event {
            TxEvent::Begun { prompt, mode, kind, atomic } => {
                if table.contains_key(id) {
                    return Err(bad(format!("transaction {id} begun twice")));
                }
                table.insert(id.clone(), Transaction::new(id.clone(), prompt.clone(), *mode, *kind, *atomic, rec.timestamp));
            }
            other => {
                let txn = table.get_mut(id).ok_or_else(|| bad(format!("event for unknown transaction {id}")))?;
                txn.apply(other, rec.timestamp).map_err(bad)?;
            }
        }
    }
    report.transactions = table.len();
    report.interrupted = table
        .values()
        .filter(|t| matches!(t.state, TxState::Executing | TxState::Undoing))
        .map(|t| t.id.clone())
        .collect();
    Ok((table, report))
}

impl Transaction {
    pub(crate) fn begun(id: TxnId, event: &TxEvent, at: chrono::DateTime<chrono::Utc>) -> Transaction {
        match event {
            TxEvent::Begun { prompt, mode, kind, atomic } => {
                Transaction::new(id, prompt.clone(), *mode, *kind, *atomic, at)
            }
            _ => unreachable!("begun() takes a Begun event"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn event_split_join_round_trip() {
        let events = [
            TxEvent::Begun { prompt: "p".into(), mode: Mode::FunctionCalling, kind: Kind::Db, atomic: true },
            TxEvent::Acknowledged,
            TxEvent::Transition { to: TxState::Executing },
            TxEvent::Note { message: "n".into() },
        ];
        for e in events {
            let (k, p) = e.split();
            assert_eq!(TxEvent::join(&k, &p).unwrap(), e);
        }
    }

    #[test]
    fn replay_rejects_events_for_unknown_transactions() {
        let j = Journal::in_memory();
        let id = TxnId::fresh();
        j.append(&id, &TxEvent::Transition { to: TxState::Executing }).unwrap();
        let recs = j.records().unwrap();
        assert!(matches!(replay_records(&recs), Err(ReplayError::Inconsistent { .. })));
    }

    #[test]
    fn foreign_records_are_skipped() {
        let j = Journal::in_memory();
        j.append_raw(None, "registry_contradiction", serde_json::json!({"api": "x"})).unwrap();
        let (table, report) = replay_records(&j.records().unwrap()).unwrap();
        assert!(table.is_empty());
        assert_eq!(report.foreign_records, 1);
    }
}
