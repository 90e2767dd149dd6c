use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard, RwLock, TryLockError};
use std::time::Duration;

use chrono::Utc;

use super::journal::{Journal, ReplayError, ReplayReport, TxEvent};
use super::{ExecutionOutcome, TxState, Transaction, UndoSource};
use crate::action::{ActionSpec, Kind, Mode, UndoSpec};
use crate::ids::TxnId;
use crate::policy::{self, BlastRadius, Decision};
use crate::records::RecordError;
use crate::revtest::Verdict;

/// Executes, undoes and finalizes the actions of one transaction. The
/// runtime implements this by dispatching to the kind-specific handlers.
pub trait ActionRunner: Send + Sync {
    /// Runs action `index`. `Ok` with a non-zero exit status is a result the
    /// operator judges; `Err` stops the transaction.
    fn run(&self, txn: &Transaction, index: usize) -> Result<ExecutionOutcome, RunError>;

    fn undo(&self, txn: &Transaction, index: usize) -> Result<ExecutionOutcome, RunError>;

    /// Handler-specific finalization on commit.
    fn commit(&self, txn: &Transaction) -> Result<(), RunError>;

    /// Called once per attempted undo with whether it worked.
    fn undo_finished(&self, _txn: &Transaction, _index: usize, _worked: bool) {}
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("policy denied: {0}")]
    PolicyDenied(String),
    #[error("sandbox error: {0}")]
    Sandbox(String),
    #[error("handler error: {0}")]
    Handler(String),
    /// The action ran and failed; its outcome is kept for review.
    #[error("action failed: {}", .0.structured_summary)]
    Failed(ExecutionOutcome),
}

impl RunError {
    fn into_outcome(self) -> ExecutionOutcome {
        match self {
            RunError::Failed(o) => o,
            other => ExecutionOutcome::failed(other.to_string()),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TxnError {
    #[error("prompt must not be empty")]
    EmptyPrompt,
    #[error("unknown transaction {0}")]
    NotFound(TxnId),
    #[error("transaction {id} is {state}; cannot {op}")]
    InvalidState { id: TxnId, state: TxState, op: &'static str },
    #[error("transaction {0} is being operated on by another caller")]
    Busy(TxnId),
    #[error("action {index} denied by policy: {reason}")]
    PolicyDenied { index: usize, reason: String },
    #[error("transaction {id} needs acknowledgment before execution: {}", reasons.join("; "))]
    AckRequired { id: TxnId, reasons: Vec<String> },
    #[error("transaction {0} is not atomic")]
    NotAtomic(TxnId),
    #[error("atomic transaction has actions without undo: {0:?}")]
    MissingUndo(Vec<usize>),
    #[error("transaction {0} has no resolved blast radius")]
    NoPolicy(TxnId),
    #[error("commit failed: {0}")]
    Commit(RunError),
    #[error("journal: {0}")]
    Journal(#[from] RecordError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("internal: {0}")]
    Internal(String),
}

struct Cell {
    /// Held for the duration of any mutating operation.
    op: Mutex<()>,
    state: RwLock<Transaction>,
}

/// Transaction table plus journal. Safe to share across threads; a single
/// transaction is mutated by one caller at a time and competing callers
/// get [`TxnError::Busy`].
pub struct TxnManager {
    journal: Journal,
    table: RwLock<BTreeMap<TxnId, Arc<Cell>>>,
}

impl TxnManager {
    pub fn in_memory() -> Self {
        TxnManager { journal: Journal::in_memory(), table: RwLock::new(BTreeMap::new()) }
    }

    /// Opens the journal at `path`, replaying it into the table.
    pub fn open(path: impl AsRef<Path>) -> Result<(Self, ReplayReport), TxnError> {
        let (journal, txns, report) = Journal::open(path)?;
        for id in &report.interrupted {
            log::warn!("transaction {id} was interrupted mid-operation and needs operator resolution");
        }
        let table = txns
            .into_iter()
            .map(|(id, t)| (id, Arc::new(Cell { op: Mutex::new(()), state: RwLock::new(t) })))
            .collect();
        Ok((TxnManager { journal, table: RwLock::new(table) }, report))
    }

    pub fn journal(&self) -> &Journal {
        &self.journal
    }

    pub fn begin(&self, prompt: &str, mode: Mode, kind: Kind, atomic: bool) -> Result<Transaction, TxnError> {
        if prompt.trim().is_empty() {
            return Err(TxnError::EmptyPrompt);
        }
        let id = TxnId::fresh();
        let event = TxEvent::Begun { prompt: prompt.to_owned(), mode, kind, atomic };
        let rec = self.journal.append(&id, &event)?;
        let txn = Transaction::begun(id.clone(), &event, rec.timestamp);
        let cell = Arc::new(Cell { op: Mutex::new(()), state: RwLock::new(txn.clone()) });
        self.table.write().unwrap_or_else(|p| p.into_inner()).insert(id, cell);
        Ok(txn)
    }

    pub fn get(&self, id: &TxnId) -> Result<Transaction, TxnError> {
        let cell = self.cell(id)?;
        let txn = read(&cell).clone();
        Ok(txn)
    }

    pub fn list(&self, state: Option<TxState>) -> Vec<Transaction> {
        let cells: Vec<Arc<Cell>> = self.table.read().unwrap_or_else(|p| p.into_inner()).values().cloned().collect();
        let mut out: Vec<Transaction> =
            cells.iter().map(|c| read(c).clone()).filter(|t| state.is_none_or(|s| t.state == s)).collect();
        out.sort_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.id.cmp(&b.id)));
        out
    }

    pub fn stage(
        &self,
        id: &TxnId,
        action: ActionSpec,
        undo: Option<UndoSpec>,
        source: UndoSource,
    ) -> Result<Transaction, TxnError> {
        let source = if undo.is_none() && source != UndoSource::Snapshot { UndoSource::None } else { source };
        self.mutate(id, "stage", |m, cell| {
            m.emit(cell, TxEvent::Staged { action, undo, source })?;
            Ok(read(cell).clone())
        })
    }

    /// Replaces the undo of a staged action (e.g. after generator fallback).
    pub fn attach_undo(&self, id: &TxnId, index: usize, undo: Option<UndoSpec>, source: UndoSource) -> Result<(), TxnError> {
        let source = if undo.is_none() && source != UndoSource::Snapshot { UndoSource::None } else { source };
        self.mutate(id, "attach undo", |m, cell| m.emit(cell, TxEvent::UndoAttached { index, undo, source }))
    }

    pub fn set_policy(&self, id: &TxnId, radius: BlastRadius) -> Result<(), TxnError> {
        self.mutate(id, "set policy", |m, cell| m.emit(cell, TxEvent::PolicyResolved { radius }))
    }

    pub fn acknowledge(&self, id: &TxnId) -> Result<Transaction, TxnError> {
        self.mutate(id, "acknowledge", |m, cell| {
            m.emit(cell, TxEvent::Acknowledged)?;
            Ok(read(cell).clone())
        })
    }

    pub fn gate(&self, id: &TxnId, reason: String) -> Result<(), TxnError> {
        self.mutate(id, "gate", |m, cell| m.emit(cell, TxEvent::Gated { reason }))
    }

    pub fn record_verdict(&self, id: &TxnId, index: usize, verdict: Verdict) -> Result<(), TxnError> {
        self.mutate(id, "record verdict", |m, cell| m.emit(cell, TxEvent::VerdictRecorded { index, verdict }))
    }

    pub fn note(&self, id: &TxnId, message: impl Into<String>) -> Result<(), TxnError> {
        let message = message.into();
        self.mutate(id, "note", |m, cell| m.emit(cell, TxEvent::Note { message }))
    }

    /// Executes every staged action in order. Atomic transactions go
    /// through [`TxnManager::run_atomic`].
    pub fn execute(&self, id: &TxnId, runner: &dyn ActionRunner) -> Result<Transaction, TxnError> {
        self.mutate(id, "execute", |m, cell| {
            let txn = read(cell).clone();
            if txn.state != TxState::Pending {
                return Err(invalid(&txn, "execute"));
            }
            if txn.atomic {
                return m.atomic_locked(cell, runner);
            }
            m.preflight(cell)?;
            m.emit(cell, TxEvent::Transition { to: TxState::Executing })?;
            let n = read(cell).actions.len();
            for i in 0..n {
                let snapshot = read(cell).clone();
                match runner.run(&snapshot, i) {
                    Ok(outcome) => m.emit(cell, TxEvent::Outcome { index: i, outcome })?,
                    Err(e) => {
                        let message = format!("action {i}: {e}");
                        m.emit(cell, TxEvent::Outcome { index: i, outcome: e.into_outcome() })?;
                        m.emit(cell, TxEvent::Error { message })?;
                        m.emit(cell, TxEvent::Transition { to: TxState::Failed })?;
                        return Ok(read(cell).clone());
                    }
                }
            }
            m.emit(cell, TxEvent::Transition { to: TxState::Executed })?;
            Ok(read(cell).clone())
        })
    }

    /// All-or-nothing execution: on failure at step k, steps k-1..1 are
    /// undone and the transaction ends RolledBack (or UndoFailed when a
    /// compensation fails).
    pub fn run_atomic(&self, id: &TxnId, runner: &dyn ActionRunner) -> Result<Transaction, TxnError> {
        self.mutate(id, "run atomic", |m, cell| {
            let txn = read(cell).clone();
            if !txn.atomic {
                return Err(TxnError::NotAtomic(txn.id));
            }
            if txn.state != TxState::Pending {
                return Err(invalid(&txn, "run atomic"));
            }
            m.atomic_locked(cell, runner)
        })
    }

    pub fn commit(&self, id: &TxnId, runner: &dyn ActionRunner) -> Result<Transaction, TxnError> {
        self.mutate(id, "commit", |m, cell| {
            let txn = read(cell).clone();
            if txn.state != TxState::Executed {
                return Err(invalid(&txn, "commit"));
            }
            if let Err(e) = runner.commit(&txn) {
                m.emit(cell, TxEvent::Error { message: format!("commit: {e}") })?;
                return Err(TxnError::Commit(e));
            }
            m.emit(cell, TxEvent::Transition { to: TxState::Committed })?;
            Ok(read(cell).clone())
        })
    }

    /// Runs undo specs in reverse staging order over the actions that
    /// completed. Ends Undone only if every one of them was reversed.
    pub fn undo(&self, id: &TxnId, runner: &dyn ActionRunner) -> Result<Transaction, TxnError> {
        self.mutate(id, "undo", |m, cell| {
            let txn = read(cell).clone();
            let allowed = txn.state == TxState::Executed || (txn.state == TxState::Failed && !txn.atomic);
            if !allowed {
                return Err(invalid(&txn, "undo"));
            }
            m.emit(cell, TxEvent::Transition { to: TxState::Undoing })?;
            let completed: Vec<usize> = txn
                .actions
                .iter()
                .enumerate()
                .filter(|(_, a)| a.outcome.as_ref().is_some_and(|o| o.succeeded()))
                .map(|(i, _)| i)
                .collect();
            let unreversed = m.compensate(cell, runner, &completed)?;
            if unreversed.is_empty() {
                m.emit(cell, TxEvent::Transition { to: TxState::Undone })?;
            } else {
                m.emit(cell, TxEvent::Error { message: format!("unreversed actions: {unreversed:?}") })?;
                m.emit(cell, TxEvent::Transition { to: TxState::UndoFailed })?;
            }
            Ok(read(cell).clone())
        })
    }

    /// Fails a Pending transaction whose preparation (generation, undo
    /// resolution) broke before anything ran.
    pub fn abandon(&self, id: &TxnId, message: impl Into<String>) -> Result<Transaction, TxnError> {
        let message = message.into();
        self.mutate(id, "abandon", |m, cell| {
            let txn = read(cell).clone();
            if txn.state != TxState::Pending {
                return Err(invalid(&txn, "abandon"));
            }
            m.emit(cell, TxEvent::Transition { to: TxState::Executing })?;
            m.emit(cell, TxEvent::Error { message })?;
            m.emit(cell, TxEvent::Transition { to: TxState::Failed })?;
            Ok(read(cell).clone())
        })
    }

    /// Resolves a transaction left Executing by a crash: marks it Failed so
    /// the completed prefix can be inspected and undone.
    pub fn resolve_interrupted(&self, id: &TxnId) -> Result<Transaction, TxnError> {
        self.mutate(id, "resolve", |m, cell| {
            let txn = read(cell).clone();
            if txn.state != TxState::Executing {
                return Err(invalid(&txn, "resolve interrupted"));
            }
            m.emit(cell, TxEvent::Error { message: "interrupted during execution; resolved by operator".into() })?;
            let to = if txn.atomic { TxState::UndoFailed } else { TxState::Failed };
            m.emit(cell, TxEvent::Transition { to })?;
            Ok(read(cell).clone())
        })
    }

    /// Undoes Executed transactions older than `ttl`. Returns those touched.
    pub fn expire(&self, ttl: Duration, runner: &dyn ActionRunner) -> Vec<TxnId> {
        let now = Utc::now();
        let stale: Vec<TxnId> = self
            .list(Some(TxState::Executed))
            .into_iter()
            .filter(|t| (now - t.created_at).to_std().is_ok_and(|age| age >= ttl))
            .map(|t| t.id)
            .collect();
        stale
            .into_iter()
            .filter(|id| {
                let _ = self.note(id, format!("auto-undo after TTL {}s", ttl.as_secs()));
                self.undo(id, runner).is_ok()
            })
            .collect()
    }

    fn cell(&self, id: &TxnId) -> Result<Arc<Cell>, TxnError> {
        self.table
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| TxnError::NotFound(id.clone()))
    }

    fn mutate<T>(
        &self,
        id: &TxnId,
        _op: &'static str,
        f: impl FnOnce(&Self, &Cell) -> Result<T, TxnError>,
    ) -> Result<T, TxnError> {
        let cell = self.cell(id)?;
        let _guard: MutexGuard<'_, ()> = match cell.op.try_lock() {
            Ok(g) => g,
            Err(TryLockError::WouldBlock) => return Err(TxnError::Busy(id.clone())),
            Err(TryLockError::Poisoned(p)) => p.into_inner(),
        };
        f(self, &cell)
    }

    fn emit(&self, cell: &Cell, event: TxEvent) -> Result<(), TxnError> {
        let id = {
            let txn = read(cell);
            txn.validate(&event).map_err(TxnError::Internal)?;
            txn.id.clone()
        };
        let rec = self.journal.append(&id, &event)?;
        cell.state
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .apply(&event, rec.timestamp)
            .map_err(TxnError::Internal)
    }

    /// Policy check for every staged action, then the acknowledgment gate.
    /// A denial fails the transaction before any handler runs.
    fn preflight(&self, cell: &Cell) -> Result<(), TxnError> {
        let txn = read(cell).clone();
        let radius = txn.policy_context.as_ref().ok_or_else(|| TxnError::NoPolicy(txn.id.clone()))?;
        for (i, staged) in txn.actions.iter().enumerate() {
            if let Decision::Deny(reason) = policy::check(&staged.action, radius) {
                let reason = reason.to_string();
                self.emit(cell, TxEvent::Transition { to: TxState::Executing })?;
                self.emit(cell, TxEvent::Error { message: format!("action {i} denied: {reason}") })?;
                // Nothing ran, so an atomic group has nothing to roll back.
                let to = if txn.atomic { TxState::RolledBack } else { TxState::Failed };
                self.emit(cell, TxEvent::Transition { to })?;
                return Err(TxnError::PolicyDenied { index: i, reason });
            }
        }
        if txn.needs_ack() {
            let mut reasons = txn.gates.clone();
            for i in txn.irreversible_actions() {
                reasons.push(format!("action {i} ({}) has no undo", txn.actions[i].action.name));
            }
            return Err(TxnError::AckRequired { id: txn.id, reasons });
        }
        Ok(())
    }

    fn atomic_locked(&self, cell: &Cell, runner: &dyn ActionRunner) -> Result<Transaction, TxnError> {
        let missing = read(cell).irreversible_actions();
        if !missing.is_empty() {
            return Err(TxnError::MissingUndo(missing));
        }
        self.preflight(cell)?;
        self.emit(cell, TxEvent::Transition { to: TxState::Executing })?;
        let n = read(cell).actions.len();
        for i in 0..n {
            let snapshot = read(cell).clone();
            let failure = match runner.run(&snapshot, i) {
                Ok(outcome) if outcome.succeeded() => {
                    self.emit(cell, TxEvent::Outcome { index: i, outcome })?;
                    continue;
                }
                Ok(outcome) => (outcome.structured_summary.clone(), outcome),
                Err(e) => (e.to_string(), e.into_outcome()),
            };
            self.emit(cell, TxEvent::Outcome { index: i, outcome: failure.1 })?;
            self.emit(cell, TxEvent::Error { message: format!("action {i} failed: {}", failure.0) })?;
            let done: Vec<usize> = (0..i).collect();
            let unreversed = self.compensate(cell, runner, &done)?;
            if unreversed.is_empty() {
                self.emit(cell, TxEvent::Transition { to: TxState::RolledBack })?;
            } else {
                log::error!("atomic rollback of {} left actions {:?} unreversed", read(cell).id, unreversed);
                self.emit(cell, TxEvent::Error { message: format!("ROLLBACK FAILED; unreversed actions: {unreversed:?}") })?;
                self.emit(cell, TxEvent::Transition { to: TxState::UndoFailed })?;
            }
            return Ok(read(cell).clone());
        }
        self.emit(cell, TxEvent::Transition { to: TxState::Executed })?;
        Ok(read(cell).clone())
    }

    /// Undoes `indices` in reverse order. Returns the ones left unreversed.
    fn compensate(&self, cell: &Cell, runner: &dyn ActionRunner, indices: &[usize]) -> Result<Vec<usize>, TxnError> {
        let mut unreversed = Vec::new();
        for &i in indices.iter().rev() {
            let snapshot = read(cell).clone();
            if !snapshot.actions[i].has_undo() {
                self.emit(cell, TxEvent::Note { message: format!("action {i} has no undo") })?;
                unreversed.push(i);
                continue;
            }
            let outcome = runner.undo(&snapshot, i).unwrap_or_else(RunError::into_outcome);
            let worked = outcome.succeeded();
            self.emit(cell, TxEvent::UndoOutcome { index: i, outcome })?;
            runner.undo_finished(&snapshot, i, worked);
            if !worked {
                unreversed.push(i);
            }
        }
        unreversed.reverse();
        Ok(unreversed)
    }
}

fn read(cell: &Cell) -> std::sync::RwLockReadGuard<'_, Transaction> {
    cell.state.read().unwrap_or_else(|p| p.into_inner())
}

fn invalid(txn: &Transaction, op: &'static str) -> TxnError {
    TxnError::InvalidState { id: txn.id.clone(), state: txn.state, op }
}
