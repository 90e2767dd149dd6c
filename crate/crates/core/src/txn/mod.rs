//! Transaction lifecycle: stage, execute, inspect, then commit or undo.
//!
//! Every mutation of a [`Transaction`] is expressed as a [`TxEvent`], written
//! to the journal first and then applied in memory through the same
//! [`Transaction::apply`] used by replay, so a replayed journal reproduces
//! the in-memory table exactly.

mod journal;
mod manager;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::action::{ActionSpec, Kind, Mode, UndoSpec};
use crate::ids::TxnId;
use crate::policy::BlastRadius;
use crate::revtest::Verdict;

pub use journal::{replay_records, Journal, ReplayError, ReplayReport, TxEvent};
pub use manager::{ActionRunner, RunError, TxnError, TxnManager};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxState {
    Pending,
    Executing,
    Executed,
    Failed,
    Committed,
    Undoing,
    Undone,
    UndoFailed,
    RolledBack,
}

impl TxState {
    pub const ALL: [TxState; 9] = [
        TxState::Pending,
        TxState::Executing,
        TxState::Executed,
        TxState::Failed,
        TxState::Committed,
        TxState::Undoing,
        TxState::Undone,
        TxState::UndoFailed,
        TxState::RolledBack,
    ];

    /// No further operations are accepted from a terminal state.
    pub fn is_terminal(self) -> bool {
        matches!(self, TxState::Committed | TxState::Undone | TxState::UndoFailed | TxState::RolledBack)
    }

    pub fn can_transition(self, to: TxState, atomic: bool) -> bool {
        use TxState::*;
        match (self, to) {
            (Pending, Executing) => true,
            (Executing, Executed) | (Executing, Failed) => true,
            (Executing, RolledBack) | (Executing, UndoFailed) => atomic,
            (Executed, Committed) | (Executed, Undoing) => true,
            // Undo of the completed prefix of a failed non-atomic transaction.
            (Failed, Undoing) => !atomic,
            (Undoing, Undone) | (Undoing, UndoFailed) => true,
            _ => false,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TxState::Pending => "pending",
            TxState::Executing => "executing",
            TxState::Executed => "executed",
            TxState::Failed => "failed",
            TxState::Committed => "committed",
            TxState::Undoing => "undoing",
            TxState::Undone => "undone",
            TxState::UndoFailed => "undo_failed",
            TxState::RolledBack => "rolled_back",
        }
    }

    pub fn parse(s: &str) -> Option<TxState> {
        TxState::ALL.into_iter().find(|st| st.as_str().eq_ignore_ascii_case(s))
    }
}

impl std::fmt::Display for TxState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where a staged action's undo came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UndoSource {
    DeveloperRegistered,
    GeneratorProposed,
    RegistryHit,
    /// Undo is a restore of a handler-held snapshot or engine transaction.
    Snapshot,
    None,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub exit_status: i32,
    #[serde(with = "crate::serde_bytes")]
    pub stdout: Vec<u8>,
    #[serde(with = "crate::serde_bytes")]
    pub stderr: Vec<u8>,
    /// Handler-produced digest the operator validates.
    pub structured_summary: String,
    pub duration_ms: u64,
}

impl ExecutionOutcome {
    pub fn succeeded(&self) -> bool {
        self.exit_status == 0
    }

    pub fn ok(summary: impl Into<String>) -> Self {
        ExecutionOutcome { exit_status: 0, ..Self::failed(summary) }
    }

    pub fn failed(summary: impl Into<String>) -> Self {
        ExecutionOutcome {
            exit_status: 1,
            stdout: Vec::new(),
            stderr: Vec::new(),
            structured_summary: summary.into(),
            duration_ms: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagedAction {
    pub action: ActionSpec,
    pub undo: Option<UndoSpec>,
    pub undo_source: UndoSource,
    pub outcome: Option<ExecutionOutcome>,
    pub undo_outcome: Option<ExecutionOutcome>,
    pub verdict: Option<Verdict>,
}

impl StagedAction {
    pub fn has_undo(&self) -> bool {
        self.undo.is_some() || self.undo_source == UndoSource::Snapshot
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transaction {
    pub id: TxnId,
    pub prompt: String,
    pub mode: Mode,
    pub kind: Kind,
    pub atomic: bool,
    pub actions: Vec<StagedAction>,
    pub state: TxState,
    pub created_at: DateTime<Utc>,
    pub resolved_at: Option<DateTime<Utc>>,
    pub policy_context: Option<BlastRadius>,
    /// Operator acknowledged irreversible or not-reversible-verdict actions.
    pub ack_irreversible: bool,
    /// Reasons execution is held pending acknowledgment.
    pub gates: Vec<String>,
    pub notes: Vec<String>,
    /// Last error that stopped progress, if any.
    pub error: Option<String>,
}

impl Transaction {
    fn new(id: TxnId, prompt: String, mode: Mode, kind: Kind, atomic: bool, at: DateTime<Utc>) -> Self {
        Transaction {
            id,
            prompt,
            mode,
            kind,
            atomic,
            actions: Vec::new(),
            state: TxState::Pending,
            created_at: at,
            resolved_at: None,
            policy_context: None,
            ack_irreversible: false,
            gates: Vec::new(),
            notes: Vec::new(),
            error: None,
        }
    }

    /// Whether the operator can still ask for an undo.
    pub fn undo_available(&self) -> bool {
        matches!(self.state, TxState::Executed | TxState::Failed)
            && self.actions.iter().filter(|a| a.outcome.as_ref().is_some_and(|o| o.succeeded())).all(|a| a.has_undo())
    }

    /// Staged actions that would run without any way back.
    pub fn irreversible_actions(&self) -> Vec<usize> {
        self.actions.iter().enumerate().filter(|(_, a)| !a.has_undo()).map(|(i, _)| i).collect()
    }

    pub fn needs_ack(&self) -> bool {
        !self.ack_irreversible && (!self.gates.is_empty() || !self.irreversible_actions().is_empty())
    }

    /// Applies one journaled event. Fails on events that are illegal in the
    /// current state, which during replay means the journal is inconsistent.
    pub fn apply(&mut self, event: &TxEvent, at: DateTime<Utc>) -> Result<(), String> {
        self.validate(event)?;
        match event {
            TxEvent::Begun { .. } => return Err("duplicate begin".into()),
            TxEvent::Staged { action, undo, source } => {
                self.actions.push(StagedAction {
                    action: action.clone(),
                    undo: undo.clone(),
                    undo_source: *source,
                    outcome: None,
                    undo_outcome: None,
                    verdict: None,
                });
            }
            TxEvent::UndoAttached { index, undo, source } => {
                let a = self.action_mut(*index)?;
                a.undo = undo.clone();
                a.undo_source = *source;
            }
            TxEvent::PolicyResolved { radius } => self.policy_context = Some(radius.clone()),
            TxEvent::Gated { reason } => self.gates.push(reason.clone()),
            TxEvent::Acknowledged => {
                self.ack_irreversible = true;
                if let Some(radius) = &mut self.policy_context {
                    radius.ack_irreversible = true;
                }
            }
            TxEvent::VerdictRecorded { index, verdict } => self.action_mut(*index)?.verdict = Some(verdict.clone()),
            TxEvent::Transition { to } => {
                self.state = *to;
                if to.is_terminal() {
                    self.resolved_at = Some(at);
                }
            }
            TxEvent::Outcome { index, outcome } => self.action_mut(*index)?.outcome = Some(outcome.clone()),
            TxEvent::UndoOutcome { index, outcome } => self.action_mut(*index)?.undo_outcome = Some(outcome.clone()),
            TxEvent::Error { message } => self.error = Some(message.clone()),
            TxEvent::Note { message } => self.notes.push(message.clone()),
        }
        Ok(())
    }

    /// Checks that `event` is legal now without changing anything.
    pub fn validate(&self, event: &TxEvent) -> Result<(), String> {
        let index = match event {
            TxEvent::Begun { .. } => return Err("duplicate begin".into()),
            TxEvent::Staged { .. } if self.state != TxState::Pending => {
                return Err(format!("stage in state {}", self.state))
            }
            TxEvent::Transition { to } if !self.state.can_transition(*to, self.atomic) => {
                return Err(format!("illegal transition {} -> {}", self.state, to))
            }
            TxEvent::UndoAttached { index, .. }
            | TxEvent::VerdictRecorded { index, .. }
            | TxEvent::Outcome { index, .. }
            | TxEvent::UndoOutcome { index, .. } => *index,
            _ => return Ok(()),
        };
        if index >= self.actions.len() {
            return Err(format!("action index {index} out of range ({})", self.actions.len()));
        }
        Ok(())
    }

    fn action_mut(&mut self, index: usize) -> Result<&mut StagedAction, String> {
        let len = self.actions.len();
        self.actions.get_mut(index).ok_or_else(|| format!("action index {index} out of range ({len})"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn legal_targets(from: TxState, atomic: bool) -> Vec<TxState> {
        TxState::ALL.into_iter().filter(|to| from.can_transition(*to, atomic)).collect()
    }

    #[test]
    fn terminal_states_have_no_exits() {
        for s in TxState::ALL.into_iter().filter(|s| s.is_terminal()) {
            assert!(legal_targets(s, true).is_empty(), "{s}");
            assert!(legal_targets(s, false).is_empty(), "{s}");
        }
    }

    #[test]
    fn rolled_back_only_for_atomic() {
        assert!(TxState::Executing.can_transition(TxState::RolledBack, true));
        assert!(!TxState::Executing.can_transition(TxState::RolledBack, false));
    }

    #[test]
    fn state_names_round_trip() {
        for s in TxState::ALL {
            assert_eq!(TxState::parse(s.as_str()), Some(s));
        }
    }

    proptest! {
        // Random transition requests: illegal ones are rejected without
        // changing state, legal ones land exactly on the requested state.
        #[test]
        fn state_machine_soundness(atomic: bool, steps in proptest::collection::vec(0usize..9, 1..40)) {
            let mut t = Transaction::new(TxnId::fresh(), "p".into(), Mode::ChatCompletion, Kind::Fs, atomic, Utc::now());
            for s in steps {
                let to = TxState::ALL[s];
                let before = t.state;
                let legal = before.can_transition(to, atomic);
                let res = t.apply(&TxEvent::Transition { to }, Utc::now());
                prop_assert_eq!(res.is_ok(), legal);
                prop_assert_eq!(t.state, if legal { to } else { before });
                prop_assert_eq!(t.resolved_at.is_some(), t.state.is_terminal());
            }
        }
    }
}
