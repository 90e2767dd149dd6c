//! Reversion registry: action signature → undo template.
//!
//! Entries come from developers (optionally asserted as guaranteed) or are
//! learned from generator-proposed undos. A generator entry whose undo is
//! observed to fail is suppressed for good, so the generator can be wrong
//! at most once per signature.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::action::{ActionSpec, UndoSpec};
use crate::records::{RecordError, RecordLog};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", content = "params", rename_all = "snake_case")]
pub enum MatchPolicy {
    ExactArgs,
    NameOnly,
    ParamSubset(Vec<String>),
}

impl MatchPolicy {
    fn specificity(&self) -> u8 {
        match self {
            MatchPolicy::ExactArgs => 2,
            MatchPolicy::ParamSubset(_) => 1,
            MatchPolicy::NameOnly => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSignature {
    pub api_name: String,
    pub match_policy: MatchPolicy,
    #[serde(default)]
    pub bound_params: BTreeMap<String, Value>,
}

impl ActionSignature {
    /// Binds every parameter of `action`.
    pub fn exact(action: &ActionSpec) -> Self {
        ActionSignature { api_name: action.name.clone(), match_policy: MatchPolicy::ExactArgs, bound_params: action.params.clone() }
    }

    pub fn name_only(api_name: &str) -> Self {
        ActionSignature { api_name: api_name.into(), match_policy: MatchPolicy::NameOnly, bound_params: BTreeMap::new() }
    }

    pub fn subset(api_name: &str, bound: impl IntoIterator<Item = (String, Value)>) -> Self {
        let bound_params: BTreeMap<String, Value> = bound.into_iter().collect();
        ActionSignature {
            api_name: api_name.into(),
            match_policy: MatchPolicy::ParamSubset(bound_params.keys().cloned().collect()),
            bound_params,
        }
    }

    pub fn validate(&self) -> Result<(), RegistryError> {
        let bad = |r: &str| Err(RegistryError::InvalidSignature(format!("{}: {r}", self.api_name)));
        if self.api_name.trim().is_empty() {
            return bad("empty api name");
        }
        match &self.match_policy {
            MatchPolicy::ParamSubset(names) if names.is_empty() => bad("ParamSubset needs at least one parameter"),
            MatchPolicy::ParamSubset(names) if names.iter().any(|n| !self.bound_params.contains_key(n)) => {
                bad("ParamSubset names a parameter with no bound value")
            }
            MatchPolicy::NameOnly if !self.bound_params.is_empty() => bad("NameOnly binds no parameters"),
            _ => Ok(()),
        }
    }

    pub fn matches(&self, action: &ActionSpec) -> bool {
        if self.api_name != action.name {
            return false;
        }
        match &self.match_policy {
            MatchPolicy::NameOnly => true,
            MatchPolicy::ExactArgs => {
                self.bound_params.len() == action.params.len()
                    && self.bound_params.iter().all(|(k, v)| action.params.get(k).is_some_and(|a| canonical_eq(v, a)))
            }
            MatchPolicy::ParamSubset(names) => names
                .iter()
                .all(|n| matches!((self.bound_params.get(n), action.params.get(n)), (Some(b), Some(a)) if canonical_eq(b, a))),
        }
    }

    /// Stable identity of the signature for de-duplication.
    pub fn key(&self) -> String {
        let params: BTreeMap<&String, Value> = self.bound_params.iter().map(|(k, v)| (k, canonicalize(v))).collect();
        json!({ "api": self.api_name, "policy": self.match_policy, "params": params }).to_string()
    }
}

/// Deep equality that ignores object key order and integer/float spelling.
pub fn canonical_eq(a: &Value, b: &Value) -> bool {
    canonicalize(a) == canonicalize(b)
}

fn canonicalize(v: &Value) -> Value {
    match v {
        Value::Number(n) => match n.as_f64() {
            Some(f) if f.fract() == 0.0 && f.abs() < 9.0e15 => json!(f as i64),
            Some(f) => json!(f),
            None => v.clone(),
        },
        Value::Array(items) => Value::Array(items.iter().map(canonicalize).collect()),
        Value::Object(map) => {
            let sorted: BTreeMap<&String, Value> = map.iter().map(|(k, v)| (k, canonicalize(v))).collect();
            json!(sorted)
        }
        other => other.clone(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryStatus {
    Untested,
    Verified,
    FailedOnce,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntrySource {
    Developer,
    Generator,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UndoVerdict {
    Worked,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReversionEntry {
    pub signature: ActionSignature,
    /// Undo with `{param}` placeholders filled from the matched action.
    pub undo_template: UndoSpec,
    pub status: EntryStatus,
    pub source: EntrySource,
    #[serde(default)]
    pub guaranteed: bool,
    /// Reserved for chaining-aware API metadata (commutativity and the
    /// like); stored and returned, never interpreted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chaining: Option<Value>,
}

impl ReversionEntry {
    pub fn developer(signature: ActionSignature, undo_template: UndoSpec, guaranteed: bool) -> Self {
        ReversionEntry { signature, undo_template, status: EntryStatus::Untested, source: EntrySource::Developer, guaranteed, chaining: None }
    }

    pub fn generator(signature: ActionSignature, undo_template: UndoSpec) -> Self {
        ReversionEntry { signature, undo_template, status: EntryStatus::Untested, source: EntrySource::Generator, guaranteed: false, chaining: None }
    }

    fn precedence(&self) -> (u8, u8, u8) {
        (
            (self.source == EntrySource::Developer) as u8,
            (self.status == EntryStatus::Verified) as u8,
            self.signature.match_policy.specificity(),
        )
    }
}

/// A lookup hit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Hit {
    pub undo: UndoSpec,
    pub source: EntrySource,
    pub status: EntryStatus,
    pub guaranteed: bool,
    pub signature: ActionSignature,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Registered {
    Inserted,
    Replaced,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Recorded {
    Updated(EntryStatus),
    Created(EntryStatus),
    /// Failure observed on a guaranteed developer entry; kept active.
    Contradiction,
}

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("invalid signature: {0}")]
    InvalidSignature(String),
    #[error("only developer entries may be guaranteed")]
    GuaranteedRequiresDeveloper,
    #[error(transparent)]
    Records(#[from] RecordError),
    #[error("registry record {seq}: {reason}")]
    BadRecord { seq: u64, reason: String },
}

pub struct Registry {
    entries: RwLock<Vec<ReversionEntry>>,
    log: Option<RecordLog>,
    guaranteed_only: bool,
}

impl Registry {
    pub fn in_memory() -> Self {
        Registry { entries: RwLock::new(Vec::new()), log: None, guaranteed_only: false }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self, RegistryError> {
        let (log, records, _) = RecordLog::open(path, false)?;
        let mut entries: Vec<ReversionEntry> = Vec::new();
        for r in records.into_iter().filter(|r| r.event_type == "entry") {
            let e: ReversionEntry =
                serde_json::from_value(r.payload).map_err(|e| RegistryError::BadRecord { seq: r.seq, reason: e.to_string() })?;
            upsert(&mut entries, e);
        }
        Ok(Registry { entries: RwLock::new(entries), log: Some(log), guaranteed_only: false })
    }

    /// Restrict lookups to developer-guaranteed entries.
    pub fn guaranteed_only(mut self, on: bool) -> Self {
        self.guaranteed_only = on;
        self
    }

    pub fn set_guaranteed_only(&mut self, on: bool) {
        self.guaranteed_only = on;
    }

    pub fn register(&self, entry: ReversionEntry) -> Result<Registered, RegistryError> {
        entry.signature.validate()?;
        if entry.guaranteed && entry.source != EntrySource::Developer {
            return Err(RegistryError::GuaranteedRequiresDeveloper);
        }
        let mut entries = self.entries.write().unwrap_or_else(|p| p.into_inner());
        let outcome = upsert(&mut entries, entry.clone());
        if outcome == Registered::Replaced {
            log::info!("registry: replaced {:?} entry for {}", entry.source, entry.signature.api_name);
            self.append("replaced", json!({ "signature": entry.signature, "source": entry.source }));
        }
        self.append("entry", json!(entry));
        Ok(outcome)
    }

    pub fn entries(&self) -> Vec<ReversionEntry> {
        self.entries.read().unwrap_or_else(|p| p.into_inner()).clone()
    }

    /// Highest-precedence usable entry matching `action`, with parameters
    /// substituted from the action.
    pub fn lookup(&self, action: &ActionSpec) -> Option<Hit> {
        let entries = self.entries.read().unwrap_or_else(|p| p.into_inner());
        entries
            .iter()
            .filter(|e| e.status != EntryStatus::FailedOnce || e.guaranteed)
            .filter(|e| !self.guaranteed_only || e.guaranteed)
            .filter(|e| e.signature.matches(action))
            .max_by_key(|e| e.precedence())
            .map(|e| Hit {
                undo: e.undo_template.substitute(&action.params),
                source: e.source,
                status: e.status,
                guaranteed: e.guaranteed,
                signature: e.signature.clone(),
            })
    }

    /// Records whether an undo worked. Unknown pairs become generator
    /// entries with an exact-argument signature.
    pub fn record_outcome(&self, signature: &ActionSignature, undo: &UndoSpec, verdict: UndoVerdict) -> Recorded {
        let mut entries = self.entries.write().unwrap_or_else(|p| p.into_inner());
        let key = signature.key();
        let target = entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.signature.key() == key && (e.status != EntryStatus::FailedOnce || e.guaranteed))
            .max_by_key(|(_, e)| e.precedence())
            .map(|(i, _)| i);
        let status = match verdict {
            UndoVerdict::Worked => EntryStatus::Verified,
            UndoVerdict::Failed => EntryStatus::FailedOnce,
        };
        match target {
            Some(i) if entries[i].guaranteed && verdict == UndoVerdict::Failed => {
                log::error!(
                    "registry: guaranteed undo for {} failed; developer assertion kept active",
                    entries[i].signature.api_name
                );
                self.append("contradiction", json!({ "signature": signature, "undo": undo }));
                Recorded::Contradiction
            }
            Some(i) => {
                entries[i].status = status;
                let snapshot = entries[i].clone();
                self.append("entry", json!(snapshot));
                Recorded::Updated(status)
            }
            None => {
                let mut e = ReversionEntry::generator(signature.clone(), undo.clone());
                e.status = status;
                upsert(&mut entries, e.clone());
                self.append("entry", json!(e));
                Recorded::Created(status)
            }
        }
    }

    fn append(&self, event_type: &str, payload: Value) {
        if let Some(log) = &self.log {
            if let Err(e) = log.append(None, event_type, payload, false) {
                log::error!("registry append failed: {e}");
            }
        }
    }
}

fn upsert(entries: &mut Vec<ReversionEntry>, entry: ReversionEntry) -> Registered {
    let key = entry.signature.key();
    match entries.iter_mut().find(|e| e.source == entry.source && e.signature.key() == key) {
        Some(slot) => {
            // A generator pair that failed stays suppressed, whatever is
            // learned or registered for the signature later.
            let poisoned = slot.source == EntrySource::Generator && slot.status == EntryStatus::FailedOnce;
            *slot = entry;
            if poisoned {
                slot.status = EntryStatus::FailedOnce;
            }
            Registered::Replaced
        }
        None => {
            entries.push(entry);
            Registered::Inserted
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::{Method, RestAction};
    use proptest::prelude::*;

    fn call(name: &str, params: &[(&str, Value)]) -> ActionSpec {
        let mut a = ActionSpec::rest(
            name,
            "slack",
            RestAction {
                method: Method::Post,
                url: format!("http://stub/{name}"),
                headers: Default::default(),
                body: String::new(),
                auth: Default::default(),
                dry_run: false,
            },
        );
        for (k, v) in params {
            a.params.insert((*k).into(), v.clone());
        }
        a
    }

    fn delete_template() -> UndoSpec {
        let mut u = call("delete_slack_message", &[]);
        u.params.insert("channel".into(), json!("{channel}"));
        u.params.insert("message_count".into(), json!("{message_count}"));
        u
    }

    #[test]
    fn param_subset_needs_both_params() {
        let reg = Registry::in_memory();
        let sig = ActionSignature::subset(
            "send_slack_message",
            [("channel".into(), json!("C1")), ("message_count".into(), json!(1))],
        );
        reg.register(ReversionEntry::developer(sig, delete_template(), false)).unwrap();
        let hit = reg.lookup(&call("send_slack_message", &[("channel", json!("C1")), ("message_count", json!(1)), ("text", json!("hi"))]));
        assert!(hit.is_some());
        assert!(reg.lookup(&call("send_slack_message", &[("channel", json!("C1")), ("message_count", json!(2))])).is_none());
        assert!(reg.lookup(&call("send_slack_message", &[("channel", json!("C1"))])).is_none());
    }

    #[test]
    fn exact_lookup_substitutes_params() {
        let reg = Registry::in_memory();
        let action = call("send_slack_message", &[("channel", json!("C")), ("message_count", json!(1))]);
        reg.register(ReversionEntry::generator(ActionSignature::exact(&action), delete_template())).unwrap();
        let hit = reg.lookup(&action).unwrap();
        assert_eq!(hit.undo.name, "delete_slack_message");
        assert_eq!(hit.undo.params["channel"], json!("C"));
        assert_eq!(hit.undo.params["message_count"], json!("1"));
    }

    #[test]
    fn empty_registry_misses() {
        assert!(Registry::in_memory().lookup(&call("x", &[])).is_none());
    }

    #[test]
    fn developer_shadows_generator() {
        let reg = Registry::in_memory();
        let action = call("send_x", &[]);
        let mut gen_undo = call("gen_undo", &[]);
        gen_undo.service = "gen".into();
        reg.register(ReversionEntry::generator(ActionSignature::exact(&action), gen_undo)).unwrap();
        reg.register(ReversionEntry::developer(ActionSignature::name_only("send_x"), call("dev_undo", &[]), false)).unwrap();
        let hit = reg.lookup(&action).unwrap();
        assert_eq!(hit.source, EntrySource::Developer);
        assert_eq!(hit.undo.name, "dev_undo");
    }

    #[test]
    fn validation_errors() {
        let reg = Registry::in_memory();
        let mut sig = ActionSignature::name_only("x");
        sig.match_policy = MatchPolicy::ParamSubset(vec![]);
        assert!(matches!(reg.register(ReversionEntry::developer(sig, call("u", &[]), false)), Err(RegistryError::InvalidSignature(_))));
        let mut gen = ReversionEntry::generator(ActionSignature::name_only("x"), call("u", &[]));
        gen.guaranteed = true;
        assert!(matches!(reg.register(gen), Err(RegistryError::GuaranteedRequiresDeveloper)));
    }

    #[test]
    fn duplicate_registration_replaces() {
        let reg = Registry::in_memory();
        let sig = ActionSignature::name_only("x");
        assert_eq!(reg.register(ReversionEntry::developer(sig.clone(), call("u1", &[]), false)).unwrap(), Registered::Inserted);
        assert_eq!(reg.register(ReversionEntry::developer(sig, call("u2", &[]), false)).unwrap(), Registered::Replaced);
        assert_eq!(reg.entries().len(), 1);
        assert_eq!(reg.lookup(&call("x", &[])).unwrap().undo.name, "u2");
    }

    #[test]
    fn worked_marks_verified_failed_suppresses() {
        let reg = Registry::in_memory();
        let action = call("send_x", &[("a", json!(1))]);
        let sig = ActionSignature::exact(&action);
        reg.register(ReversionEntry::generator(sig.clone(), call("undo_x", &[]))).unwrap();
        assert_eq!(reg.record_outcome(&sig, &call("undo_x", &[]), UndoVerdict::Worked), Recorded::Updated(EntryStatus::Verified));
        assert_eq!(reg.lookup(&action).unwrap().status, EntryStatus::Verified);
        reg.record_outcome(&sig, &call("undo_x", &[]), UndoVerdict::Failed);
        assert!(reg.lookup(&action).is_none());
    }

    #[test]
    fn guaranteed_entry_survives_failure() {
        let reg = Registry::in_memory();
        let sig = ActionSignature::name_only("send_x");
        reg.register(ReversionEntry::developer(sig.clone(), call("undo_x", &[]), true)).unwrap();
        assert_eq!(reg.record_outcome(&sig, &call("undo_x", &[]), UndoVerdict::Failed), Recorded::Contradiction);
        assert!(reg.lookup(&call("send_x", &[])).is_some());
    }

    #[test]
    fn guaranteed_only_mode_filters() {
        let reg = Registry::in_memory().guaranteed_only(true);
        reg.register(ReversionEntry::developer(ActionSignature::name_only("a"), call("ua", &[]), false)).unwrap();
        reg.register(ReversionEntry::developer(ActionSignature::name_only("b"), call("ub", &[]), true)).unwrap();
        assert!(reg.lookup(&call("a", &[])).is_none());
        assert!(reg.lookup(&call("b", &[])).is_some());
    }

    #[test]
    fn unknown_pair_is_learned() {
        let reg = Registry::in_memory();
        let action = call("send_y", &[("n", json!(3))]);
        let sig = ActionSignature::exact(&action);
        assert_eq!(reg.record_outcome(&sig, &call("undo_y", &[]), UndoVerdict::Worked), Recorded::Created(EntryStatus::Verified));
        assert_eq!(reg.lookup(&action).unwrap().undo.name, "undo_y");
    }

    #[test]
    fn canonical_equality() {
        assert!(canonical_eq(&json!({"a": [1, {"b": 2.0}]}), &json!({"a": [1.0, {"b": 2}]})));
        assert!(!canonical_eq(&json!([1, 2]), &json!([2, 1])));
    }

    #[test]
    fn persists_across_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("registry.jsonl");
        let action = call("send_z", &[]);
        {
            let reg = Registry::open(&path).unwrap();
            let sig = ActionSignature::exact(&action);
            reg.register(ReversionEntry::generator(sig.clone(), call("undo_z", &[]))).unwrap();
            reg.record_outcome(&sig, &call("undo_z", &[]), UndoVerdict::Failed);
        }
        let reg = Registry::open(&path).unwrap();
        assert_eq!(reg.entries()[0].status, EntryStatus::FailedOnce);
        assert!(reg.lookup(&action).is_none());
    }

    #[test]
    fn failed_generator_entry_stays_suppressed() {
        let reg = Registry::in_memory();
        let action = call("send_x", &[("a", json!(1))]);
        let sig = ActionSignature::exact(&action);
        reg.record_outcome(&sig, &call("undo_x", &[]), UndoVerdict::Failed);
        reg.register(ReversionEntry::generator(sig.clone(), call("undo_y", &[]))).unwrap();
        assert!(reg.lookup(&action).is_none());
        reg.record_outcome(&sig, &call("undo_y", &[]), UndoVerdict::Worked);
        assert!(reg.lookup(&action).is_none());
    }

    proptest! {
        #[test]
        fn lookup_is_pure(n in 0usize..5) {
            let reg = Registry::in_memory();
            for i in 0..n {
                reg.register(ReversionEntry::generator(ActionSignature::name_only(&format!("a{i}")), call("u", &[]))).unwrap();
            }
            let probe = call("a0", &[]);
            prop_assert_eq!(reg.lookup(&probe), reg.lookup(&probe));
        }
    }
}
