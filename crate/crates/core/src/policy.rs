//! Damage confinement: which services and capability levels a transaction
//! may touch, and the veto on actions outside that set.
//!
//! Classification is fail-closed: an action whose name (or SQL leading
//! keyword) cannot be classified as Read or Write is denied.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use globset::Glob;
use serde::{Deserialize, Serialize};

use crate::action::{ActionBody, ActionSpec};
use crate::records::{self, RecordError, RecordLog};
use crate::vault::ServiceSelector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Capability {
    Read,
    Write,
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Capability::Read => "read",
            Capability::Write => "write",
        })
    }
}

pub type CapSet = BTreeSet<Capability>;

pub fn read_write() -> CapSet {
    CapSet::from([Capability::Read, Capability::Write])
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternClass {
    /// Glob over action names, e.g. `send_*`.
    pub pattern: String,
    pub class: Capability,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyRule {
    pub service_name: String,
    pub capabilities: CapSet,
    #[serde(default)]
    pub action_name_patterns: Vec<PatternClass>,
}

impl PolicyRule {
    pub fn new(service: &str, caps: impl IntoIterator<Item = Capability>) -> Self {
        PolicyRule { service_name: service.into(), capabilities: caps.into_iter().collect(), action_name_patterns: Vec::new() }
    }

    pub fn classify_as(mut self, pattern: &str, class: Capability) -> Self {
        self.action_name_patterns.push(PatternClass { pattern: pattern.into(), class });
        self
    }

    /// First matching pattern wins.
    fn classify(&self, name: &str) -> Option<Capability> {
        self.action_name_patterns.iter().find_map(|p| {
            Glob::new(&p.pattern).ok().filter(|g| g.compile_matcher().is_match(name)).map(|_| p.class)
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("invalid policy rule for {service:?}: {reason}")]
    Invalid { service: String, reason: String },
    #[error(transparent)]
    Records(#[from] RecordError),
    #[error("policy file record {seq}: {reason}")]
    BadRecord { seq: u64, reason: String },
}

/// The rule set, persisted one rule per record.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyRules {
    pub rules: Vec<PolicyRule>,
}

impl PolicyRules {
    pub fn new(rules: Vec<PolicyRule>) -> Result<Self, PolicyError> {
        let set = PolicyRules { rules };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let mut seen = BTreeSet::new();
        for r in &self.rules {
            let bad = |reason: String| PolicyError::Invalid { service: r.service_name.clone(), reason };
            if r.service_name.trim().is_empty() {
                return Err(bad("empty service name".into()));
            }
            if !seen.insert(r.service_name.as_str()) {
                return Err(bad("duplicate rule for service".into()));
            }
            for p in &r.action_name_patterns {
                Glob::new(&p.pattern).map_err(|e| bad(format!("pattern {:?}: {e}", p.pattern)))?;
            }
        }
        Ok(())
    }

    pub fn rule_for(&self, service: &str) -> Option<&PolicyRule> {
        self.rules.iter().find(|r| r.service_name == service)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PolicyError> {
        let (records, _) = RecordLog::read(path)?;
        let rules = records
            .into_iter()
            .filter(|r| r.event_type == "rule")
            .map(|r| serde_json::from_value(r.payload).map_err(|e| PolicyError::BadRecord { seq: r.seq, reason: e.to_string() }))
            .collect::<Result<Vec<PolicyRule>, _>>()?;
        PolicyRules::new(rules)
    }

    /// Replaces the whole file with this rule set.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PolicyError> {
        self.validate()?;
        let entries: Vec<_> = self
            .rules
            .iter()
            .map(|r| (None, "rule".to_owned(), serde_json::to_value(r).expect("rules serialize")))
            .collect();
        records::rewrite(path, &entries, false)?;
        Ok(())
    }
}

/// The services and capabilities one transaction may touch. An empty map
/// denies everything.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlastRadius {
    pub allowed: BTreeMap<String, CapSet>,
    pub resolved_from: String,
    pub ack_irreversible: bool,
    /// Classification rules captured at resolution time.
    #[serde(default)]
    pub rules: Vec<PolicyRule>,
}

impl BlastRadius {
    pub fn deny_all(resolved_from: &str) -> Self {
        BlastRadius { resolved_from: resolved_from.into(), ..Default::default() }
    }

    /// Adds an explicit grant, narrowed by any rule for the service.
    pub fn grant(&mut self, service: &str, caps: CapSet) {
        let caps = match self.rules.iter().find(|r| r.service_name == service) {
            Some(rule) => caps.intersection(&rule.capabilities).copied().collect(),
            None => caps,
        };
        self.allowed.insert(service.into(), caps);
    }

    pub fn services(&self) -> BTreeSet<String> {
        self.allowed.keys().cloned().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum DenyReason {
    ServiceNotInRadius { service: String },
    WriteNotPermitted { service: String, action: String },
    ReadNotPermitted { service: String, action: String },
    Unclassified { action: String },
}

impl fmt::Display for DenyReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DenyReason::ServiceNotInRadius { service } => {
                write!(f, "service {service:?} is outside this transaction's blast radius")
            }
            DenyReason::WriteNotPermitted { service, action } => {
                write!(f, "{action:?} writes to {service:?}, which is granted read-only")
            }
            DenyReason::ReadNotPermitted { service, action } => {
                write!(f, "{action:?} reads from {service:?}, which is not granted read")
            }
            DenyReason::Unclassified { action } => {
                write!(f, "cannot classify {action:?} as read or write; denied")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Decision {
    Allow,
    Deny(DenyReason),
}

impl Decision {
    pub fn is_allow(&self) -> bool {
        matches!(self, Decision::Allow)
    }
}

const WRITE_VERBS: &[&str] = &[
    "send", "post", "delete", "put", "create", "update", "write", "remove", "insert", "modify", "patch", "move",
    "rename", "copy", "append", "chmod", "mkdir", "rm", "mv", "cp", "touch", "set", "add", "drop", "edit", "upload",
    "truncate", "replace", "reply", "invite", "archive", "alter", "grant", "revoke", "transfer", "pay",
];
const READ_VERBS: &[&str] =
    &["get", "list", "read", "fetch", "search", "show", "view", "find", "query", "download", "cat", "ls", "stat", "describe", "select", "check"];

fn tokens(name: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut prev_lower = false;
    for c in name.chars() {
        if !c.is_ascii_alphanumeric() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            prev_lower = false;
            continue;
        }
        if c.is_ascii_uppercase() && prev_lower && !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        prev_lower = c.is_ascii_lowercase() || c.is_ascii_digit();
        cur.push(c.to_ascii_lowercase());
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn verb_matches(token: &str, verb: &str) -> bool {
    token == verb
        || token.strip_prefix(verb).is_some_and(|rest| matches!(rest, "s" | "d" | "ed" | "ing" | "es"))
        || (verb.ends_with('e') && token.strip_prefix(&verb[..verb.len() - 1]).is_some_and(|rest| rest == "ing"))
}

/// Built-in name classifier: any write verb makes the action a write.
pub fn classify_name(name: &str) -> Option<Capability> {
    let toks = tokens(name);
    let any = |verbs: &[&str]| toks.iter().any(|t| verbs.iter().any(|v| verb_matches(t, v)));
    if any(WRITE_VERBS) {
        Some(Capability::Write)
    } else if any(READ_VERBS) {
        Some(Capability::Read)
    } else {
        None
    }
}

/// Leading-keyword classification for SQL statements.
pub fn classify_sql(statement: &str) -> Option<Capability> {
    let keyword = statement
        .trim_start()
        .split(|c: char| !c.is_ascii_alphabetic())
        .next()
        .unwrap_or_default()
        .to_ascii_uppercase();
    match keyword.as_str() {
        "SELECT" => Some(Capability::Read),
        "INSERT" | "UPDATE" | "DELETE" | "REPLACE" | "CREATE" | "DROP" | "ALTER" | "TRUNCATE" | "RENAME" => {
            Some(Capability::Write)
        }
        _ => None,
    }
}

pub fn classify(action: &ActionSpec, rules: &[PolicyRule]) -> Option<Capability> {
    if let Some(c) = rules.iter().find(|r| r.service_name == action.service).and_then(|r| r.classify(&action.name)) {
        return Some(c);
    }
    match &action.body {
        ActionBody::Db(db) => classify_sql(&db.statement),
        _ => classify_name(&action.name),
    }
}

/// Allow iff the action's service is in the radius and its classified
/// capability is granted there.
pub fn check(action: &ActionSpec, radius: &BlastRadius) -> Decision {
    let Some(caps) = radius.allowed.get(&action.service) else {
        return Decision::Deny(DenyReason::ServiceNotInRadius { service: action.service.clone() });
    };
    let Some(class) = classify(action, &radius.rules) else {
        return Decision::Deny(DenyReason::Unclassified { action: action.name.clone() });
    };
    if caps.contains(&class) {
        return Decision::Allow;
    }
    let (service, name) = (action.service.clone(), action.name.clone());
    Decision::Deny(match class {
        Capability::Write => DenyReason::WriteNotPermitted { service, action: name },
        Capability::Read => DenyReason::ReadNotPermitted { service, action: name },
    })
}

/// Resolves the blast radius for a prompt: the services the selector picks
/// from `services`, each with its rule's capabilities (Read+Write when no
/// rule exists).
pub fn resolve(prompt: &str, services: &[String], rules: &PolicyRules, selector: &dyn ServiceSelector) -> BlastRadius {
    let mut radius = BlastRadius { resolved_from: prompt.to_owned(), rules: rules.rules.clone(), ..Default::default() };
    for s in selector.select(prompt, services) {
        let caps = rules.rule_for(&s).map(|r| r.capabilities.clone()).unwrap_or_else(read_write);
        radius.allowed.insert(s, caps);
    }
    radius
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::{Method, RestAction};
    use crate::vault::SubstringSelector;
    use proptest::prelude::*;

    fn rest(name: &str, service: &str) -> ActionSpec {
        ActionSpec::rest(
            name,
            service,
            RestAction {
                method: Method::Post,
                url: "http://localhost/".into(),
                headers: Default::default(),
                body: String::new(),
                auth: Default::default(),
                dry_run: false,
            },
        )
    }

    fn services() -> Vec<String> {
        vec!["slack".into(), "bank".into(), "email".into()]
    }

    #[test]
    fn slack_prompt_resolves_to_slack_only() {
        let r = resolve("I would like to send a slack message", &services(), &PolicyRules::default(), &SubstringSelector);
        assert_eq!(r.allowed, BTreeMap::from([("slack".to_string(), read_write())]));
    }

    #[test]
    fn unmatched_prompt_is_deny_all() {
        let r = resolve("water the plants", &services(), &PolicyRules::default(), &SubstringSelector);
        assert!(r.allowed.is_empty());
        assert!(matches!(check(&rest("send_slack_message", "slack"), &r), Decision::Deny(DenyReason::ServiceNotInRadius { .. })));
    }

    #[test]
    fn read_only_email_rule_applies() {
        let rules = PolicyRules::new(vec![PolicyRule::new("email", [Capability::Read])]).unwrap();
        let r = resolve("read my email", &services(), &rules, &SubstringSelector);
        assert_eq!(r.allowed["email"], CapSet::from([Capability::Read]));
        assert_eq!(check(&rest("read_emails", "email"), &r), Decision::Allow);
        assert!(matches!(check(&rest("send_email", "email"), &r), Decision::Deny(DenyReason::WriteNotPermitted { .. })));
    }

    #[test]
    fn send_slack_allowed_under_read_write() {
        let r = resolve("send a slack message", &services(), &PolicyRules::default(), &SubstringSelector);
        assert_eq!(check(&rest("send_slack_message", "slack"), &r), Decision::Allow);
    }

    #[test]
    fn unclassifiable_names_fail_closed() {
        let r = resolve("slack", &services(), &PolicyRules::default(), &SubstringSelector);
        assert!(matches!(check(&rest("frobnicate", "slack"), &r), Decision::Deny(DenyReason::Unclassified { .. })));
    }

    #[test]
    fn rule_patterns_take_precedence() {
        let rules = PolicyRules::new(vec![
            PolicyRule::new("slack", [Capability::Read]).classify_as("frobnicate*", Capability::Read)
        ])
        .unwrap();
        let r = resolve("slack", &services(), &rules, &SubstringSelector);
        assert_eq!(check(&rest("frobnicate_all", "slack"), &r), Decision::Allow);
    }

    #[test]
    fn name_classifier_examples() {
        assert_eq!(classify_name("send_slack_message"), Some(Capability::Write));
        assert_eq!(classify_name("listMessages"), Some(Capability::Read));
        assert_eq!(classify_name("get_address"), Some(Capability::Read));
        assert_eq!(classify_name("get_and_delete"), Some(Capability::Write));
        assert_eq!(classify_name("creating_file"), Some(Capability::Write));
        assert_eq!(classify_name("zzz"), None);
    }

    #[test]
    fn sql_classifier_examples() {
        assert_eq!(classify_sql("  select * from t"), Some(Capability::Read));
        assert_eq!(classify_sql("INSERT INTO t VALUES (1)"), Some(Capability::Write));
        assert_eq!(classify_sql("create table x(a)"), Some(Capability::Write));
        assert_eq!(classify_sql("PRAGMA foo"), None);
    }

    #[test]
    fn invalid_rules_rejected() {
        assert!(PolicyRules::new(vec![PolicyRule::new("", [])]).is_err());
        assert!(PolicyRules::new(vec![PolicyRule::new("a", []).classify_as("[", Capability::Read)]).is_err());
        assert!(PolicyRules::new(vec![PolicyRule::new("a", []), PolicyRule::new("a", [])]).is_err());
    }

    #[test]
    fn rules_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.jsonl");
        let rules = PolicyRules::new(vec![
            PolicyRule::new("email", [Capability::Read]).classify_as("peek_*", Capability::Read),
            PolicyRule::new("slack", [Capability::Read, Capability::Write]),
        ])
        .unwrap();
        rules.save(&path).unwrap();
        assert_eq!(PolicyRules::load(&path).unwrap(), rules);
    }

    proptest! {
        // Removing services or capabilities from a radius never turns a
        // Deny into an Allow.
        #[test]
        fn shrinking_radius_is_monotone(
            name_idx in 0usize..6,
            svc_idx in 0usize..3,
            grants in proptest::collection::vec((0usize..3, any::<bool>(), any::<bool>()), 0..4),
            drop_mask in proptest::collection::vec(any::<bool>(), 4),
        ) {
            let names = ["send_x", "get_x", "delete_x", "list_x", "weird", "update_x"];
            let svcs = ["slack", "bank", "email"];
            let action = rest(names[name_idx], svcs[svc_idx]);
            let mut big = BlastRadius::deny_all("p");
            for (s, r, w) in &grants {
                let mut caps = CapSet::new();
                if *r { caps.insert(Capability::Read); }
                if *w { caps.insert(Capability::Write); }
                big.allowed.insert(svcs[*s].into(), caps);
            }
            let mut small = big.clone();
            for (i, svc) in svcs.iter().enumerate() {
                if drop_mask[i] {
                    small.allowed.remove(*svc);
                } else if drop_mask[3] {
                    if let Some(c) = small.allowed.get_mut(*svc) { c.remove(&Capability::Write); }
                }
            }
            if !check(&action, &big).is_allow() {
                prop_assert!(!check(&action, &small).is_allow());
            }
        }
    }
}
