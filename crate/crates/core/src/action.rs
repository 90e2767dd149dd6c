//! Executable actions and their compensations.
//!
//! An [`ActionSpec`] is what the generator proposes and what handlers run.
//! Undo specs use the same type. Every string field may carry `{param}`
//! placeholders which [`ActionSpec::substitute`] fills from named values.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ChatCompletion,
    FunctionCalling,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Rest,
    Db,
    Fs,
}

impl Kind {
    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Rest => "rest",
            Kind::Db => "db",
            Kind::Fs => "fs",
        }
    }

    pub fn parse(s: &str) -> Option<Kind> {
        match s.to_ascii_lowercase().as_str() {
            "rest" => Some(Kind::Rest),
            "db" => Some(Kind::Db),
            "fs" => Some(Kind::Fs),
            _ => None,
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which undo strategy a DB or FS action runs under.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UndoPolicy {
    /// Execute immediately; undo is a generated compensating operation.
    Reversal,
    /// Execute inside a held snapshot or engine transaction.
    #[default]
    Versioning,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    Get,
    Post,
    Put,
    Patch,
    Delete,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Get => "GET",
            Method::Post => "POST",
            Method::Put => "PUT",
            Method::Patch => "PATCH",
            Method::Delete => "DELETE",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RestAuth {
    #[default]
    None,
    /// Inline vault secret injected into the named header.
    ApiKeyHeader { header: String },
    /// Token read from the vault's file credential at dispatch, sent as `Authorization: Bearer`.
    BearerTokenFile,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RestAction {
    pub method: Method,
    pub url: String,
    #[serde(default)]
    pub headers: BTreeMap<String, String>,
    #[serde(default)]
    pub body: String,
    #[serde(default)]
    pub auth: RestAuth,
    /// Reserved for provider-side preview calls; carried but not acted on.
    #[serde(default)]
    pub dry_run: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DbAction {
    pub statement: String,
    #[serde(default)]
    pub policy: UndoPolicy,
    pub connection_ref: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FsAction {
    /// Shell-form operation, run with the scope as working directory.
    pub script: String,
    /// Path relative to the managed root; `.` is the root itself.
    #[serde(default = "default_scope")]
    pub scope: String,
    #[serde(default)]
    pub policy: UndoPolicy,
}

fn default_scope() -> String {
    ".".to_owned()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ActionBody {
    Rest(RestAction),
    Db(DbAction),
    Fs(FsAction),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpec {
    /// API or operation name, used for capability classification and
    /// reversion-registry signatures.
    pub name: String,
    /// Service the action touches; empty means "derive from the body".
    #[serde(default)]
    pub service: String,
    #[serde(default)]
    pub params: BTreeMap<String, Value>,
    #[serde(flatten)]
    pub body: ActionBody,
}

/// Undo actions share the action representation.
pub type UndoSpec = ActionSpec;

impl ActionSpec {
    pub fn kind(&self) -> Kind {
        match self.body {
            ActionBody::Rest(_) => Kind::Rest,
            ActionBody::Db(_) => Kind::Db,
            ActionBody::Fs(_) => Kind::Fs,
        }
    }

    pub fn rest(name: &str, service: &str, action: RestAction) -> Self {
        ActionSpec { name: name.into(), service: service.into(), params: BTreeMap::new(), body: ActionBody::Rest(action) }
    }

    pub fn db(name: &str, connection_ref: &str, statement: &str, policy: UndoPolicy) -> Self {
        ActionSpec {
            name: name.into(),
            service: connection_ref.into(),
            params: BTreeMap::new(),
            body: ActionBody::Db(DbAction {
                statement: statement.into(),
                policy,
                connection_ref: connection_ref.into(),
            }),
        }
    }

    pub fn fs(name: &str, script: &str, policy: UndoPolicy) -> Self {
        ActionSpec {
            name: name.into(),
            service: "fs".into(),
            params: BTreeMap::new(),
            body: ActionBody::Fs(FsAction { script: script.into(), scope: default_scope(), policy }),
        }
    }

    pub fn with_param(mut self, name: &str, value: impl Into<Value>) -> Self {
        self.params.insert(name.into(), value.into());
        self
    }

    pub fn undo_policy(&self) -> Option<UndoPolicy> {
        match &self.body {
            ActionBody::Rest(_) => None,
            ActionBody::Db(d) => Some(d.policy),
            ActionBody::Fs(f) => Some(f.policy),
        }
    }

    /// Replaces `{name}` in every string field (params included) with the
    /// rendering of `values[name]`. Unknown placeholders are left as is.
    pub fn substitute(&self, values: &BTreeMap<String, Value>) -> ActionSpec {
        let mut tree = serde_json::to_value(self).expect("action specs always serialize");
        substitute_value(&mut tree, values);
        serde_json::from_value(tree).expect("substitution preserves shape")
    }

    /// Maps every string leaf through `f`.
    pub fn map_strings(&self, f: &mut dyn FnMut(&str) -> String) -> ActionSpec {
        let mut tree = serde_json::to_value(self).expect("action specs always serialize");
        map_value(&mut tree, f);
        serde_json::from_value(tree).expect("string mapping preserves shape")
    }

    /// Every string leaf, in a stable order.
    pub fn strings(&self) -> Vec<String> {
        let tree = serde_json::to_value(self).expect("action specs always serialize");
        let mut out = Vec::new();
        collect_strings(&tree, &mut out);
        out
    }
}

/// Renders a parameter for substitution: strings verbatim, everything else
/// as canonical JSON.
pub fn render_param(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

pub fn fill_template(text: &str, values: &BTreeMap<String, Value>) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if is_placeholder_name(&after[..close]) && values.contains_key(&after[..close]) => {
                out.push_str(&render_param(&values[&after[..close]]));
                rest = &after[close + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

fn is_placeholder_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn substitute_value(v: &mut Value, values: &BTreeMap<String, Value>) {
    map_value(v, &mut |s| fill_template(s, values));
}

fn map_value(v: &mut Value, f: &mut dyn FnMut(&str) -> String) {
    match v {
        Value::String(s) => *s = f(s),
        Value::Array(items) => items.iter_mut().for_each(|i| map_value(i, f)),
        Value::Object(map) => map.values_mut().for_each(|i| map_value(i, f)),
        _ => {}
    }
}

fn collect_strings(v: &Value, out: &mut Vec<String>) {
    match v {
        Value::String(s) => out.push(s.clone()),
        Value::Array(items) => items.iter().for_each(|i| collect_strings(i, out)),
        Value::Object(map) => map.values().for_each(|i| collect_strings(i, out)),
        _ => {}
    }
}
