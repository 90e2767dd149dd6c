//! The untrusted action proposer.
//!
//! A [`Generator`] renders a versioned prompt template, sends it through a
//! [`Backend`] (scripted [`MockBackend`] or HTTP [`RemoteBackend`]) and
//! parses the fenced-block reply. Every outbound payload passes a leak
//! guard first; a reply that does not parse gets one retry with a
//! corrective suffix.

pub mod mock;
pub mod parse;
pub mod remote;

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub use mock::{MockBackend, MockRule};
pub use remote::{RemoteBackend, RemoteConfig};

use crate::action::{ActionSpec, Kind, Mode, UndoSpec};
use crate::policy::Capability;
use crate::revtest::Comparator;

pub const TEMPLATE_VERSION: &str = "v1";

const ACTION_PAIR: &str = include_str!("templates/action_pair.v1.txt");
const UNDO_ONLY: &str = include_str!("templates/undo_only.v1.txt");
const TESTBED: &str = include_str!("templates/testbed.v1.txt");
const FUNCTION_CALL: &str = include_str!("templates/function_call.v1.txt");
const RETRY_SUFFIX: &str = include_str!("templates/retry_suffix.v1.txt");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Want {
    ActionPair,
    UndoOnly,
    TestBed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorRequest {
    pub mode: Mode,
    pub kind: Kind,
    pub sanitized_prompt: String,
    /// Schema snapshot, directory tree, function set rendering or the
    /// executed action, depending on `want`.
    pub context: String,
    pub want: Want,
}

impl GeneratorRequest {
    /// Stable key for scripted responses.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("requests serialize");
        hex::encode(Sha256::digest(canonical))
    }

    pub fn render(&self) -> String {
        let template = match (self.mode, self.want) {
            (Mode::FunctionCalling, Want::ActionPair | Want::UndoOnly) => FUNCTION_CALL,
            (_, Want::ActionPair) => ACTION_PAIR,
            (_, Want::UndoOnly) => UNDO_ONLY,
            (_, Want::TestBed) => TESTBED,
        };
        fill(template, &[("kind", self.kind.as_str()), ("prompt", &self.sanitized_prompt), ("context", &self.context)])
    }
}

/// Single-pass `{key}` substitution, so values containing braces are
/// never re-expanded.
fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    'outer: while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        for (key, value) in values {
            if let Some(tail) = rest[open + 1..].strip_prefix(key).and_then(|t| t.strip_prefix('}')) {
                out.push_str(value);
                rest = tail;
                continue 'outer;
            }
        }
        out.push('{');
        rest = &rest[open + 1..];
    }
    out.push_str(rest);
    out
}

#[derive(Debug, thiserror::Error)]
pub enum GeneratorError {
    #[error("generator backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("generator backend error: {0}")]
    Backend(String),
    #[error("unparseable generator response: {reason}")]
    UnparseableResponse { raw: String, reason: String },
    #[error("no declared function selected: {0}")]
    NoFunctionSelected(String),
    #[error("argument {param:?} violates schema: expected {expected}")]
    SchemaViolation { param: String, expected: String },
    #[error("outbound generator payload contains secrets for {0:?}")]
    LeakBlocked(Vec<String>),
    #[error("invalid function set: {0}")]
    InvalidFunctionSet(String),
    #[error("{0}")]
    WrongMode(String),
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &str;
    /// `attempt` is 0 for the first try and 1 for the corrective retry.
    fn complete(&self, req: &GeneratorRequest, rendered: &str, attempt: u32) -> Result<String, GeneratorError>;
}

/// Wraps a backend and keeps every outbound payload.
pub struct RecordingBackend {
    inner: Arc<dyn Backend>,
    sent: Mutex<Vec<Vec<u8>>>,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn Backend>) -> Self {
        RecordingBackend { inner, sent: Mutex::new(Vec::new()) }
    }

    pub fn transcript(&self) -> Vec<Vec<u8>> {
        self.sent.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }
}

impl Backend for RecordingBackend {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn complete(&self, req: &GeneratorRequest, rendered: &str, attempt: u32) -> Result<String, GeneratorError> {
        {
            let mut sent = self.sent.lock().unwrap_or_else(|p| p.into_inner());
            sent.push(serde_json::to_vec(req).expect("requests serialize"));
            sent.push(rendered.as_bytes().to_vec());
        }
        self.inner.complete(req, rendered, attempt)
    }
}

/// Returns the services whose secrets occur in an outbound payload.
pub type LeakGuard = Arc<dyn Fn(&[u8]) -> Vec<String> + Send + Sync>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestBed {
    pub setup_script: String,
    pub action_form: String,
    pub undo_form: String,
    pub comparator: Comparator,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamType {
    String,
    Integer,
    Number,
    Boolean,
    Object,
    Array,
}

impl ParamType {
    pub fn admits(self, v: &Value) -> bool {
        match self {
            ParamType::String => v.is_string(),
            ParamType::Integer => v.is_i64() || v.is_u64(),
            ParamType::Number => v.is_number(),
            ParamType::Boolean => v.is_boolean(),
            ParamType::Object => v.is_object(),
            ParamType::Array => v.is_array(),
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            ParamType::String => "string",
            ParamType::Integer => "integer",
            ParamType::Number => "number",
            ParamType::Boolean => "boolean",
            ParamType::Object => "object",
            ParamType::Array => "array",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamDecl {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ParamType,
    #[serde(default)]
    pub required: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionDecl {
    pub name: String,
    #[serde(default)]
    pub params: Vec<ParamDecl>,
    pub capability: Capability,
    /// Name of the function in the same set that reverses this one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub undo: Option<String>,
    #[serde(default)]
    pub guaranteed: bool,
    /// Action run for a call, with `{param}` placeholders.
    pub template: ActionSpec,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionCall {
    pub name: String,
    #[serde(default)]
    pub arguments: BTreeMap<String, Value>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionSet {
    functions: Vec<FunctionDecl>,
}

impl FunctionSet {
    pub fn new(functions: Vec<FunctionDecl>) -> Result<Self, GeneratorError> {
        let set = FunctionSet { functions };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), GeneratorError> {
        for (i, f) in self.functions.iter().enumerate() {
            if self.functions[..i].iter().any(|g| g.name == f.name) {
                return Err(GeneratorError::InvalidFunctionSet(format!("duplicate function {:?}", f.name)));
            }
            if let Some(undo) = &f.undo {
                if self.get(undo).is_none() {
                    return Err(GeneratorError::InvalidFunctionSet(format!("{:?} pairs with undeclared undo {undo:?}", f.name)));
                }
            }
        }
        Ok(())
    }

    pub fn functions(&self) -> &[FunctionDecl] {
        &self.functions
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&FunctionDecl> {
        self.functions.iter().find(|f| f.name == name)
    }

    /// The set as shown to the generator: signatures only, no templates.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for f in &self.functions {
            let params: Vec<String> =
                f.params.iter().map(|p| format!("{}: {}{}", p.name, p.ty.as_str(), if p.required { "" } else { "?" })).collect();
            out.push_str(&format!("- {}({}) [{}]\n", f.name, params.join(", "), f.capability));
        }
        out
    }

    pub fn check(&self, call: &FunctionCall) -> Result<&FunctionDecl, GeneratorError> {
        let decl = self.get(&call.name).ok_or_else(|| GeneratorError::NoFunctionSelected(call.name.clone()))?;
        for p in &decl.params {
            match call.arguments.get(&p.name) {
                None | Some(Value::Null) if p.required => {
                    return Err(GeneratorError::SchemaViolation { param: p.name.clone(), expected: format!("required {}", p.ty.as_str()) })
                }
                Some(v) if !v.is_null() && !p.ty.admits(v) => {
                    return Err(GeneratorError::SchemaViolation { param: p.name.clone(), expected: p.ty.as_str().into() })
                }
                _ => {}
            }
        }
        if let Some(extra) = call.arguments.keys().find(|k| !decl.params.iter().any(|p| &p.name == *k)) {
            return Err(GeneratorError::SchemaViolation { param: extra.clone(), expected: "no such parameter".into() });
        }
        Ok(decl)
    }

    /// The action for a checked call; arguments become params.
    pub fn instantiate(&self, call: &FunctionCall) -> Result<ActionSpec, GeneratorError> {
        let decl = self.check(call)?;
        let mut action = decl.template.substitute(&call.arguments);
        action.name = decl.name.clone();
        action.params = call.arguments.clone();
        Ok(action)
    }

    /// The paired undo for a call, filled from the call's arguments, and
    /// whether it is guaranteed.
    pub fn undo_for(&self, call: &FunctionCall) -> Option<(UndoSpec, bool)> {
        let decl = self.get(&call.name)?;
        let undo = self.get(decl.undo.as_deref()?)?;
        let args: BTreeMap<String, Value> =
            call.arguments.iter().filter(|(k, _)| undo.params.iter().any(|p| &p.name == *k)).map(|(k, v)| (k.clone(), v.clone())).collect();
        let mut spec = undo.template.substitute(&args);
        spec.name = undo.name.clone();
        spec.params = args;
        Some((spec, decl.guaranteed && undo.guaranteed))
    }
}

pub type Pair = (ActionSpec, Option<UndoSpec>);

pub struct Generator {
    backend: Arc<dyn Backend>,
    guard: Option<LeakGuard>,
}

impl Generator {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Generator { backend, guard: None }
    }

    pub fn with_guard(mut self, guard: LeakGuard) -> Self {
        self.guard = Some(guard);
        self
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    fn send(&self, req: &GeneratorRequest, rendered: &str, attempt: u32) -> Result<String, GeneratorError> {
        if let Some(guard) = &self.guard {
            for payload in [rendered.as_bytes(), &serde_json::to_vec(req).expect("requests serialize")] {
                let leaked = guard(payload);
                if !leaked.is_empty() {
                    return Err(GeneratorError::LeakBlocked(leaked));
                }
            }
        }
        self.backend.complete(req, rendered, attempt)
    }

    /// One try, then one retry with the corrective suffix.
    fn ask<T>(&self, req: &GeneratorRequest, parse: impl Fn(&str) -> Result<T, String>) -> Result<T, GeneratorError> {
        let rendered = req.render();
        let raw = self.send(req, &rendered, 0)?;
        let reason = match parse(&raw) {
            Ok(v) => return Ok(v),
            Err(reason) => reason,
        };
        log::warn!("generator reply unparseable ({reason}); retrying once");
        let retry = format!("{rendered}\n{}", fill(RETRY_SUFFIX, &[("reason", &reason)]));
        let raw = self.send(req, &retry, 1)?;
        parse(&raw).map_err(|reason| GeneratorError::UnparseableResponse { raw, reason })
    }

    pub fn generate_pairs(&self, req: &GeneratorRequest) -> Result<Vec<Pair>, GeneratorError> {
        if req.mode != Mode::ChatCompletion || req.want != Want::ActionPair {
            return Err(GeneratorError::WrongMode("action pairs need a chat-completion ActionPair request".into()));
        }
        self.ask(req, |raw| parse::parse_pairs(raw, req.kind))
    }

    pub fn generate_pair(&self, req: &GeneratorRequest) -> Result<Pair, GeneratorError> {
        let mut pairs = self.generate_pairs(req)?;
        Ok(pairs.swap_remove(0))
    }

    /// `req.context` should describe the executed action and its outcome.
    pub fn generate_undo(&self, req: &GeneratorRequest) -> Result<UndoSpec, GeneratorError> {
        if req.mode != Mode::ChatCompletion || req.want != Want::UndoOnly {
            return Err(GeneratorError::WrongMode("undo generation needs a chat-completion UndoOnly request".into()));
        }
        self.ask(req, |raw| parse::parse_undo(raw, req.kind))
    }

    pub fn select_function(&self, req: &GeneratorRequest, functions: &FunctionSet) -> Result<FunctionCall, GeneratorError> {
        if req.mode != Mode::FunctionCalling {
            return Err(GeneratorError::WrongMode("function selection needs a function-calling request".into()));
        }
        if functions.is_empty() {
            return Err(GeneratorError::NoFunctionSelected("function set is empty".into()));
        }
        let call = self.ask(req, parse::parse_call)?;
        functions.check(&call)?;
        Ok(call)
    }

    pub fn generate_testbed(
        &self,
        mode: Mode,
        sanitized_prompt: &str,
        action: &ActionSpec,
        undo: &UndoSpec,
        context: &str,
    ) -> Result<TestBed, GeneratorError> {
        let req = GeneratorRequest {
            mode,
            kind: action.kind(),
            sanitized_prompt: sanitized_prompt.into(),
            context: testbed_context(action, undo, context),
            want: Want::TestBed,
        };
        self.ask(&req, |raw| parse::parse_testbed(raw, action.kind()))
    }
}

pub fn testbed_context(action: &ActionSpec, undo: &UndoSpec, context: &str) -> String {
    format!(
        "action:\n{}\nundo:\n{}\nstate:\n{}",
        serde_json::to_string_pretty(action).expect("actions serialize"),
        serde_json::to_string_pretty(undo).expect("actions serialize"),
        context
    )
}
