//! Local credential vault.
//!
//! Secrets are stored on the operator's machine, selected per transaction
//! by a prompt-driven [`ServiceSelector`], swapped for symbolic placeholder
//! tokens before anything is shown to the generator, and rehydrated only at
//! dispatch time. Every selection, sanitization, rehydration and denial is
//! audited.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::action::ActionSpec;
use crate::ids::TxnId;
use crate::records::{self, Record, RecordError, RecordLog};

pub const TOKEN_PREFIX: &str = "<<GOEX_SECRET:";
pub const TOKEN_SUFFIX: &str = ">>";
/// Shorter secrets cannot be scanned for reliably.
pub const MIN_SECRET_LEN: usize = 6;

pub fn placeholder(service: &str, index: usize) -> String {
    format!("{TOKEN_PREFIX}{service}:{index}{TOKEN_SUFFIX}")
}

/// Every placeholder-shaped token in `text`, in order of appearance.
pub fn find_placeholders(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find(TOKEN_PREFIX) {
        let after = &rest[start + TOKEN_PREFIX.len()..];
        match after.find(TOKEN_SUFFIX) {
            Some(end) if is_token_body(&after[..end]) => {
                out.push(format!("{TOKEN_PREFIX}{}{TOKEN_SUFFIX}", &after[..end]));
                rest = &after[end + TOKEN_SUFFIX.len()..];
            }
            _ => rest = after,
        }
    }
    out
}

fn is_token_body(body: &str) -> bool {
    match body.rsplit_once(':') {
        Some((svc, idx)) => !svc.is_empty() && !idx.is_empty() && idx.bytes().all(|b| b.is_ascii_digit()) && !svc.contains(['<', '>']),
        None => false,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CredentialFormat {
    InlineString,
    /// Referenced by path; the generator sees the path, never the bytes.
    File,
}

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case")]
pub enum Material {
    InlineString { material_b64: String },
    File { path: PathBuf },
}

impl std::fmt::Debug for Material {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Material::InlineString { .. } => f.write_str("InlineString(<redacted>)"),
            Material::File { path } => write!(f, "File({})", path.display()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credential {
    pub service_name: String,
    #[serde(flatten)]
    pub material: Material,
    pub created_at: DateTime<Utc>,
}

impl Credential {
    pub fn format(&self) -> CredentialFormat {
        match self.material {
            Material::InlineString { .. } => CredentialFormat::InlineString,
            Material::File { .. } => CredentialFormat::File,
        }
    }

    /// The secret bytes: decoded inline material, or the file's contents.
    fn secret_bytes(&self) -> Option<Vec<u8>> {
        match &self.material {
            Material::InlineString { material_b64 } => STANDARD.decode(material_b64).ok(),
            Material::File { path } => fs::read(path).ok().map(trim_newline),
        }
    }
}

fn trim_newline(mut b: Vec<u8>) -> Vec<u8> {
    while b.last().is_some_and(|c| *c == b'\n' || *c == b'\r') {
        b.pop();
    }
    b
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditEvent {
    Selected,
    Sanitized,
    Rehydrated,
    Denied,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub timestamp: DateTime<Utc>,
    pub txn_id: TxnId,
    pub service_name: String,
    pub event: AuditEvent,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CredentialRef {
    Inline,
    File { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlaceholderEntry {
    pub service_name: String,
    pub reference: CredentialRef,
}

/// Token → credential mapping, scoped to one transaction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlaceholderMap {
    pub scope: TxnId,
    pub entries: BTreeMap<String, PlaceholderEntry>,
}

impl PlaceholderMap {
    pub fn new(scope: TxnId) -> Self {
        PlaceholderMap { scope, entries: BTreeMap::new() }
    }

    pub fn token_for(&self, service: &str) -> Option<&str> {
        self.entries.iter().find(|(_, e)| e.service_name == service).map(|(t, _)| t.as_str())
    }

    /// Generator-facing description of the available credentials.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        for (token, e) in &self.entries {
            match &e.reference {
                CredentialRef::Inline => out.push_str(&format!("- {}: use {token} wherever the key is needed\n", e.service_name)),
                CredentialRef::File { path } => out.push_str(&format!(
                    "- {}: credential stored in file {} (reference {token})\n",
                    e.service_name,
                    path.display()
                )),
            }
        }
        out
    }
}

#[derive(Debug, thiserror::Error)]
pub enum VaultError {
    #[error("service name must not be empty")]
    EmptyServiceName,
    #[error("service name {0:?} may not contain ':', '<' or '>'")]
    BadServiceName(String),
    #[error("credential for {0:?} already exists; use force to overwrite")]
    AlreadyExists(String),
    #[error("no credential stored for {0:?}")]
    NotFound(String),
    #[error("credential file {0} does not exist")]
    MissingFile(PathBuf),
    #[error("secret is {0} bytes; at least {MIN_SECRET_LEN} are required")]
    SecretTooShort(usize),
    #[error("inline secrets must be valid UTF-8 and must not contain placeholder delimiters")]
    BadInlineSecret,
    #[error("payload contains the secret of unselected service {0:?}")]
    PolicyBreach(String),
    #[error("service {0:?} was not selected for this transaction")]
    NotSelected(String),
    #[error("unknown placeholder {0} in generated action")]
    UnknownPlaceholder(String),
    #[error("placeholder map belongs to transaction {map}, not {txn}")]
    ScopeMismatch { map: TxnId, txn: TxnId },
    #[error("secret material for {0:?} remains after sanitization")]
    LeakDetected(String),
    #[error("cannot read credential for {0:?}")]
    Unreadable(String),
    #[error(transparent)]
    Records(#[from] RecordError),
    #[error("vault file record {seq}: {reason}")]
    BadRecord { seq: u64, reason: String },
}

/// Picks the services a prompt needs.
pub trait ServiceSelector: Send + Sync {
    fn select(&self, prompt: &str, services: &[String]) -> BTreeSet<String>;
}

/// Case-insensitive substring check: a service matches when any of its
/// hyphen/underscore-separated name tokens of length ≥ 3 occurs in the prompt.
#[derive(Clone, Copy, Debug, Default)]
pub struct SubstringSelector;

impl ServiceSelector for SubstringSelector {
    fn select(&self, prompt: &str, services: &[String]) -> BTreeSet<String> {
        let prompt = prompt.to_lowercase();
        services
            .iter()
            .filter(|s| {
                s.to_lowercase()
                    .split(['-', '_'])
                    .filter(|t| t.chars().count() >= 3)
                    .any(|t| prompt.contains(t))
            })
            .cloned()
            .collect()
    }
}

#[derive(Default)]
struct Audit {
    records: Vec<AuditRecord>,
    selections: BTreeMap<TxnId, BTreeSet<String>>,
}

pub struct Vault {
    path: Option<PathBuf>,
    credentials: RwLock<BTreeMap<String, Credential>>,
    audit: Mutex<Audit>,
    audit_log: Option<RecordLog>,
    selector: Box<dyn ServiceSelector>,
}

impl Vault {
    pub fn in_memory() -> Self {
        Vault {
            path: None,
            credentials: RwLock::new(BTreeMap::new()),
            audit: Mutex::new(Audit::default()),
            audit_log: None,
            selector: Box::new(SubstringSelector),
        }
    }

    /// Opens a vault file (owner-only permissions) and its audit log.
    pub fn open(path: impl AsRef<Path>, audit_path: Option<&Path>) -> Result<Self, VaultError> {
        let path = path.as_ref().to_path_buf();
        let (log, recs, _) = RecordLog::open(&path, true)?;
        drop(log);
        let mut credentials = BTreeMap::new();
        for r in recs {
            apply_record(&mut credentials, &r)?;
        }
        let (audit_log, audit) = match audit_path {
            Some(p) => {
                let (log, recs, _) = RecordLog::open(p, true)?;
                let mut audit = Audit::default();
                for r in recs {
                    if let Ok(a) = serde_json::from_value::<AuditRecord>(r.payload) {
                        if a.event == AuditEvent::Selected {
                            audit.selections.entry(a.txn_id.clone()).or_default().insert(a.service_name.clone());
                        }
                        audit.records.push(a);
                    }
                }
                (Some(log), audit)
            }
            None => (None, Audit::default()),
        };
        Ok(Vault {
            path: Some(path),
            credentials: RwLock::new(credentials),
            audit: Mutex::new(audit),
            audit_log,
            selector: Box::new(SubstringSelector),
        })
    }

    pub fn with_selector(mut self, selector: Box<dyn ServiceSelector>) -> Self {
        self.selector = selector;
        self
    }

    pub fn selector(&self) -> &dyn ServiceSelector {
        self.selector.as_ref()
    }

    pub fn store_inline(&self, service: &str, secret: &str, force: bool) -> Result<(), VaultError> {
        if secret.len() < MIN_SECRET_LEN {
            return Err(VaultError::SecretTooShort(secret.len()));
        }
        if secret.contains(TOKEN_PREFIX) || secret.contains(TOKEN_SUFFIX) {
            return Err(VaultError::BadInlineSecret);
        }
        let material = Material::InlineString { material_b64: STANDARD.encode(secret.as_bytes()) };
        self.store(service, material, force)
    }

    pub fn store_file(&self, service: &str, path: &Path, force: bool) -> Result<(), VaultError> {
        let meta = fs::metadata(path).map_err(|_| VaultError::MissingFile(path.to_path_buf()))?;
        if !meta.is_file() {
            return Err(VaultError::MissingFile(path.to_path_buf()));
        }
        let len = fs::read(path).map(|b| trim_newline(b).len()).unwrap_or(0);
        if len < MIN_SECRET_LEN {
            return Err(VaultError::SecretTooShort(len));
        }
        let path = path.canonicalize().unwrap_or_else(|_| path.to_path_buf());
        self.store(service, Material::File { path }, force)
    }

    fn store(&self, service: &str, material: Material, force: bool) -> Result<(), VaultError> {
        if service.trim().is_empty() {
            return Err(VaultError::EmptyServiceName);
        }
        if service.contains([':', '<', '>']) {
            return Err(VaultError::BadServiceName(service.into()));
        }
        let mut creds = self.credentials.write().unwrap_or_else(|p| p.into_inner());
        if creds.contains_key(service) && !force {
            return Err(VaultError::AlreadyExists(service.into()));
        }
        let cred = Credential { service_name: service.into(), material, created_at: Utc::now() };
        creds.insert(service.into(), cred);
        self.persist(&creds)
    }

    pub fn remove(&self, service: &str) -> Result<(), VaultError> {
        let mut creds = self.credentials.write().unwrap_or_else(|p| p.into_inner());
        if creds.remove(service).is_none() {
            return Err(VaultError::NotFound(service.into()));
        }
        self.persist(&creds)
    }

    /// Rewrites the vault file so removed or replaced material does not
    /// linger in its history.
    fn persist(&self, creds: &BTreeMap<String, Credential>) -> Result<(), VaultError> {
        let Some(path) = &self.path else { return Ok(()) };
        let entries: Vec<_> = creds
            .values()
            .map(|c| (None, "credential".to_owned(), serde_json::to_value(c).expect("credentials serialize")))
            .collect();
        records::rewrite(path, &entries, true)?;
        Ok(())
    }

    /// Names and formats only; never material.
    pub fn list(&self) -> Vec<(String, CredentialFormat)> {
        self.credentials.read().unwrap_or_else(|p| p.into_inner()).values().map(|c| (c.service_name.clone(), c.format())).collect()
    }

    pub fn services(&self) -> Vec<String> {
        self.credentials.read().unwrap_or_else(|p| p.into_inner()).keys().cloned().collect()
    }

    pub fn get(&self, service: &str) -> Option<Credential> {
        self.credentials.read().unwrap_or_else(|p| p.into_inner()).get(service).cloned()
    }

    /// Services the selector picks for `prompt`, without auditing.
    pub fn matching_services(&self, prompt: &str) -> BTreeSet<String> {
        self.selector.select(prompt, &self.services())
    }

    /// Selects the credentials a transaction may use and audits the choice.
    pub fn select_for_prompt(&self, txn: &TxnId, prompt: &str) -> BTreeSet<String> {
        let chosen = self.matching_services(prompt);
        let mut audit = self.audit.lock().unwrap_or_else(|p| p.into_inner());
        for s in &chosen {
            self.audit_locked(&mut audit, txn, s, AuditEvent::Selected);
        }
        audit.selections.entry(txn.clone()).or_default().extend(chosen.iter().cloned());
        chosen
    }

    pub fn selected(&self, txn: &TxnId) -> BTreeSet<String> {
        self.audit.lock().unwrap_or_else(|p| p.into_inner()).selections.get(txn).cloned().unwrap_or_default()
    }

    /// The placeholder map for a transaction's selected services. Tokens are
    /// deterministic, so this rebuilds the map `sanitize` produced.
    pub fn placeholder_map(&self, txn: &TxnId) -> PlaceholderMap {
        let selected = self.selected(txn);
        let creds = self.credentials.read().unwrap_or_else(|p| p.into_inner());
        let mut map = PlaceholderMap::new(txn.clone());
        for cred in creds.values().filter(|c| selected.contains(&c.service_name)) {
            let reference = match &cred.material {
                Material::InlineString { .. } => CredentialRef::Inline,
                Material::File { path } => CredentialRef::File { path: path.clone() },
            };
            map.entries.insert(placeholder(&cred.service_name, 1), PlaceholderEntry { service_name: cred.service_name.clone(), reference });
        }
        map
    }

    /// Replaces every selected secret in `payload` with its placeholder.
    /// A secret of an unselected service in the payload is a hard error.
    pub fn sanitize(&self, txn: &TxnId, payload: &str, services: &BTreeSet<String>) -> Result<(String, PlaceholderMap), VaultError> {
        let selected = self.selected(txn);
        if let Some(s) = services.iter().find(|s| !selected.contains(*s)) {
            self.audit(txn, s, AuditEvent::Denied);
            return Err(VaultError::NotSelected(s.clone()));
        }
        let creds = self.credentials.read().unwrap_or_else(|p| p.into_inner()).clone();
        let mut map = PlaceholderMap::new(txn.clone());
        let mut secrets: Vec<(String, Vec<u8>)> = Vec::new();
        for cred in creds.values() {
            let Some(bytes) = cred.secret_bytes().filter(|b| !b.is_empty()) else { continue };
            let present = contains(payload.as_bytes(), &bytes);
            if !services.contains(&cred.service_name) {
                if present {
                    self.audit(txn, &cred.service_name, AuditEvent::Denied);
                    return Err(VaultError::PolicyBreach(cred.service_name.clone()));
                }
                continue;
            }
            let token = placeholder(&cred.service_name, 1);
            let reference = match &cred.material {
                Material::InlineString { .. } => CredentialRef::Inline,
                Material::File { path } => CredentialRef::File { path: path.clone() },
            };
            map.entries.insert(token, PlaceholderEntry { service_name: cred.service_name.clone(), reference });
            secrets.push((cred.service_name.clone(), bytes));
        }
        // Longest first so a secret embedded in another is not split.
        secrets.sort_by_key(|s| std::cmp::Reverse(s.1.len()));
        let mut out = payload.as_bytes().to_vec();
        for (service, bytes) in &secrets {
            if contains(&out, bytes) {
                out = replace_all(&out, bytes, placeholder(service, 1).as_bytes());
                self.audit(txn, service, AuditEvent::Sanitized);
            }
        }
        if let Some((service, _)) = secrets.iter().find(|(_, b)| contains(&out, b)) {
            return Err(VaultError::LeakDetected(service.clone()));
        }
        let text = String::from_utf8(out).map_err(|_| VaultError::BadInlineSecret)?;
        Ok((text, map))
    }

    /// Replaces placeholders in a generated action with real material (or
    /// the credential path for file-format credentials).
    pub fn rehydrate(&self, txn: &TxnId, action: &ActionSpec, map: &PlaceholderMap) -> Result<ActionSpec, VaultError> {
        if &map.scope != txn {
            return Err(VaultError::ScopeMismatch { map: map.scope.clone(), txn: txn.clone() });
        }
        let mut used = BTreeSet::new();
        for s in action.strings() {
            for token in find_placeholders(&s) {
                let entry = map.entries.get(&token).ok_or_else(|| VaultError::UnknownPlaceholder(token.clone()))?;
                used.insert(entry.service_name.clone());
            }
        }
        let mut values: BTreeMap<String, String> = BTreeMap::new();
        for service in &used {
            let value = self.release(txn, service)?;
            let token = map.token_for(service).expect("service came from the map").to_owned();
            values.insert(token, value);
        }
        Ok(action.map_strings(&mut |s| {
            let mut out = s.to_owned();
            for (token, value) in &values {
                if out.contains(token.as_str()) {
                    out = out.replace(token.as_str(), value);
                }
            }
            out
        }))
    }

    /// Releases one credential's dispatch form for a selected service:
    /// inline material, or the file path.
    pub fn release(&self, txn: &TxnId, service: &str) -> Result<String, VaultError> {
        if !self.selected(txn).contains(service) {
            self.audit(txn, service, AuditEvent::Denied);
            return Err(VaultError::NotSelected(service.into()));
        }
        let cred = self.get(service).ok_or_else(|| VaultError::NotFound(service.into()))?;
        let value = match &cred.material {
            Material::InlineString { material_b64 } => STANDARD
                .decode(material_b64)
                .ok()
                .and_then(|b| String::from_utf8(b).ok())
                .ok_or_else(|| VaultError::Unreadable(service.into()))?,
            Material::File { path } => path.display().to_string(),
        };
        self.audit(txn, service, AuditEvent::Rehydrated);
        Ok(value)
    }

    /// Reads a file-format credential's token for header injection.
    pub fn read_token_file(&self, txn: &TxnId, service: &str) -> Result<String, VaultError> {
        let path = self.release(txn, service)?;
        let cred = self.get(service).ok_or_else(|| VaultError::NotFound(service.into()))?;
        match cred.material {
            Material::File { .. } => fs::read(&path)
                .ok()
                .and_then(|b| String::from_utf8(trim_newline(b)).ok())
                .ok_or_else(|| VaultError::Unreadable(service.into())),
            Material::InlineString { .. } => Ok(path),
        }
    }

    /// Services whose secret bytes occur in `data`.
    pub fn scan(&self, data: &[u8]) -> Vec<String> {
        let creds = self.credentials.read().unwrap_or_else(|p| p.into_inner());
        creds
            .values()
            .filter(|c| c.secret_bytes().is_some_and(|b| !b.is_empty() && contains(data, &b)))
            .map(|c| c.service_name.clone())
            .collect()
    }

    /// Replaces every stored secret in `data` with its placeholder. Used on
    /// captured outputs before they are journaled or shown.
    pub fn redact(&self, data: &[u8]) -> Vec<u8> {
        let creds = self.credentials.read().unwrap_or_else(|p| p.into_inner());
        let mut secrets: Vec<(String, Vec<u8>)> = creds
            .values()
            .filter_map(|c| c.secret_bytes().filter(|b| !b.is_empty()).map(|b| (c.service_name.clone(), b)))
            .collect();
        secrets.sort_by_key(|s| std::cmp::Reverse(s.1.len()));
        let mut out = data.to_vec();
        for (service, bytes) in &secrets {
            if contains(&out, bytes) {
                out = replace_all(&out, bytes, placeholder(service, 1).as_bytes());
            }
        }
        out
    }

    pub fn redact_str(&self, text: &str) -> String {
        String::from_utf8_lossy(&self.redact(text.as_bytes())).into_owned()
    }

    /// A snapshot of every secret's bytes, for transport leak guards.
    pub fn secret_fingerprints(&self) -> Vec<Vec<u8>> {
        let creds = self.credentials.read().unwrap_or_else(|p| p.into_inner());
        creds.values().filter_map(|c| c.secret_bytes()).filter(|b| !b.is_empty()).collect()
    }

    pub fn audit_records(&self, txn: Option<&TxnId>) -> Vec<AuditRecord> {
        let audit = self.audit.lock().unwrap_or_else(|p| p.into_inner());
        audit.records.iter().filter(|r| txn.is_none_or(|t| &r.txn_id == t)).cloned().collect()
    }

    fn audit(&self, txn: &TxnId, service: &str, event: AuditEvent) {
        let mut audit = self.audit.lock().unwrap_or_else(|p| p.into_inner());
        self.audit_locked(&mut audit, txn, service, event);
    }

    fn audit_locked(&self, audit: &mut Audit, txn: &TxnId, service: &str, event: AuditEvent) {
        let rec = AuditRecord { timestamp: Utc::now(), txn_id: txn.clone(), service_name: service.into(), event };
        if let Some(log) = &self.audit_log {
            if let Err(e) = log.append(Some(txn), "credential_audit", json!(rec), false) {
                log::error!("vault audit append failed: {e}");
            }
        }
        audit.records.push(rec);
    }
}

fn apply_record(creds: &mut BTreeMap<String, Credential>, r: &Record) -> Result<(), VaultError> {
    let bad = |reason: String| VaultError::BadRecord { seq: r.seq, reason };
    match r.event_type.as_str() {
        "credential" => {
            let c: Credential = serde_json::from_value(r.payload.clone()).map_err(|e| bad(e.to_string()))?;
            creds.insert(c.service_name.clone(), c);
        }
        other => return Err(bad(format!("unknown record type {other:?}"))),
    }
    Ok(())
}

pub fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

fn replace_all(haystack: &[u8], needle: &[u8], with: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(haystack.len());
    let mut i = 0;
    while i < haystack.len() {
        if haystack[i..].starts_with(needle) {
            out.extend_from_slice(with);
            i += needle.len();
        } else {
            out.push(haystack[i]);
            i += 1;
        }
    }
    out
}
