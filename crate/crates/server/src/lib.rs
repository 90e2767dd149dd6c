//! HTTP approval service over a [`Runtime`].
//!
//! Every request must carry the operator token in `x-goex-token`.
//! Submissions return 202 at once and the pipeline runs on a blocking
//! worker; clients poll the transaction record. Response bodies are the
//! journal's own records, passed through the vault's redaction once more
//! before they leave.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::StatusCode;
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use goex_core::generator::GeneratorError;
use goex_core::policy::{CapSet, PolicyRules};
use goex_core::runtime::Submission;
use goex_core::txn::TxnError;
use goex_core::{Kind, Mode, Runtime, RuntimeError, TxState, Transaction, TxnId, UndoPolicy};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const TOKEN_HEADER: &str = "x-goex-token";

#[derive(Clone)]
struct AppState {
    runtime: Arc<Runtime>,
    token: Arc<str>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

fn status_of(e: &RuntimeError) -> StatusCode {
    match e {
        RuntimeError::Txn(t) => match t {
            TxnError::NotFound(_) => StatusCode::NOT_FOUND,
            TxnError::EmptyPrompt => StatusCode::BAD_REQUEST,
            TxnError::InvalidState { .. }
            | TxnError::Busy(_)
            | TxnError::AckRequired { .. }
            | TxnError::NotAtomic(_)
            | TxnError::MissingUndo(_)
            | TxnError::NoPolicy(_)
            | TxnError::PolicyDenied { .. }
            | TxnError::Commit(_) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        },
        RuntimeError::GeneratorUnavailable => StatusCode::SERVICE_UNAVAILABLE,
        RuntimeError::Generator(GeneratorError::BackendUnavailable(_)) => StatusCode::SERVICE_UNAVAILABLE,
        RuntimeError::Generator(_) => StatusCode::BAD_GATEWAY,
        RuntimeError::Unsupported(_) | RuntimeError::Policy(_) => StatusCode::BAD_REQUEST,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl AppState {
    fn fail(&self, e: RuntimeError) -> ApiError {
        ApiError::new(status_of(&e), self.runtime.vault().redact_str(&e.to_string()))
    }

    /// Serializes and redacts. Records are already redacted at the source;
    /// this is the last line of defence.
    fn respond(&self, status: StatusCode, body: &impl Serialize) -> Response {
        let text = serde_json::to_string(body).expect("response bodies serialize");
        let text = self.runtime.vault().redact_str(&text);
        (status, [(axum::http::header::CONTENT_TYPE, "application/json")], text).into_response()
    }

    async fn blocking<T: Send + 'static>(
        &self,
        f: impl FnOnce(&Runtime) -> Result<T, RuntimeError> + Send + 'static,
    ) -> Result<T, ApiError> {
        let rt = self.runtime.clone();
        match tokio::task::spawn_blocking(move || f(&rt)).await {
            Ok(r) => r.map_err(|e| self.fail(e)),
            Err(e) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker: {e}"))),
        }
    }
}

/// A transaction as the API shows it.
#[derive(Serialize)]
pub struct TxnView<'a> {
    #[serde(flatten)]
    pub txn: &'a Transaction,
    /// Undo would run something for every completed action.
    pub undo_available: bool,
    pub needs_ack: bool,
}

pub fn view(txn: &Transaction) -> TxnView<'_> {
    let undoable_state = match txn.state {
        TxState::Executed => true,
        TxState::Failed => !txn.atomic,
        _ => false,
    };
    let ran: Vec<_> = txn.actions.iter().filter(|a| a.outcome.as_ref().is_some_and(|o| o.succeeded())).collect();
    TxnView {
        txn,
        undo_available: undoable_state && !ran.is_empty() && ran.iter().all(|a| a.has_undo()),
        needs_ack: txn.state == TxState::Pending && txn.needs_ack(),
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyOverrides {
    #[serde(default)]
    pub undo_policy: Option<UndoPolicy>,
    #[serde(default)]
    pub atomic: bool,
    #[serde(default)]
    pub grants: std::collections::BTreeMap<String, CapSet>,
    #[serde(default)]
    pub ack_irreversible: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitBody {
    pub prompt: String,
    #[serde(default = "chat")]
    pub mode: Mode,
    pub kind: Kind,
    #[serde(default)]
    pub policy_overrides: PolicyOverrides,
}

fn chat() -> Mode {
    Mode::ChatCompletion
}

impl SubmitBody {
    pub fn into_submission(self) -> Submission {
        let o = self.policy_overrides;
        Submission {
            prompt: self.prompt,
            mode: self.mode,
            kind: self.kind,
            atomic: o.atomic,
            policy: o.undo_policy,
            grants: o.grants,
            ack_irreversible: o.ack_irreversible,
        }
    }
}

pub fn router(runtime: Arc<Runtime>, token: &str) -> Router {
    let state = AppState { runtime, token: token.into() };
    Router::new()
        .route("/transactions", post(submit).get(list))
        .route("/transactions/{id}", get(show))
        .route("/transactions/{id}/approve", post(approve))
        .route("/transactions/{id}/undo", post(undo))
        .route("/transactions/{id}/ack-irreversible", post(ack))
        .route("/policy", get(get_policy).put(put_policy))
        .route("/audit", get(audit))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state)
}

async fn require_token(State(s): State<AppState>, req: Request, next: Next) -> Response {
    let ok = req.headers().get(TOKEN_HEADER).and_then(|v| v.to_str().ok()).is_some_and(|t| constant_eq(t.as_bytes(), s.token.as_bytes()));
    if !ok {
        return ApiError::new(StatusCode::UNAUTHORIZED, "missing or wrong operator token").into_response();
    }
    next.run(req).await
}

fn constant_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

fn parse_id(id: &str) -> Result<TxnId, ApiError> {
    id.parse().map_err(|_| ApiError::new(StatusCode::NOT_FOUND, format!("unknown transaction {id}")))
}

async fn submit(State(s): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let body: SubmitBody = serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))?;
    if body.prompt.trim().is_empty() {
        return Err(ApiError::bad_request("prompt must not be empty"));
    }
    if !s.runtime.generator_configured() {
        return Err(s.fail(RuntimeError::GeneratorUnavailable));
    }
    let sub = body.into_submission();
    let txn = {
        let sub = sub.clone();
        s.blocking(move |rt| rt.begin(&sub)).await?
    };
    let id = txn.id.clone();
    let rt = s.runtime.clone();
    tokio::task::spawn_blocking(move || {
        if let Err(e) = rt.drive(&id, &sub) {
            log::warn!("transaction {id}: {}", rt.vault().redact_str(&e.to_string()));
        }
    });
    Ok(s.respond(StatusCode::ACCEPTED, &json!({ "txn_id": txn.id, "state": txn.state })))
}

#[derive(Deserialize)]
struct ListQuery {
    state: Option<String>,
}

async fn list(State(s): State<AppState>, Query(q): Query<ListQuery>) -> Result<Response, ApiError> {
    let state = match q.state {
        Some(st) => Some(
            serde_json::from_value::<TxState>(Value::String(st.to_lowercase()))
                .map_err(|_| ApiError::bad_request(format!("unknown state {st:?}")))?,
        ),
        None => None,
    };
    let txns = s.runtime.txns().list(state);
    let views: Vec<TxnView> = txns.iter().map(view).collect();
    Ok(s.respond(StatusCode::OK, &views))
}

async fn show(State(s): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let txn = s.runtime.get(&parse_id(&id)?).map_err(|e| s.fail(e))?;
    Ok(s.respond(StatusCode::OK, &view(&txn)))
}

async fn approve(State(s): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let id = parse_id(&id)?;
    let txn = s.blocking(move |rt| rt.commit(&id)).await?;
    Ok(s.respond(StatusCode::OK, &view(&txn)))
}

async fn undo(State(s): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let id = parse_id(&id)?;
    let txn = s.blocking(move |rt| rt.undo(&id)).await?;
    Ok(s.respond(StatusCode::OK, &view(&txn)))
}

async fn ack(State(s): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let id = parse_id(&id)?;
    let txn = s.blocking(move |rt| rt.acknowledge(&id)).await?;
    Ok(s.respond(StatusCode::OK, &view(&txn)))
}

async fn get_policy(State(s): State<AppState>) -> Response {
    s.respond(StatusCode::OK, &s.runtime.policy_rules())
}

async fn put_policy(State(s): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let rules: PolicyRules = serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("invalid policy document: {e}")))?;
    s.runtime.set_policy_rules(rules).map_err(|e| s.fail(e))?;
    Ok(s.respond(StatusCode::OK, &s.runtime.policy_rules()))
}

#[derive(Deserialize)]
struct AuditQuery {
    txn_id: Option<String>,
}

async fn audit(State(s): State<AppState>, Query(q): Query<AuditQuery>) -> Result<Response, ApiError> {
    let id = q.txn_id.as_deref().map(parse_id).transpose()?;
    let view = s.runtime.audit(id.as_ref()).map_err(|e| s.fail(e))?;
    Ok(s.respond(StatusCode::OK, &view))
}

/// Serves until the process ends. DB hold reaping and TTL auto-undo run
/// every `maintain_every`.
pub async fn serve(runtime: Arc<Runtime>, token: &str, addr: SocketAddr, maintain_every: Duration) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    let rt = runtime.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(maintain_every);
        loop {
            tick.tick().await;
            let rt = rt.clone();
            let _ = tokio::task::spawn_blocking(move || rt.maintain()).await;
        }
    });
    axum::serve(listener, router(runtime, token)).await
}
