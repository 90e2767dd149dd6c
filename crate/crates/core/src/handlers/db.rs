//! Database actions under the two undo policies.
//!
//! Reversal runs the statement in autocommit mode and relies on a staged
//! compensating statement. Versioning holds an engine transaction open per
//! connection, with one savepoint per action, until the operator commits
//! (engine commit) or undoes (rollback to the action's savepoint).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use rusqlite::types::ValueRef;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::action::DbAction;
use crate::ids::TxnId;
use crate::txn::ExecutionOutcome;

pub const DEFAULT_HOLD_TIMEOUT: Duration = Duration::from_secs(15 * 60);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: String,
    pub not_null: bool,
    pub primary_key: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSchema {
    pub name: String,
    pub columns: Vec<Column>,
    /// Foreign keys as `column -> table(column)`.
    pub keys: Vec<String>,
}

/// Structure only; never row data.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaSnapshot {
    pub tables: Vec<TableSchema>,
    pub captured_at: DateTime<Utc>,
}

impl SchemaSnapshot {
    /// Text form for generator context.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for t in &self.tables {
            let cols: Vec<String> = t
                .columns
                .iter()
                .map(|c| {
                    let mut s = format!("{} {}", c.name, if c.ty.is_empty() { "ANY" } else { &c.ty });
                    if c.primary_key {
                        s.push_str(" PRIMARY KEY");
                    }
                    if c.not_null {
                        s.push_str(" NOT NULL");
                    }
                    s
                })
                .collect();
            let _ = writeln!(out, "TABLE {} ({})", t.name, cols.join(", "));
            for k in &t.keys {
                let _ = writeln!(out, "  FOREIGN KEY {k}");
            }
        }
        if out.is_empty() {
            out.push_str("(no tables)\n");
        }
        out
    }
}

/// Per-table row multisets: canonical row text → occurrence count.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowState {
    pub tables: BTreeMap<String, BTreeMap<String, usize>>,
}

impl RowState {
    /// Human-readable difference; empty when equal.
    pub fn diff(&self, after: &RowState) -> Vec<String> {
        let mut out = Vec::new();
        let empty = BTreeMap::new();
        let names: std::collections::BTreeSet<&String> = self.tables.keys().chain(after.tables.keys()).collect();
        for name in names {
            let (b, a) = (self.tables.get(name), after.tables.get(name));
            if b.is_none() {
                out.push(format!("table {name} appeared"));
                continue;
            }
            if a.is_none() {
                out.push(format!("table {name} disappeared"));
                continue;
            }
            let (b, a) = (b.unwrap_or(&empty), a.unwrap_or(&empty));
            let rows: std::collections::BTreeSet<&String> = b.keys().chain(a.keys()).collect();
            for row in rows {
                let (nb, na) = (b.get(row).copied().unwrap_or(0), a.get(row).copied().unwrap_or(0));
                if nb > na {
                    out.push(format!("{name}: -{} {row}", nb - na));
                } else if na > nb {
                    out.push(format!("{name}: +{} {row}", na - nb));
                }
            }
        }
        out
    }

    pub fn row_count(&self) -> usize {
        self.tables.values().flat_map(|t| t.values()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatementResult {
    pub rows_affected: u64,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

#[derive(Debug, thiserror::Error)]
pub enum DbError {
    #[error("unknown connection {0:?}")]
    UnknownConnection(String),
    #[error("unsupported engine {0:?}")]
    UnsupportedEngine(String),
    #[error("engine error: {0}")]
    Engine(String),
    #[error("connection {conn:?} is held by transaction {holder}; waited {waited:?}")]
    HoldTimeout { conn: String, holder: TxnId, waited: Duration },
    #[error("transaction {txn} holds no versioning transaction on {conn:?}")]
    NotHeld { txn: TxnId, conn: String },
}

impl From<rusqlite::Error> for DbError {
    fn from(e: rusqlite::Error) -> Self {
        DbError::Engine(e.to_string())
    }
}

/// What the handlers need from a database engine.
pub trait Connector: Send {
    fn execute(&mut self, statement: &str) -> Result<StatementResult, DbError>;
    fn begin(&mut self) -> Result<(), DbError>;
    fn commit(&mut self) -> Result<(), DbError>;
    fn rollback(&mut self) -> Result<(), DbError>;
    fn savepoint(&mut self, name: &str) -> Result<(), DbError>;
    /// Rolls back to and discards the savepoint.
    fn rollback_to(&mut self, name: &str) -> Result<(), DbError>;
    fn schema(&mut self) -> Result<SchemaSnapshot, DbError>;
    /// Every row of `table`. Used by state comparison and tests.
    fn read_table(&mut self, table: &str) -> Result<Vec<Vec<Value>>, DbError>;

    fn row_state(&mut self) -> Result<RowState, DbError> {
        let mut state = RowState::default();
        for t in self.schema()?.tables {
            let mut rows = BTreeMap::new();
            for r in self.read_table(&t.name)? {
                *rows.entry(Value::Array(r).to_string()).or_insert(0) += 1;
            }
            state.tables.insert(t.name, rows);
        }
        Ok(state)
    }
}

pub struct SqliteConnector {
    conn: rusqlite::Connection,
}

impl SqliteConnector {
    pub fn open(path: impl AsRef<std::path::Path>) -> Result<Self, DbError> {
        let conn = rusqlite::Connection::open(path)?;
        conn.busy_timeout(Duration::from_secs(5))?;
        Ok(SqliteConnector { conn })
    }

    pub fn in_memory() -> Result<Self, DbError> {
        Ok(SqliteConnector { conn: rusqlite::Connection::open_in_memory()? })
    }

    pub fn execute_batch(&mut self, sql: &str) -> Result<(), DbError> {
        Ok(self.conn.execute_batch(sql)?)
    }

    /// Forbids ATTACH, so statements cannot reach other database files.
    pub fn confine(&mut self) -> Result<(), DbError> {
        self.conn.set_limit(rusqlite::limits::Limit::SQLITE_LIMIT_ATTACHED, 0)?;
        Ok(())
    }
}

fn quote_ident(name: &str) -> String {
    format!("\"{}\"", name.replace('"', "\"\""))
}

fn to_json(v: ValueRef<'_>) -> Value {
    match v {
        ValueRef::Null => Value::Null,
        ValueRef::Integer(i) => Value::from(i),
        ValueRef::Real(f) => serde_json::Number::from_f64(f).map(Value::Number).unwrap_or_else(|| Value::String(f.to_string())),
        ValueRef::Text(t) => Value::String(String::from_utf8_lossy(t).into_owned()),
        ValueRef::Blob(b) => Value::String(format!("x'{}'", hex::encode(b))),
    }
}

impl Connector for SqliteConnector {
    fn execute(&mut self, statement: &str) -> Result<StatementResult, DbError> {
        let mut stmt = match self.conn.prepare(statement) {
            Ok(s) => s,
            Err(rusqlite::Error::MultipleStatement) => {
                let before = self.conn.total_changes();
                self.conn.execute_batch(statement)?;
                return Ok(StatementResult { rows_affected: self.conn.total_changes() - before, columns: Vec::new(), rows: Vec::new() });
            }
            Err(e) => return Err(e.into()),
        };
        if stmt.column_count() == 0 {
            let n = stmt.execute([])?;
            return Ok(StatementResult { rows_affected: n as u64, columns: Vec::new(), rows: Vec::new() });
        }
        let columns: Vec<String> = stmt.column_names().into_iter().map(str::to_owned).collect();
        let width = columns.len();
        let mut rows = Vec::new();
        let mut q = stmt.query([])?;
        while let Some(row) = q.next()? {
            rows.push((0..width).map(|i| row.get_ref(i).map(to_json)).collect::<Result<Vec<_>, _>>()?);
        }
        Ok(StatementResult { rows_affected: 0, columns, rows })
    }

    fn begin(&mut self) -> Result<(), DbError> {
        Ok(self.conn.execute_batch("BEGIN IMMEDIATE")?)
    }

    fn commit(&mut self) -> Result<(), DbError> {
        Ok(self.conn.execute_batch("COMMIT")?)
    }

    fn rollback(&mut self) -> Result<(), DbError> {
        Ok(self.conn.execute_batch("ROLLBACK")?)
    }

    fn savepoint(&mut self, name: &str) -> Result<(), DbError> {
        Ok(self.conn.execute_batch(&format!("SAVEPOINT {}", quote_ident(name)))?)
    }

    fn rollback_to(&mut self, name: &str) -> Result<(), DbError> {
        let n = quote_ident(name);
        Ok(self.conn.execute_batch(&format!("ROLLBACK TO {n}; RELEASE {n}"))?)
    }

    fn schema(&mut self) -> Result<SchemaSnapshot, DbError> {
        let names: Vec<String> = {
            let mut s = self
                .conn
                .prepare("SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT LIKE 'sqlite_%' ORDER BY name")?;
            let rows = s.query_map([], |r| r.get::<_, String>(0))?;
            rows.collect::<Result<_, _>>()?
        };
        let mut tables = Vec::new();
        for name in names {
            let mut s = self.conn.prepare(&format!("PRAGMA table_info({})", quote_ident(&name)))?;
            let columns = s
                .query_map([], |r| {
                    Ok(Column { name: r.get(1)?, ty: r.get(2)?, not_null: r.get::<_, i64>(3)? != 0, primary_key: r.get::<_, i64>(5)? != 0 })
                })?
                .collect::<Result<Vec<_>, _>>()?;
            let mut s = self.conn.prepare(&format!("PRAGMA foreign_key_list({})", quote_ident(&name)))?;
            let keys = s
                .query_map([], |r| Ok(format!("{} -> {}({})", r.get::<_, String>(3)?, r.get::<_, String>(2)?, r.get::<_, Option<String>>(4)?.unwrap_or_default())))?
                .collect::<Result<Vec<_>, _>>()?;
            tables.push(TableSchema { name, columns, keys });
        }
        Ok(SchemaSnapshot { tables, captured_at: Utc::now() })
    }

    fn read_table(&mut self, table: &str) -> Result<Vec<Vec<Value>>, DbError> {
        Ok(self.execute(&format!("SELECT * FROM {}", quote_ident(table)))?.rows)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectionConfig {
    #[serde(default = "default_engine")]
    pub engine: String,
    /// Engine locator; a file path for the embedded engine.
    pub path: PathBuf,
}

fn default_engine() -> String {
    "sqlite".into()
}

struct Held {
    txn: TxnId,
    conn: Box<dyn Connector>,
    since: Instant,
    /// Action indices with an open savepoint, in execution order.
    savepoints: Vec<usize>,
}

/// Expired hold that was rolled back.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Expired {
    pub txn: TxnId,
    pub connection: String,
    pub held_for: Duration,
}

pub struct DbManager {
    connections: BTreeMap<String, ConnectionConfig>,
    held: Mutex<BTreeMap<String, Held>>,
    released: Condvar,
    hold_timeout: Duration,
    expired: Mutex<Vec<Expired>>,
}

impl DbManager {
    pub fn new(connections: BTreeMap<String, ConnectionConfig>) -> Self {
        DbManager {
            connections,
            held: Mutex::new(BTreeMap::new()),
            released: Condvar::new(),
            hold_timeout: DEFAULT_HOLD_TIMEOUT,
            expired: Mutex::new(Vec::new()),
        }
    }

    pub fn with_hold_timeout(mut self, t: Duration) -> Self {
        self.hold_timeout = t;
        self
    }

    /// Host paths of every configured database file.
    pub fn connection_paths(&self) -> Vec<PathBuf> {
        self.connections.values().map(|c| c.path.clone()).collect()
    }

    pub fn connection_names(&self) -> Vec<String> {
        self.connections.keys().cloned().collect()
    }

    pub fn connect(&self, conn_ref: &str) -> Result<Box<dyn Connector>, DbError> {
        let cfg = self.connections.get(conn_ref).ok_or_else(|| DbError::UnknownConnection(conn_ref.into()))?;
        match cfg.engine.as_str() {
            "sqlite" => Ok(Box::new(SqliteConnector::open(&cfg.path)?)),
            other => Err(DbError::UnsupportedEngine(other.into())),
        }
    }

    pub fn snapshot_schema(&self, conn_ref: &str) -> Result<SchemaSnapshot, DbError> {
        self.connect(conn_ref)?.schema()
    }

    /// Full-table read of committed state.
    pub fn row_state(&self, conn_ref: &str) -> Result<RowState, DbError> {
        self.connect(conn_ref)?.row_state()
    }

    pub fn holder(&self, conn_ref: &str) -> Option<TxnId> {
        self.lock().get(conn_ref).map(|h| h.txn.clone())
    }

    /// Runs a statement immediately. Inside a transaction that already
    /// holds the connection the statement joins the held transaction.
    pub fn execute_reversal(&self, txn: &TxnId, action: &DbAction) -> Result<ExecutionOutcome, DbError> {
        let started = Instant::now();
        let mut held = self.lock();
        if let Some(h) = held.get_mut(&action.connection_ref).filter(|h| &h.txn == txn) {
            let r = h.conn.execute(&action.statement)?;
            return Ok(outcome(&action.statement, "joined held transaction", &r, started));
        }
        drop(held);
        let mut conn = self.connect(&action.connection_ref)?;
        let r = conn.execute(&action.statement)?;
        Ok(outcome(&action.statement, "committed", &r, started))
    }

    /// Runs a statement inside the transaction's held engine transaction,
    /// opening it (and waiting for another holder to finish) if needed.
    pub fn execute_versioning(&self, txn: &TxnId, index: usize, action: &DbAction) -> Result<ExecutionOutcome, DbError> {
        let started = Instant::now();
        let conn_ref = &action.connection_ref;
        let mut held = self.acquire(txn, conn_ref)?;
        let h = held.get_mut(conn_ref).expect("acquired");
        let sp = savepoint_name(index);
        h.conn.savepoint(&sp)?;
        match h.conn.execute(&action.statement) {
            Ok(r) => {
                h.savepoints.push(index);
                Ok(outcome(&action.statement, "held; commit or undo pending", &r, started))
            }
            Err(e) => {
                let _ = h.conn.rollback_to(&sp);
                if h.savepoints.is_empty() {
                    let _ = h.conn.rollback();
                    held.remove(conn_ref);
                    self.released.notify_all();
                }
                Err(e)
            }
        }
    }

    /// Rolls back action `index` (and anything after it on the connection).
    /// The engine transaction ends once no savepoints remain.
    pub fn undo_versioning(&self, txn: &TxnId, index: usize, conn_ref: &str) -> Result<ExecutionOutcome, DbError> {
        let started = Instant::now();
        let mut held = self.lock();
        let h = held
            .get_mut(conn_ref)
            .filter(|h| &h.txn == txn && h.savepoints.contains(&index))
            .ok_or_else(|| DbError::NotHeld { txn: txn.clone(), conn: conn_ref.into() })?;
        h.conn.rollback_to(&savepoint_name(index))?;
        h.savepoints.retain(|&i| i < index);
        let summary = if h.savepoints.is_empty() {
            h.conn.rollback()?;
            held.remove(conn_ref);
            self.released.notify_all();
            format!("rolled back action {index}; engine transaction on {conn_ref} rolled back")
        } else {
            format!("rolled back action {index} to its savepoint on {conn_ref}")
        };
        Ok(ExecutionOutcome { exit_status: 0, stdout: Vec::new(), stderr: Vec::new(), structured_summary: summary, duration_ms: started.elapsed().as_millis() as u64 })
    }

    /// Commits every engine transaction the transaction holds.
    pub fn commit(&self, txn: &TxnId) -> Result<usize, DbError> {
        let mut held = self.lock();
        let mine: Vec<String> = held.iter().filter(|(_, h)| &h.txn == txn).map(|(k, _)| k.clone()).collect();
        for k in &mine {
            let mut h = held.remove(k).expect("listed");
            h.conn.commit()?;
        }
        self.released.notify_all();
        Ok(mine.len())
    }

    /// Rolls back every engine transaction the transaction holds.
    pub fn abort(&self, txn: &TxnId) -> usize {
        let mut held = self.lock();
        let mine: Vec<String> = held.iter().filter(|(_, h)| &h.txn == txn).map(|(k, _)| k.clone()).collect();
        for k in &mine {
            if let Some(mut h) = held.remove(k) {
                let _ = h.conn.rollback();
            }
        }
        self.released.notify_all();
        mine.len()
    }

    /// Rolls back holds older than the hold timeout.
    pub fn reap_expired(&self) -> Vec<Expired> {
        let mut held = self.lock();
        self.reap_locked(&mut held);
        std::mem::take(&mut *self.expired.lock().unwrap_or_else(|p| p.into_inner()))
    }

    fn reap_locked(&self, held: &mut BTreeMap<String, Held>) {
        let stale: Vec<String> = held.iter().filter(|(_, h)| h.since.elapsed() >= self.hold_timeout).map(|(k, _)| k.clone()).collect();
        for k in stale {
            let mut h = held.remove(&k).expect("listed");
            let _ = h.conn.rollback();
            log::error!("ALARM: versioning hold of {} on {k} exceeded {:?}; rolled back", h.txn, self.hold_timeout);
            self.expired.lock().unwrap_or_else(|p| p.into_inner()).push(Expired {
                txn: h.txn,
                connection: k,
                held_for: h.since.elapsed(),
            });
            self.released.notify_all();
        }
    }

    fn acquire(&self, txn: &TxnId, conn_ref: &str) -> Result<MutexGuard<'_, BTreeMap<String, Held>>, DbError> {
        let deadline = Instant::now() + self.hold_timeout;
        let mut held = self.lock();
        loop {
            self.reap_locked(&mut held);
            match held.get(conn_ref) {
                Some(h) if &h.txn == txn => return Ok(held),
                None => {
                    let mut conn = self.connect(conn_ref)?;
                    conn.begin()?;
                    held.insert(conn_ref.into(), Held { txn: txn.clone(), conn, since: Instant::now(), savepoints: Vec::new() });
                    return Ok(held);
                }
                Some(h) => {
                    let now = Instant::now();
                    if now >= deadline {
                        return Err(DbError::HoldTimeout { conn: conn_ref.into(), holder: h.txn.clone(), waited: self.hold_timeout });
                    }
                    let wait = (deadline - now).min(Duration::from_millis(250));
                    held = self.released.wait_timeout(held, wait).unwrap_or_else(|p| p.into_inner()).0;
                }
            }
        }
    }

    fn lock(&self) -> MutexGuard<'_, BTreeMap<String, Held>> {
        self.held.lock().unwrap_or_else(|p| p.into_inner())
    }
}

fn savepoint_name(index: usize) -> String {
    format!("goex_a{index}")
}

fn outcome(statement: &str, mode: &str, r: &StatementResult, started: Instant) -> ExecutionOutcome {
    let mut summary = format!("{}; {}", statement.trim(), mode);
    if r.columns.is_empty() {
        let _ = write!(summary, "; {} row(s) affected", r.rows_affected);
    } else {
        let _ = write!(summary, "; {} row(s) returned ({})", r.rows.len(), r.columns.join(", "));
    }
    let stdout = if r.columns.is_empty() { Vec::new() } else { serde_json::to_vec(&r.rows).unwrap_or_default() };
    ExecutionOutcome { exit_status: 0, stdout, stderr: Vec::new(), structured_summary: summary, duration_ms: started.elapsed().as_millis() as u64 }
}
