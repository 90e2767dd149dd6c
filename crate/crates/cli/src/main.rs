//! `goex`: operator command line.
//!
//! Exit codes: 0 success, 1 user error, 2 policy denial, 3 execution failure.

use std::io::{BufRead, IsTerminal, Read, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use goex_core::config::Config;
use goex_core::generator::GeneratorError;
use goex_core::policy::PolicyRules;
use goex_core::registry::{ActionSignature, ReversionEntry};
use goex_core::runtime::Submission;
use goex_core::txn::TxnError;
use goex_core::{ActionSpec, Kind, Mode, Runtime, RuntimeError, TxState, Transaction, TxnId, UndoPolicy};

#[derive(Parser)]
#[command(name = "goex", version, about = "Run generated actions with commit/undo after the fact")]
struct Cli {
    /// Configuration file. Defaults to ./goex.toml when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `state_dir`.
    #[arg(long, global = true)]
    state_dir: Option<PathBuf>,
    /// Overrides `fs.root`.
    #[arg(long, global = true)]
    fs_root: Option<PathBuf>,
    /// Adds or replaces a SQLite connection, as NAME=PATH.
    #[arg(long = "db", global = true, value_parser = parse_db)]
    db: Vec<(String, PathBuf)>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate, execute and then commit, undo or defer.
    Execute(ExecuteArgs),
    /// List transactions, optionally in one state.
    List {
        #[arg(long)]
        state: Option<StateArg>,
    },
    /// Print a transaction with its actions and outcomes.
    Show {
        txn_id: String,
    },
    /// Make an executed transaction permanent.
    Commit {
        txn_id: String,
    },
    /// Reverse an executed transaction.
    Undo {
        txn_id: String,
    },
    /// Acknowledge irreversible actions of a pending transaction and run it.
    Ack {
        txn_id: String,
    },
    /// Manage stored credentials.
    #[command(subcommand)]
    Vault(VaultCmd),
    /// Show or replace the blast-radius rules.
    #[command(subcommand)]
    Policy(PolicyCmd),
    /// Manage known action/undo pairs.
    #[command(subcommand)]
    Registry(RegistryCmd),
    /// Start the HTTP approval service.
    Serve {
        #[arg(long)]
        port: Option<u16>,
    },
}

#[derive(Args)]
struct ExecuteArgs {
    #[arg(long)]
    prompt: String,
    #[arg(long)]
    kind: KindArg,
    #[arg(long, default_value = "chat")]
    mode: ModeArg,
    #[arg(long, default_value = "versioning")]
    policy: PolicyArg,
    #[arg(long)]
    atomic: bool,
    /// Acknowledge irreversible or untested actions up front.
    #[arg(long)]
    ack_irreversible: bool,
    /// Commit without asking.
    #[arg(long, conflicts_with = "no")]
    yes: bool,
    /// Undo without asking.
    #[arg(long)]
    no: bool,
}

#[derive(Subcommand)]
enum VaultCmd {
    /// Store a credential. The secret is read from stdin unless --file is given.
    Add {
        service: String,
        /// Reference a token file instead of storing the secret.
        #[arg(long)]
        file: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    Ls,
    Rm {
        service: String,
    },
}

#[derive(Subcommand)]
enum PolicyCmd {
    Show,
    /// Replace the rule set with a JSON document `{"rules": [...]}`.
    Set {
        file: PathBuf,
    },
}

#[derive(Subcommand)]
enum RegistryCmd {
    /// Register an undo for an action. Both files hold an action as JSON.
    Add {
        #[arg(long)]
        action: PathBuf,
        #[arg(long)]
        undo: PathBuf,
        #[arg(long, default_value = "developer")]
        source: SourceArg,
        /// Trust this undo in guaranteed-only mode.
        #[arg(long)]
        guaranteed: bool,
        /// Match on the action name only instead of the whole action.
        #[arg(long)]
        name_only: bool,
    },
    Ls,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Rest,
    Db,
    Fs,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Chat,
    Function,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Reversal,
    Versioning,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SourceArg {
    Developer,
    Generator,
}

#[derive(Clone, Copy, ValueEnum)]
enum StateArg {
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

impl From<StateArg> for TxState {
    fn from(s: StateArg) -> Self {
        match s {
            StateArg::Pending => TxState::Pending,
            StateArg::Executing => TxState::Executing,
            StateArg::Executed => TxState::Executed,
            StateArg::Failed => TxState::Failed,
            StateArg::Committed => TxState::Committed,
            StateArg::Undoing => TxState::Undoing,
            StateArg::Undone => TxState::Undone,
            StateArg::UndoFailed => TxState::UndoFailed,
            StateArg::RolledBack => TxState::RolledBack,
        }
    }
}

fn parse_db(s: &str) -> Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or("expected NAME=PATH")?;
    if name.is_empty() {
        return Err("empty connection name".into());
    }
    Ok((name.into(), PathBuf::from(path)))
}

#[derive(Debug)]
enum CliError {
    User(String),
    Denied(String),
    Failed(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::User(_) => 1,
            CliError::Denied(_) => 2,
            CliError::Failed(_) => 3,
        }
    }
}

impl From<RuntimeError> for CliError {
    fn from(e: RuntimeError) -> Self {
        let msg = e.to_string();
        match e {
            RuntimeError::Txn(TxnError::PolicyDenied { .. }) => CliError::Denied(msg),
            RuntimeError::Txn(TxnError::Commit(_)) => CliError::Failed(msg),
            RuntimeError::Txn(_) | RuntimeError::Unsupported(_) | RuntimeError::Config(_) | RuntimeError::Policy(_) => {
                CliError::User(msg)
            }
            RuntimeError::GeneratorUnavailable | RuntimeError::Generator(GeneratorError::BackendUnavailable(_)) => {
                CliError::User(msg)
            }
            _ => CliError::Failed(msg),
        }
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

fn user(e: impl std::fmt::Display) -> CliError {
    CliError::User(e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // clap's own usage-error code would collide with the denial code.
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (CliError::User(m) | CliError::Denied(m) | CliError::Failed(m)) = &e;
            eprintln!("goex: {m}");
            ExitCode::from(e.code())
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p).map_err(user)?,
        None if std::path::Path::new("goex.toml").exists() => {
            Config::load(std::env::current_dir().map_err(user)?.join("goex.toml")).map_err(user)?
        }
        None => {
            let mut c = Config::default();
            c.rebase(&std::env::current_dir().map_err(user)?);
            c
        }
    };
    let cwd = std::env::current_dir().map_err(user)?;
    let abs = |p: &PathBuf| if p.is_relative() { cwd.join(p) } else { p.clone() };
    if let Some(d) = &cli.state_dir {
        cfg.state_dir = abs(d);
    }
    if let Some(r) = &cli.fs_root {
        cfg.fs.root = Some(abs(r));
    }
    for (name, path) in &cli.db {
        cfg.db.connections.insert(name.clone(), goex_core::handlers::db::ConnectionConfig { engine: "sqlite".into(), path: abs(path) });
    }
    cfg.validate().map_err(user)?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let rt = Runtime::from_config(&cfg)?;
    let m = rt.maintain();
    for id in &m.auto_undone {
        eprintln!("auto-undone expired transaction {id}");
    }
    match cli.command {
        Command::Execute(args) => execute(&rt, args),
        Command::List { state } => {
            for t in rt.txns().list(state.map(Into::into)) {
                println!("{}  {:<12} {:<4} {}  {}", t.id, t.state, t.kind, t.created_at.format("%Y-%m-%d %H:%M:%S"), one_line(&t.prompt));
            }
            Ok(())
        }
        Command::Show { txn_id } => {
            print_txn(&rt.get(&id(&txn_id)?)?);
            Ok(())
        }
        Command::Commit { txn_id } => finish(rt.commit(&id(&txn_id)?)?),
        Command::Undo { txn_id } => finish(rt.undo(&id(&txn_id)?)?),
        Command::Ack { txn_id } => finish(rt.acknowledge(&id(&txn_id)?)?),
        Command::Vault(cmd) => vault(&rt, cmd),
        Command::Policy(PolicyCmd::Show) => {
            println!("{}", serde_json::to_string_pretty(&rt.policy_rules()).expect("rules serialize"));
            Ok(())
        }
        Command::Policy(PolicyCmd::Set { file }) => {
            let text = std::fs::read_to_string(&file).map_err(|e| user(format!("{}: {e}", file.display())))?;
            let rules: PolicyRules = serde_json::from_str(&text).map_err(|e| user(format!("{}: {e}", file.display())))?;
            rt.set_policy_rules(rules)?;
            println!("policy updated: {} rule(s)", rt.policy_rules().rules.len());
            Ok(())
        }
        Command::Registry(cmd) => registry(&rt, cmd),
        Command::Serve { port } => serve(rt, &cfg, port),
    }
}

fn id(s: &str) -> Result<TxnId> {
    s.parse().map_err(|_| user(format!("not a transaction id: {s}")))
}

fn one_line(s: &str) -> String {
    let line = s.lines().next().unwrap_or_default();
    if line.chars().count() > 60 {
        format!("{}...", line.chars().take(57).collect::<String>())
    } else {
        line.to_owned()
    }
}

fn print_txn(t: &Transaction) {
    println!("transaction {}", t.id);
    println!("  state:  {}", t.state);
    println!("  kind:   {} ({})", t.kind, if t.atomic { "atomic" } else { "non-atomic" });
    println!("  prompt: {}", t.prompt);
    for (i, a) in t.actions.iter().enumerate() {
        let undo = match (&a.undo, a.undo_source) {
            (_, goex_core::UndoSource::Snapshot) => "snapshot".to_owned(),
            (Some(u), src) => format!("{} ({})", u.name, serde_json::to_value(src).expect("serializes").as_str().unwrap_or_default()),
            (None, _) => "none".to_owned(),
        };
        println!("  [{i}] {} on {}  undo: {undo}", a.action.name, a.action.service);
        if let Some(o) = &a.outcome {
            println!("      outcome: exit {}; {}", o.exit_status, o.structured_summary.trim());
        }
        if let Some(v) = &a.verdict {
            println!("      rev-test: {:?} via {:?}", v.result, v.comparator_used);
            for l in v.diff_summary.lines().take(5) {
                println!("        {l}");
            }
        }
        if let Some(o) = &a.undo_outcome {
            println!("      undo outcome: exit {}; {}", o.exit_status, o.structured_summary.trim());
        }
    }
    for g in &t.gates {
        println!("  gate: {g}");
    }
    if let Some(e) = &t.error {
        println!("  error: {e}");
    }
}

/// Maps a resolved transaction to the exit code contract.
fn finish(t: Transaction) -> Result<()> {
    print_txn(&t);
    match t.state {
        TxState::Failed | TxState::RolledBack | TxState::UndoFailed => Err(CliError::Failed(format!("transaction {} is {}", t.id, t.state))),
        _ => Ok(()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Choice {
    Commit,
    Undo,
    Defer,
}

/// Reads the operator's answer. End of input defers.
fn ask(input: &mut dyn BufRead, interactive: bool) -> Choice {
    loop {
        if interactive {
            eprint!("commit, undo or defer? [c/u/d] ");
            let _ = std::io::stderr().flush();
        }
        let mut line = String::new();
        match input.read_line(&mut line) {
            Ok(0) | Err(_) => return Choice::Defer,
            Ok(_) => {}
        }
        match line.trim().to_lowercase().as_str() {
            "c" | "commit" => return Choice::Commit,
            "u" | "undo" => return Choice::Undo,
            "d" | "defer" | "" => return Choice::Defer,
            other => eprintln!("unrecognised answer {other:?}"),
        }
    }
}

fn execute(rt: &Runtime, a: ExecuteArgs) -> Result<()> {
    let kind = match a.kind {
        KindArg::Rest => Kind::Rest,
        KindArg::Db => Kind::Db,
        KindArg::Fs => Kind::Fs,
    };
    let mut sub = Submission::new(
        &a.prompt,
        match a.mode {
            ModeArg::Chat => Mode::ChatCompletion,
            ModeArg::Function => Mode::FunctionCalling,
        },
        kind,
    );
    sub.atomic = a.atomic;
    sub.ack_irreversible = a.ack_irreversible;
    sub.policy = Some(match a.policy {
        PolicyArg::Reversal => UndoPolicy::Reversal,
        PolicyArg::Versioning => UndoPolicy::Versioning,
    });
    let begun = rt.begin(&sub)?;
    println!("txn {}", begun.id);
    let txn = match rt.drive(&begun.id, &sub) {
        Ok(t) => t,
        Err(e) => {
            if let Ok(t) = rt.get(&begun.id) {
                print_txn(&t);
            }
            return Err(e.into());
        }
    };
    print_txn(&txn);
    match txn.state {
        TxState::Executed => {}
        TxState::Pending => {
            println!("awaiting acknowledgment; run `goex ack {}` to proceed", txn.id);
            return Ok(());
        }
        _ => return finish(txn),
    }
    let choice = if a.yes {
        Choice::Commit
    } else if a.no {
        Choice::Undo
    } else {
        let stdin = std::io::stdin();
        let interactive = stdin.is_terminal();
        ask(&mut stdin.lock(), interactive)
    };
    match choice {
        Choice::Commit => finish(rt.commit(&txn.id)?),
        Choice::Undo => finish(rt.undo(&txn.id)?),
        Choice::Defer => {
            println!("deferred; resolve later with `goex commit {0}` or `goex undo {0}`", txn.id);
            Ok(())
        }
    }
}

fn vault(rt: &Runtime, cmd: VaultCmd) -> Result<()> {
    match cmd {
        VaultCmd::Add { service, file: Some(path), force } => {
            rt.vault().store_file(&service, &path, force).map_err(user)?;
            println!("stored {service} (token file)");
        }
        VaultCmd::Add { service, file: None, force } => {
            let mut secret = String::new();
            std::io::stdin().read_to_string(&mut secret).map_err(user)?;
            let secret = secret.trim_end_matches(['\r', '\n']);
            if secret.is_empty() {
                return Err(user("no secret on stdin"));
            }
            rt.vault().store_inline(&service, secret, force).map_err(user)?;
            println!("stored {service}");
        }
        VaultCmd::Ls => {
            for (service, format) in rt.vault().list() {
                println!("{service}\t{}", serde_json::to_value(format).expect("serializes").as_str().unwrap_or("?"));
            }
        }
        VaultCmd::Rm { service } => {
            rt.vault().remove(&service).map_err(user)?;
            println!("removed {service}");
        }
    }
    Ok(())
}

fn read_action(path: &PathBuf) -> Result<ActionSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| user(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| user(format!("{}: {e}", path.display())))
}

fn registry(rt: &Runtime, cmd: RegistryCmd) -> Result<()> {
    match cmd {
        RegistryCmd::Add { action, undo, source, guaranteed, name_only } => {
            if guaranteed && source != SourceArg::Developer {
                return Err(user("--guaranteed requires --source developer"));
            }
            let action = read_action(&action)?;
            let undo = read_action(&undo)?;
            let signature = if name_only { ActionSignature::name_only(&action.name) } else { ActionSignature::exact(&action) };
            let entry = match source {
                SourceArg::Developer => ReversionEntry::developer(signature, undo, guaranteed),
                SourceArg::Generator => ReversionEntry::generator(signature, undo),
            };
            let r = rt.registry().register(entry).map_err(user)?;
            println!("{r:?}");
        }
        RegistryCmd::Ls => {
            for e in rt.registry().entries() {
                println!("{}", serde_json::to_string(&e).expect("entries serialize"));
            }
        }
    }
    Ok(())
}

fn serve(rt: Runtime, cfg: &Config, port: Option<u16>) -> Result<()> {
    let mut addr: SocketAddr = cfg.server.listen.parse().map_err(|e| user(format!("server.listen: {e}")))?;
    if let Some(p) = port {
        addr.set_port(p);
    }
    let token = match std::env::var(&cfg.server.token_env) {
        Ok(t) if !t.is_empty() => t,
        _ => {
            let t = TxnId::fresh().to_string();
            eprintln!("operator token (set {} to choose one): {t}", cfg.server.token_env);
            t
        }
    };
    let tokio = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(user)?;
    tokio
        .block_on(goex_server::serve(Arc::new(rt), &token, addr, Duration::from_secs(5)))
        .map_err(|e| CliError::Failed(format!("serve: {e}")))
}
