//! `qshield`: owner, user and server roles over a TCP host service, plus
//! the adversarial harness and timing sweeps.

mod bench;
mod error;
mod keys;
mod net;

use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value as Json};

use qshield_core::client::{catalog_of, AuditReport, OwnerContext, PendingQuery, UploadTarget, UserContext};
use qshield_core::document::Document;
use qshield_core::enclave::{core_measurement, ResponseEnvelope};
use qshield_core::host::{
    default_worker_pool, local_deployment, AttackScript, EncryptedStore, ExecutionMode, ServiceClient,
    DEFAULT_CHUNK_SIZE,
};
use qshield_core::ids::CollectionId;
use qshield_core::operator::StatePayload;
use qshield_core::policy::PolicyUpdate;

use error::{CliError, Result};
use keys::{read_file, read_json, write_json, KeyDir, PendingFile, UserFile};
use net::TcpBoundary;

type Service = ServiceClient<TcpBoundary>;

#[derive(Parser)]
#[command(name = "qshield", version, about = "Queries over encrypted document collections with audited results")]
struct Cli {
    /// Print one JSON object instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Data owner: key ceremony, uploads, access policy.
    #[command(subcommand)]
    Owner(OwnerCmd),
    /// Data user: tokens, queries, audits.
    #[command(subcommand)]
    User(UserCmd),
    /// Host service and the adversarial harness.
    #[command(subcommand)]
    Server(ServerCmd),
    /// CSV timing sweeps.
    #[command(subcommand)]
    Bench(BenchCmd),
}

#[derive(Args)]
struct Conn {
    /// Host service address.
    #[arg(long, env = "QSHIELD_SERVER", default_value = "127.0.0.1:7878")]
    server: String,
    /// Directory holding owner and user key files.
    #[arg(long, env = "QSHIELD_KEYS", default_value = "qshield-keys")]
    keys: PathBuf,
}

impl Conn {
    fn service(&self) -> Service {
        ServiceClient::new(TcpBoundary::new(&self.server))
    }

    fn keys(&self) -> KeyDir {
        KeyDir::new(&self.keys)
    }
}

#[derive(Subcommand)]
enum OwnerCmd {
    /// Generates shares for N users, attests and provisions the core, and
    /// writes owner.json and user-<i>.json.
    Setup {
        #[command(flatten)]
        conn: Conn,
        #[arg(long)]
        users: usize,
        #[arg(long, default_value_t = 128)]
        lambda: u32,
    },
    /// Re-attests and re-provisions the core, e.g. after a host restart, and
    /// refreshes the public parameters in the user files.
    Connect {
        #[command(flatten)]
        conn: Conn,
    },
    /// Encrypts and uploads documents from a JSON array or JSON-lines file.
    Upload {
        #[command(flatten)]
        conn: Conn,
        #[arg(long)]
        collection: String,
        #[arg(long)]
        file: PathBuf,
        /// Users (1-based) to grant the collection to.
        #[arg(long, value_delimiter = ',')]
        grant: Vec<usize>,
    },
    /// Changes or shows the access policy.
    Policy {
        #[command(flatten)]
        conn: Conn,
        #[arg(value_enum)]
        action: PolicyAction,
        #[arg(long)]
        user: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        collections: Vec<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyAction {
    Add,
    Modify,
    Remove,
    Show,
}

#[derive(Args)]
struct QueryArgs {
    #[command(flatten)]
    conn: Conn,
    /// User index (1-based).
    #[arg(long, default_value_t = 1)]
    user: usize,
    /// Query expression.
    #[arg(long)]
    expr: String,
    /// Token counter. Defaults to the later of last+1 and the clock in ms.
    #[arg(long)]
    counter: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Standalone,
    Distributed,
}

impl From<Mode> for ExecutionMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Standalone => ExecutionMode::Standalone,
            Mode::Distributed => ExecutionMode::Distributed,
        }
    }
}

#[derive(Subcommand)]
enum UserCmd {
    /// Mints a token and writes the request to a file.
    Token {
        #[command(flatten)]
        query: QueryArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mints a token, runs the query, decrypts and audits the result.
    Query {
        #[command(flatten)]
        query: QueryArgs,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Also write the response envelope here.
        #[arg(long)]
        save_response: Option<PathBuf>,
    },
    /// Sends a request file to the host and writes the response envelope.
    Send {
        #[command(flatten)]
        conn: Conn,
        #[arg(long)]
        request: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decrypts a response envelope and audits it against its request.
    Audit {
        #[arg(long, env = "QSHIELD_KEYS", default_value = "qshield-keys")]
        keys: PathBuf,
        #[arg(long)]
        request: PathBuf,
        #[arg(long)]
        response: PathBuf,
    },
}

#[derive(Subcommand)]
enum ServerCmd {
    /// Runs a trusted core and the host service on a TCP socket.
    Start {
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
        /// Ciphertext store directory; in memory if unset.
        #[arg(long, env = "QSHIELD_STORE")]
        store: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_CHUNK_SIZE)]
        chunk_size: usize,
        /// Start the five-worker pool.
        #[arg(long)]
        workers: bool,
        #[arg(long, value_enum, default_value = "standalone")]
        mode: Mode,
        #[arg(long, default_value_t = 128)]
        lambda: u32,
    },
    /// Runs a query through a deviating schedule and audits what comes back.
    Attack {
        #[command(flatten)]
        query: QueryArgs,
        /// JSON attack script: {"mutations": [...]}.
        #[arg(long)]
        script: PathBuf,
    },
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Unlock and per-operator times inside the core.
    Operators {
        #[arg(long, value_delimiter = ',', default_value = "250,1000,4000")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
    /// Share decryption of one document of each size in bytes.
    Decrypt {
        #[arg(long, value_delimiter = ',', default_value = "1,1024,10240,102400")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
}

/// What a command reports: a JSON value, its text rendering, and whether
/// the domain operation succeeded.
struct Outcome {
    json: Json,
    text: String,
    ok: bool,
}

impl Outcome {
    fn ok(json: Json, text: impl Into<String>) -> Self {
        Self { json, text: text.into(), ok: true }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Owner(cmd) => owner(cmd),
        Command::User(cmd) => user(cmd),
        Command::Server(cmd) => server(cmd, cli.json),
        Command::Bench(cmd) => bench_cmd(cmd),
    };
    match result {
        Ok(out) => {
            if cli.json {
                println!("{}", out.json);
            } else {
                print!("{}", out.text);
                if !out.text.ends_with('\n') {
                    println!();
                }
            }
            if out.ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            if cli.json {
                println!("{}", json!({ "ok": false, "error": e.to_string() }));
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(if matches!(e, CliError::Usage(_)) { 2 } else { 1 })
        }
    }
}

/// Runs `f` on the stored owner state and saves it afterwards, also when
/// `f` fails: a failed update may still have consumed a sequence number.
fn with_owner<T>(conn: &Conn, f: impl FnOnce(&mut OwnerContext, &Service) -> Result<T>) -> Result<T> {
    let keys = conn.keys();
    let mut owner = keys.load_owner()?;
    let result = f(&mut owner, &conn.service());
    keys.save_owner(&owner)?;
    result
}

fn user_uid(owner: &OwnerContext, i: usize) -> Result<qshield_core::ids::Uid> {
    owner
        .user_share(i)
        .map(|s| s.uid())
        .ok_or_else(|| CliError::Usage(format!("no user {i}; the owner has {} users", owner.n())))
}

fn owner(cmd: OwnerCmd) -> Result<Outcome> {
    match cmd {
        OwnerCmd::Setup { conn, users, lambda } => {
            if users == 0 {
                return Err(CliError::Usage("--users must be at least 1".into()));
            }
            let keys = conn.keys();
            if keys.owner_path().exists() {
                return Err(CliError::Usage(format!("{} already exists", keys.owner_path().display())));
            }
            let svc = conn.service();
            let mut owner = OwnerContext::setup(lambda, users)?;
            owner.connect(&svc, &core_measurement())?;
            owner.provision(&svc)?;
            keys.save_owner(&owner)?;
            let files = keys.export_users(&owner)?;
            let mut text = format!("owner state: {}\n", keys.owner_path().display());
            for f in &files {
                text.push_str(&format!("user share: {}\n", f.display()));
            }
            Ok(Outcome::ok(
                json!({ "owner": keys.owner_path(), "users": files, "policy_digest": hex::encode(owner.policy().digest()) }),
                text,
            ))
        }
        OwnerCmd::Connect { conn } => {
            let files = with_owner(&conn, |owner, svc| {
                owner.connect(svc, &core_measurement())?;
                owner.provision(svc)?;
                Ok(())
            })
            .and_then(|_| conn.keys().export_users(&conn.keys().load_owner()?))?;
            Ok(Outcome::ok(json!({ "users": files }), format!("core provisioned; refreshed {} user files", files.len())))
        }
        OwnerCmd::Upload { conn, collection, file, grant } => {
            let docs = read_documents(&file)?;
            let receipt = with_owner(&conn, |owner, svc| {
                let uids = grant.iter().map(|&i| user_uid(owner, i)).collect::<Result<Vec<_>>>()?;
                let catalog = catalog_of(svc)?;
                match catalog.get(&collection) {
                    Some(entry) => {
                        let cid = entry.cid;
                        let receipt = owner.upload(svc, UploadTarget::Existing(cid), &docs)?;
                        for uid in &uids {
                            owner.grant(svc, cid, std::slice::from_ref(uid))?;
                        }
                        Ok(receipt)
                    }
                    None => Ok(owner.upload(svc, UploadTarget::New { name: &collection, authorized: &uids }, &docs)?),
                }
            })?;
            Ok(Outcome::ok(
                json!({ "collection": collection, "cid": receipt.cid.to_hex(), "documents": receipt.dids.len(), "stored": receipt.stored }),
                format!("{collection}: {} documents sent, {} new", receipt.dids.len(), receipt.stored),
            ))
        }
        OwnerCmd::Policy { conn, action, user, collections } => {
            let policy = with_owner(&conn, |owner, svc| {
                let cids = || collections.iter().map(|c| CollectionId::for_name(c)).collect();
                let update = match (action, user) {
                    (PolicyAction::Show, _) => None,
                    (_, None) => return Err(CliError::Usage("--user is required".into())),
                    (PolicyAction::Add, Some(i)) => Some(PolicyUpdate::Add { uid: user_uid(owner, i)?, cids: cids() }),
                    (PolicyAction::Modify, Some(i)) => {
                        Some(PolicyUpdate::Modify { uid: user_uid(owner, i)?, cids: cids() })
                    }
                    (PolicyAction::Remove, Some(i)) => Some(PolicyUpdate::Remove { uid: user_uid(owner, i)? }),
                };
                if let Some(update) = update {
                    owner.update_policy(svc, &update)?;
                }
                Ok(policy_view(owner))
            })?;
            let text = policy
                .iter()
                .map(|(i, cids)| match cids {
                    Some(c) => format!("user {i}: [{}]\n", c.join(", ")),
                    None => format!("user {i}: not listed\n"),
                })
                .collect::<String>();
            let json = policy.iter().map(|(i, c)| json!({ "user": i, "collections": c })).collect();
            Ok(Outcome::ok(Json::Array(json), text))
        }
    }
}

/// Each user's collection ids, in hex, or `None` if not in the policy.
fn policy_view(owner: &OwnerContext) -> Vec<(usize, Option<Vec<String>>)> {
    owner
        .users()
        .iter()
        .enumerate()
        .map(|(k, s)| (k + 1, owner.policy().lookup(&s.uid()).map(|e| e.cids.iter().map(|c| c.to_hex()).collect())))
        .collect()
}

fn read_documents(path: &Path) -> Result<Vec<Document>> {
    let bytes = read_file(path)?;
    let bad = || CliError::Format { path: path.into(), what: "document file" };
    if let Ok(docs) = serde_json::from_slice::<Vec<Document>>(&bytes) {
        return Ok(docs);
    }
    let text = std::str::from_utf8(&bytes).map_err(|_| bad())?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|_| bad()))
        .collect()
}

/// Mints a token for `args`, saving the advanced counter before anything
/// is sent.
fn mint(args: &QueryArgs) -> Result<(UserContext, PendingQuery, PendingFile)> {
    let keys = args.conn.keys();
    let mut file = keys.load_user(args.user)?;
    let mut ctx = file.context()?;
    let catalog = catalog_of(&args.conn.service())?;
    let pending = ctx.make_token_at(&args.expr, &catalog, file.next_counter(args.counter))?;
    file.last_counter = ctx.last_counter();
    keys.save_user(&file)?;
    let saved = PendingFile::new(args.user, &pending, catalog);
    Ok((ctx, pending, saved))
}

fn payload_json(p: &StatePayload) -> Json {
    serde_json::from_slice(&p.to_canonical_json()).expect("canonical payloads are JSON")
}

fn result_outcome(payload: &StatePayload, report: &AuditReport) -> Outcome {
    let result = payload_json(payload);
    let shown = match payload {
        StatePayload::Scalar(v) => serde_json::to_string(v).expect("values serialize"),
        _ => serde_json::to_string_pretty(&result).expect("values serialize"),
    };
    Outcome {
        json: json!({ "result": result, "audit": report }),
        text: format!("result: {shown}\naudit: {report}\n"),
        ok: report.passed(),
    }
}

fn user(cmd: UserCmd) -> Result<Outcome> {
    match cmd {
        UserCmd::Token { query, out } => {
            let (_, pending, saved) = mint(&query)?;
            write_json(&out, &saved)?;
            Ok(Outcome::ok(
                json!({ "request": out, "counter": pending.counter, "omega": pending.omega }),
                format!("wrote {} (counter {}, endurance {})", out.display(), pending.counter, pending.omega),
            ))
        }
        UserCmd::Query { query, mode, save_response } => {
            let (ctx, pending, _) = mint(&query)?;
            let env = query.conn.service().query(&pending.request, mode.map(Into::into))?;
            if let Some(path) = &save_response {
                write_json(path, &env)?;
            }
            let (payload, report) = ctx.open_response(&pending, &env)?;
            Ok(result_outcome(&payload, &report))
        }
        UserCmd::Send { conn, request, mode, out } => {
            let saved: PendingFile = read_json(&request, "request file")?;
            let env = conn.service().query(&saved.request, mode.map(Into::into))?;
            write_json(&out, &env)?;
            Ok(Outcome::ok(json!({ "response": out }), format!("wrote {}", out.display())))
        }
        UserCmd::Audit { keys, request, response } => {
            let saved: PendingFile = read_json(&request, "request file")?;
            let env: ResponseEnvelope = read_json(&response, "response envelope")?;
            let file: UserFile = KeyDir::new(keys).load_user(saved.user)?;
            let (payload, report) = file.context()?.open_response(&saved.pending()?, &env)?;
            Ok(result_outcome(&payload, &report))
        }
    }
}

fn server(cmd: ServerCmd, json_out: bool) -> Result<Outcome> {
    match cmd {
        ServerCmd::Start { listen, store, chunk_size, workers, mode, lambda } => {
            if chunk_size == 0 {
                return Err(CliError::Usage("--chunk-size must be at least 1".into()));
            }
            let store = match &store {
                Some(dir) => EncryptedStore::open(dir)?,
                None => EncryptedStore::in_memory(),
            }
            .with_chunk_size(chunk_size);
            let pool = if workers { default_worker_pool() } else { Vec::new() };
            let (host, _) = local_deployment(lambda, store, pool, mode.into())?;
            let listener = TcpListener::bind(&listen)?;
            let addr = listener.local_addr()?;
            // Announced before serving so that scripts can pick up the port.
            if json_out {
                println!("{}", json!({ "listening": addr.to_string() }));
            } else {
                println!("listening on {addr}");
            }
            net::serve(listener, Arc::clone(&host), mode.into())?;
            Ok(Outcome::ok(Json::Null, ""))
        }
        ServerCmd::Attack { query, script } => {
            let script: AttackScript = read_json(&script, "attack script")?;
            let (ctx, pending, _) = mint(&query)?;
            Ok(match query.conn.service().attack(&pending.request, &script) {
                Err(e) => Outcome::ok(
                    json!({ "outcome": "refused", "error": e }),
                    format!("refused by the core: {e}"),
                ),
                Ok(env) => match ctx.open_response(&pending, &env) {
                    Err(e) => Outcome::ok(
                        json!({ "outcome": "rejected", "error": e.to_string() }),
                        format!("response rejected: {e}"),
                    ),
                    Ok((_, report)) => Outcome {
                        ok: !report.passed(),
                        json: json!({ "outcome": if report.passed() { "undetected" } else { "detected" }, "audit": report }),
                        text: format!("audit: {report}"),
                    },
                },
            })
        }
    }
}

fn bench_cmd(cmd: BenchCmd) -> Result<Outcome> {
    let rows = match cmd {
        BenchCmd::Operators { sizes, reps } => bench::operators(&sizes, reps)?,
        BenchCmd::Decrypt { sizes, reps } => bench::decrypt(&sizes, reps)?,
    };
    Ok(Outcome::ok(serde_json::to_value(&rows).expect("rows serialize"), bench::to_csv(&rows)))
}
