//! `mgvo`: run registry and grid-box servers, talk to a node as a clinician,
//! generate phantom corpora and drive the VO simulation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use mgvo_core::algorithms::JobState;
use mgvo_core::harness::{gen_corpus, CorpusParams, Sim, SimError, SimOptions, Topology};
use mgvo_core::services::config::ConfigMap;
use mgvo_core::services::{
    Client, ClientError, Node, Registry, Role, ServiceError, SystemClock, TcpServer, TcpTransport,
    WorkMode,
};

#[derive(Parser)]
#[command(
    name = "mgvo",
    version,
    about = "Federated mammography grid: servers, client and simulator"
)]
struct Cli {
    #[command(flatten)]
    conn: Conn,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Conn {
    /// Registry address (host:port). Defaults to the one saved by `login`.
    #[arg(long, global = true, env = "MGVO_REGISTRY")]
    registry: Option<String>,
    /// Grid-box to send requests to. Defaults to the one saved by `login`.
    #[arg(long, global = true, env = "MGVO_NODE")]
    node: Option<String>,
    /// Session file written by `login`.
    #[arg(long, global = true, env = "MGVO_SESSION")]
    session: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Central node: membership, authentication, algorithm catalog.
    Registry {
        #[command(subcommand)]
        cmd: RegistryCmd,
    },
    /// A site's grid-box.
    Node {
        #[command(subcommand)]
        cmd: NodeCmd,
    },
    /// Authenticate and save a session token.
    Login {
        #[arg(short = 'u', long)]
        user: String,
        /// Read from stdin when omitted.
        #[arg(short = 'p', long, env = "MGVO_PASSWORD")]
        password: Option<String>,
    },
    /// Store DICOM files at the connected site; prints one gfid per file.
    Add {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Fetch a stored file by gfid from anywhere in the VO.
    Get {
        gfid: String,
        #[arg(short = 'o', long)]
        out: PathBuf,
    },
    /// Run a query across the VO.
    Query {
        query: String,
        /// Print the merged MG-XML result set instead of a table.
        #[arg(long)]
        xml: bool,
    },
    /// Register, list and run analysis algorithms.
    Algo {
        #[command(subcommand)]
        cmd: AlgoCmd,
    },
    /// Inspect distributed jobs.
    Job {
        #[command(subcommand)]
        cmd: JobCmd,
    },
    /// List member sites.
    Sites,
    /// Write a deterministic phantom corpus and its manifest.
    GenCorpus {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        patients: usize,
        #[arg(long)]
        per_patient: usize,
        #[arg(long, default_value_t = 128)]
        rows: u16,
        #[arg(long, default_value_t = 128)]
        cols: u16,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a script against an in-process VO and print the transcript.
    Sim {
        #[arg(long)]
        topology: PathBuf,
        #[arg(long)]
        script: PathBuf,
        /// Use loopback TCP instead of the simulated network.
        #[arg(long)]
        real_sockets: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 5000)]
        timeout_ms: u64,
        /// Write the transcript here instead of stdout.
        #[arg(short = 'o', long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum RegistryCmd {
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Add or replace a user in the registry's user file.
    AddUser {
        #[arg(long)]
        config: PathBuf,
        #[arg(short = 'u', long)]
        user: String,
        #[arg(short = 'p', long, env = "MGVO_PASSWORD")]
        password: String,
        /// Comma-separated: clinician, admin.
        #[arg(long, default_value = "clinician")]
        roles: String,
    },
}

#[derive(Subcommand)]
enum NodeCmd {
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Subcommand)]
enum AlgoCmd {
    /// Register an algorithm descriptor with the VO (admin).
    Add {
        #[arg(long)]
        id: String,
        /// normalize, density or microcalc.
        #[arg(long)]
        kind: String,
        /// Plugin parameter as key=value; repeatable.
        #[arg(long = "param")]
        params: Vec<String>,
    },
    /// Run an algorithm where the data lives; prints the job id.
    Exec {
        #[arg(long)]
        id: String,
        /// Image selector, e.g. "image.laterality = 'L'".
        #[arg(long = "where")]
        selector: Option<String>,
    },
    List,
}

#[derive(Subcommand)]
enum JobCmd {
    Status { job: String },
}

enum Failure {
    User(String),
    Remote(String),
    Internal(String),
}

impl Failure {
    fn exit(&self) -> u8 {
        match self {
            Failure::User(_) => 1,
            Failure::Remote(_) => 2,
            Failure::Internal(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::User(m) | Failure::Remote(m) | Failure::Internal(m) => m,
        }
    }
}

const REMOTE_CODES: &[&str] = &[
    "RemoteUnreachable",
    "RemoteError",
    "StoreFailure",
    "IntegrityError",
    "AlgorithmFailure",
];

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Failure {
        match &e {
            ClientError::Net(_) => Failure::Remote(e.to_string()),
            ClientError::Remote { code, .. } if REMOTE_CODES.contains(&code.as_str()) => {
                Failure::Remote(e.to_string())
            }
            ClientError::Remote { .. } => Failure::User(e.to_string()),
            ClientError::NoSession => {
                Failure::User("not logged in; run `mgvo login -u USER`".into())
            }
            ClientError::Decode(_) => Failure::Internal(e.to_string()),
        }
    }
}

impl From<ServiceError> for Failure {
    fn from(e: ServiceError) -> Failure {
        if REMOTE_CODES.contains(&e.code) {
            Failure::Remote(e.to_string())
        } else {
            Failure::Internal(e.to_string())
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Failure {
        match e {
            SimError::Parse { .. } | SimError::Usage(_) | SimError::Corpus(_) => {
                Failure::User(e.to_string())
            }
            SimError::PortClash(_) => Failure::Remote(e.to_string()),
            other => Failure::Internal(other.to_string()),
        }
    }
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::User(format!("{}: {e}", path.display()))
}

#[derive(Serialize, Deserialize, Default)]
struct Session {
    registry: String,
    node: String,
    token: String,
}

impl Conn {
    fn session_path(&self) -> PathBuf {
        self.session
            .clone()
            .unwrap_or_else(|| match std::env::var_os("HOME") {
                Some(home) => Path::new(&home).join(".mgvo").join("session.json"),
                None => PathBuf::from(".mgvo-session.json"),
            })
    }

    fn saved(&self) -> Option<Session> {
        let text = std::fs::read_to_string(self.session_path()).ok()?;
        serde_json::from_str(&text).ok()
    }

    fn endpoints(&self, saved: Option<&Session>) -> Result<(String, String), Failure> {
        let registry = self
            .registry
            .clone()
            .or_else(|| saved.map(|s| s.registry.clone()));
        let node = self.node.clone().or_else(|| saved.map(|s| s.node.clone()));
        match (registry, node) {
            (Some(r), Some(n)) => Ok((r, n)),
            _ => Err(Failure::User(
                "no registry/node address; pass --registry and --node or log in first".into(),
            )),
        }
    }

    fn client(&self) -> Result<Client, Failure> {
        let saved = self.saved();
        let (registry, node) = self.endpoints(saved.as_ref())?;
        let c = Client::new(Arc::new(TcpTransport), &registry, &node);
        Ok(match saved {
            Some(s) => c.with_session(s.token),
            None => c,
        })
    }
}

fn load_config(path: &Path) -> Result<ConfigMap, Failure> {
    ConfigMap::load(path).map_err(Failure::User)
}

fn init_logging() {
    let filter =
        tracing_subscriber::EnvFilter::try_from_env("MGVO_LOG").unwrap_or_else(|_| "info".into());
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

fn serve_registry(config: &Path) -> Result<(), Failure> {
    let cfg = load_config(config)?
        .registry_config()
        .map_err(Failure::User)?;
    let listen = cfg.listen.clone();
    let registry = Registry::open(cfg, Arc::new(SystemClock))?;
    let server = TcpServer::bind(&listen, registry)
        .map_err(|e| Failure::Remote(format!("cannot bind {listen}: {e}")))?;
    info!(addr = server.addr(), "registry listening");
    server.join();
    Ok(())
}

fn add_user(config: &Path, user: &str, password: &str, roles: &str) -> Result<(), Failure> {
    let cfg = load_config(config)?
        .registry_config()
        .map_err(Failure::User)?;
    if cfg.data_dir.is_none() {
        return Err(Failure::User(
            "add-user needs data_dir in the registry config".into(),
        ));
    }
    let roles: Vec<Role> = roles
        .split(',')
        .map(|r| r.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(Failure::User)?;
    let registry = Registry::open(cfg, Arc::new(SystemClock))?;
    registry
        .add_user(user, password, &roles)
        .map_err(|e| Failure::User(e.to_string()))?;
    println!("{user} added");
    Ok(())
}

fn serve_node(config: &Path) -> Result<(), Failure> {
    let cfg = load_config(config)?.node_config().map_err(Failure::User)?;
    let (listen, site, poll) = (
        cfg.listen.clone(),
        cfg.site_id.clone(),
        cfg.poll_interval_s.max(1),
    );
    let node = Node::open(
        cfg,
        Arc::new(TcpTransport),
        Arc::new(SystemClock),
        WorkMode::Threaded,
    )?;
    let server = TcpServer::bind(&listen, node.clone())
        .map_err(|e| Failure::Remote(format!("cannot bind {listen}: {e}")))?;
    node.start_workers();
    let joiner = node.clone();
    std::thread::spawn(move || loop {
        match joiner.register().and_then(|_| joiner.refresh()) {
            Ok(()) => return info!(site = %joiner.site(), "registered with the VO"),
            Err(e) => warn!("registration failed, retrying in {poll}s: {e}"),
        }
        std::thread::sleep(Duration::from_secs(poll));
    });
    info!(%site, addr = server.addr(), "grid-box listening");
    server.join();
    node.shutdown();
    Ok(())
}

fn login(conn: &Conn, user: &str, password: Option<String>) -> Result<(), Failure> {
    let saved = conn.saved();
    let (registry, node) = conn.endpoints(saved.as_ref())?;
    let password = match password {
        Some(p) => p,
        None => {
            let mut line = String::new();
            std::io::stdin()
                .read_line(&mut line)
                .map_err(|e| Failure::Internal(e.to_string()))?;
            line.trim_end_matches(['\r', '\n']).to_string()
        }
    };
    let mut c = Client::new(Arc::new(TcpTransport), &registry, &node);
    let token = c.authenticate(user, &password)?;
    let path = conn.session_path();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io(dir))?;
    }
    let text = serde_json::to_string_pretty(&Session {
        registry,
        node,
        token,
    })
    .expect("session serializes");
    std::fs::write(&path, text).map_err(io(&path))?;
    println!("logged in as {user}");
    Ok(())
}

fn query(conn: &Conn, q: &str, xml: bool) -> Result<(), Failure> {
    let c = conn.client()?;
    let text = c.query_xml(q)?;
    let rs =
        mgvo_core::federation::from_xml(&text).map_err(|e| Failure::Internal(e.to_string()))?;
    if xml {
        print!("{text}");
    } else {
        println!("site\tid\t{}", rs.columns.join("\t"));
        for r in &rs.rows {
            let vals: Vec<&str> = r
                .values
                .iter()
                .map(|v| v.as_deref().unwrap_or(""))
                .collect();
            println!("{}\t{}\t{}", r.site, r.id, vals.join("\t"));
        }
        eprintln!("{} rows", rs.rows.len());
    }
    if rs.complete {
        Ok(())
    } else {
        let missing: Vec<String> = rs
            .missing
            .iter()
            .map(|m| format!("{} ({})", m.site, m.reason))
            .collect();
        Err(Failure::Remote(format!(
            "partial result, missing {}",
            missing.join(", ")
        )))
    }
}

fn parse_params(raw: &[String]) -> Result<BTreeMap<String, f64>, Failure> {
    raw.iter()
        .map(|kv| {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Failure::User(format!("--param expects key=value, got `{kv}`")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Failure::User(format!("--param {k}: `{v}` is not a number")))?;
            Ok((k.trim().to_string(), v))
        })
        .collect()
}

fn gen(
    seed: u64,
    patients: usize,
    per_patient: usize,
    rows: u16,
    cols: u16,
    out: &Path,
) -> Result<(), Failure> {
    let c = gen_corpus(CorpusParams {
        rows,
        cols,
        ..CorpusParams::new(seed, patients, per_patient)
    })
    .map_err(|e| Failure::User(e.to_string()))?;
    c.write_to(out).map_err(|e| Failure::User(e.to_string()))?;
    println!(
        "{} files and manifest.json written to {}",
        c.files.len(),
        out.display()
    );
    Ok(())
}

fn sim(
    topology: &Path,
    script: &Path,
    opts: SimOptions,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let topo = Topology::parse(&std::fs::read_to_string(topology).map_err(io(topology))?)?;
    let script_text = std::fs::read_to_string(script).map_err(io(script))?;
    let mut s = Sim::boot(&topo, opts)?;
    let run = s.run_script(&script_text);
    s.flush_taps();
    match out {
        Some(p) => std::fs::write(p, s.transcript_text()).map_err(io(p))?,
        None => print!("{}", s.transcript_text()),
    }
    run?;
    if s.failures().is_empty() {
        Ok(())
    } else {
        Err(Failure::Remote(format!(
            "{} check(s) failed: {}",
            s.failures().len(),
            s.failures().join("; ")
        )))
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let conn = &cli.conn;
    match cli.cmd {
        Cmd::Registry {
            cmd: RegistryCmd::Serve { config },
        } => {
            init_logging();
            serve_registry(&config)
        }
        Cmd::Registry {
            cmd:
                RegistryCmd::AddUser {
                    config,
                    user,
                    password,
                    roles,
                },
        } => add_user(&config, &user, &password, &roles),
        Cmd::Node {
            cmd: NodeCmd::Serve { config },
        } => {
            init_logging();
            serve_node(&config)
        }
        Cmd::Login { user, password } => login(conn, &user, password),
        Cmd::Add { files } => {
            let c = conn.client()?;
            for f in &files {
                let bytes = std::fs::read(f).map_err(io(f))?;
                println!("{}\t{}", c.add(&bytes)?, f.display());
            }
            Ok(())
        }
        Cmd::Get { gfid, out } => {
            let bytes = conn.client()?.retrieve(&gfid)?;
            std::fs::write(&out, &bytes).map_err(io(&out))?;
            eprintln!("{} bytes written to {}", bytes.len(), out.display());
            Ok(())
        }
        Cmd::Query { query: q, xml } => query(conn, &q, xml),
        Cmd::Algo {
            cmd: AlgoCmd::Add { id, kind, params },
        } => {
            println!(
                "{}",
                conn.client()?
                    .add_algorithm(&id, &kind, parse_params(&params)?)?
            );
            Ok(())
        }
        Cmd::Algo {
            cmd: AlgoCmd::Exec { id, selector },
        } => {
            println!(
                "{}",
                conn.client()?.execute_algorithm(&id, selector.as_deref())?
            );
            Ok(())
        }
        Cmd::Algo { cmd: AlgoCmd::List } => {
            for a in conn.client()?.list_algorithms()? {
                let params: Vec<String> =
                    a.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
                println!(
                    "{}\t{}\t{}",
                    a.algo_id,
                    a.plugin_kind.name(),
                    params.join(",")
                );
            }
            Ok(())
        }
        Cmd::Job {
            cmd: JobCmd::Status { job },
        } => {
            let rec = conn.client()?.job_status(&job)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&rec).expect("job serializes")
            );
            match rec.state {
                JobState::Partial | JobState::Failed => {
                    Err(Failure::Remote(format!("job {job} ended {}", rec.state)))
                }
                _ => Ok(()),
            }
        }
        Cmd::Sites => {
            for s in conn.client()?.list_sites()? {
                println!(
                    "{}\t{}\t{}\t{}",
                    s.site_id,
                    s.address,
                    if s.public { "public" } else { "private" },
                    s.display_name
                );
            }
            Ok(())
        }
        Cmd::GenCorpus {
            seed,
            patients,
            per_patient,
            rows,
            cols,
            out,
        } => gen(seed, patients, per_patient, rows, cols, &out),
        Cmd::Sim {
            topology,
            script,
            real_sockets,
            seed,
            timeout_ms,
            out,
        } => sim(
            &topology,
            &script,
            SimOptions {
                seed,
                real_sockets,
                query_timeout_ms: timeout_ms,
            },
            out.as_deref(),
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("mgvo: {}", f.message());
            ExitCode::from(f.exit())
        }
    }
}
