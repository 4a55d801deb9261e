//! In-process VO: a registry and one node per site on a simulated network
//! (or loopback TCP), driven by a line-oriented script.
//!
//! Topology file:
//!
//! ```text
//! registry = 10.0.0.1:7000
//! site = cambridge 10.0.0.2:7001 latency_ms=20 drop=false
//! site = udine 10.0.0.3:7001
//! ```
//!
//! Script commands, one per line (`#` starts a comment):
//!
//! ```text
//! corpus SEED PATIENTS PER_PATIENT [ROWS COLS]
//! query SITE QUERY...
//! suite SEED N [SITE|all]
//! drop SITE | restore SITE | latency SITE MS
//! algo SITE ALGO_ID KIND [key=value...]
//! poll
//! exec SITE ALGO_ID [EXPR...]
//! drain
//! job SITE [JOB_ID|last]
//! retrieve SITE N
//! advance MS
//! mark
//! check leaks | check locality | check exposure
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, OnceLock};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use thiserror::Error;

use super::corpus::{gen_corpus, Corpus, CorpusError, CorpusParams};
use super::oracle::{oracle_eval, result_rows};
use super::querygen::{gen_suite, SuiteInputs};
use super::scan::{identity_needles, pixel_prefixes, Scanner};
use crate::federation::ResultSet;
use crate::model::{parse_gfid, SiteId};
use crate::services::auth::Role;
use crate::services::proto::{self, Response};
use crate::services::{
    Client, ClientError, Clock, Handler, ManualClock, Node, NodeConfig, Registry, RegistryConfig,
    ServiceError, SimNet, TapFrame, TapLog, Tapped, TcpServer, TcpTransport, Transport, WorkMode,
};
use crate::store::{sha256_hex, JoinedRow};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("PortClash: cannot bind {0}")]
    PortClash(String),
    #[error("{0}")]
    Service(#[from] ServiceError),
    #[error("{0}")]
    Client(#[from] ClientError),
    #[error("{0}")]
    Corpus(#[from] CorpusError),
    #[error("{0}")]
    Usage(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiteSpec {
    pub site_id: SiteId,
    pub address: String,
    pub latency_ms: u64,
    pub drop: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    pub registry: String,
    pub sites: Vec<SiteSpec>,
}

impl Topology {
    /// Sites on made-up addresses with no latency.
    pub fn named(sites: &[&str]) -> Topology {
        Topology {
            registry: "10.0.0.1:7000".into(),
            sites: sites
                .iter()
                .enumerate()
                .map(|(i, s)| SiteSpec {
                    site_id: SiteId::new(*s).expect("valid site id"),
                    address: format!("10.0.0.{}:7001", i + 2),
                    latency_ms: 0,
                    drop: false,
                })
                .collect(),
        }
    }

    pub fn parse(text: &str) -> Result<Topology, SimError> {
        let mut registry = None;
        let mut sites: Vec<SiteSpec> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| SimError::Parse { line: n + 1, msg };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err("expected key = value".into()))?;
            match key.trim() {
                "registry" => registry = Some(value.trim().to_string()),
                "site" => {
                    let mut parts = value.split_whitespace();
                    let id = parts.next().ok_or_else(|| err("site needs an id".into()))?;
                    let site_id = SiteId::new(id).map_err(|e| err(e.to_string()))?;
                    let address = parts
                        .next()
                        .ok_or_else(|| err("site needs an address".into()))?
                        .to_string();
                    let mut spec = SiteSpec {
                        site_id,
                        address,
                        latency_ms: 0,
                        drop: false,
                    };
                    for opt in parts {
                        match opt.split_once('=') {
                            Some(("latency_ms", v)) => {
                                spec.latency_ms =
                                    v.parse().map_err(|_| err(format!("bad latency `{v}`")))?
                            }
                            Some(("drop", v)) => {
                                spec.drop =
                                    v.parse().map_err(|_| err(format!("bad drop flag `{v}`")))?
                            }
                            _ => return Err(err(format!("unknown site option `{opt}`"))),
                        }
                    }
                    if sites.iter().any(|s| s.site_id == spec.site_id) {
                        return Err(err(format!("duplicate site `{id}`")));
                    }
                    sites.push(spec);
                }
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        let registry = registry.ok_or(SimError::Parse {
            line: 0,
            msg: "missing registry address".into(),
        })?;
        Ok(Topology { registry, sites })
    }

    pub fn render(&self) -> String {
        let mut out = format!("registry = {}\n", self.registry);
        for s in &self.sites {
            out.push_str(&format!(
                "site = {} {} latency_ms={} drop={}\n",
                s.site_id, s.address, s.latency_ms, s.drop
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    pub seed: u64,
    pub real_sockets: bool,
    pub query_timeout_ms: u64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            seed: 1,
            real_sockets: false,
            query_timeout_ms: 5000,
        }
    }
}

/// Handler slot filled once the node behind a bound socket exists.
#[derive(Default)]
struct Deferred(OnceLock<Arc<dyn Handler>>);

impl Handler for Deferred {
    fn handle(&self, frame: &[u8]) -> Vec<u8> {
        match self.0.get() {
            Some(h) => h.handle(frame),
            None => proto::encode(&Response::err("RemoteUnreachable", "starting up")),
        }
    }
}

pub const CLINICIAN: (&str, &str) = ("clinician", "clinician-pass");
pub const ADMIN: (&str, &str) = ("admin", "admin-pass");
pub const START_MS: i64 = 1_100_000_000_000;

pub struct Sim {
    pub topology: Topology,
    pub opts: SimOptions,
    pub clock: Arc<ManualClock>,
    pub net: Arc<SimNet>,
    pub taps: Arc<TapLog>,
    transport: Arc<dyn Transport>,
    pub registry: Arc<Registry>,
    pub nodes: Vec<Arc<Node>>,
    servers: Vec<TcpServer>,
    dropped: BTreeSet<usize>,
    clinician: String,
    admin: String,
    transcript: Vec<String>,
    pub corpus: Option<Corpus>,
    /// Gfid of every ingested corpus entry, aligned with the manifest.
    pub gfids: Vec<String>,
    last_job: Option<String>,
    mark: usize,
    rng: ChaCha8Rng,
    failures: Vec<String>,
}

fn vo_secret(seed: u64) -> Vec<u8> {
    format!("sim-vo-secret-{seed:016x}").into_bytes()
}

fn site_secret(site: &SiteId, seed: u64) -> Vec<u8> {
    format!("sim-site-secret-{site}-{seed:016x}").into_bytes()
}

impl Sim {
    pub fn boot(topology: &Topology, opts: SimOptions) -> Result<Sim, SimError> {
        let mut topology = topology.clone();
        let clock = Arc::new(ManualClock::new(START_MS));
        let net = SimNet::new();
        let taps = TapLog::new();
        let mut servers = Vec::new();
        let mut slots: Vec<Arc<Deferred>> = Vec::new();
        if opts.real_sockets {
            let mut bind = |addr: &str| -> Result<String, SimError> {
                let slot = Arc::new(Deferred::default());
                let server = TcpServer::bind(addr, slot.clone())
                    .map_err(|_| SimError::PortClash(addr.to_string()))?;
                let actual = server.addr().to_string();
                servers.push(server);
                slots.push(slot);
                Ok(actual)
            };
            topology.registry = bind(&topology.registry)?;
            for s in &mut topology.sites {
                s.address = bind(&s.address)?;
            }
        }
        let transport: Arc<dyn Transport> = if opts.real_sockets {
            Arc::new(Tapped {
                inner: TcpTransport,
                taps: taps.clone(),
            })
        } else {
            Arc::new(Tapped {
                inner: net.clone(),
                taps: taps.clone(),
            })
        };
        let secret = vo_secret(opts.seed);
        let rcfg = RegistryConfig {
            listen: topology.registry.clone(),
            vo_secret: secret.clone(),
            data_dir: None,
            token_ttl_s: 8 * 3600,
        };
        let registry = Registry::open(rcfg, clock.clone())?;
        registry.add_user(CLINICIAN.0, CLINICIAN.1, &[Role::Clinician])?;
        registry.add_user(ADMIN.0, ADMIN.1, &[Role::Admin, Role::Clinician])?;
        taps.name(&topology.registry, "registry");
        let handler: Arc<dyn Handler> = registry.clone();
        if opts.real_sockets {
            let _ = slots[0].0.set(handler);
        } else {
            net.attach(&topology.registry, &handler, 0);
        }
        let mut nodes = Vec::new();
        for (i, s) in topology.sites.iter().enumerate() {
            let mut cfg = NodeConfig::new(
                s.site_id.clone(),
                &s.address,
                &topology.registry,
                &site_secret(&s.site_id, opts.seed),
                &secret,
            );
            cfg.query_timeout_ms = opts.query_timeout_ms;
            cfg.seed = Some(opts.seed ^ ((i as u64 + 1) << 32));
            let node = Node::open(cfg, transport.clone(), clock.clone(), WorkMode::Manual)?;
            taps.name(&s.address, s.site_id.as_str());
            let handler: Arc<dyn Handler> = node.clone();
            if opts.real_sockets {
                let _ = slots[i + 1].0.set(handler);
            } else {
                net.attach(&s.address, &handler, s.latency_ms);
            }
            nodes.push(node);
        }
        for n in &nodes {
            n.register()?;
        }
        for n in &nodes {
            n.refresh()?;
        }
        let login = |who: (&str, &str)| -> Result<String, SimError> {
            let mut c = Client::new(transport.clone(), &topology.registry, &topology.registry);
            Ok(c.authenticate(who.0, who.1)?)
        };
        let clinician = login(CLINICIAN)?;
        let admin = login(ADMIN)?;
        let mut sim = Sim {
            topology: topology.clone(),
            opts,
            clock,
            net,
            taps,
            transport,
            registry,
            nodes,
            servers,
            dropped: BTreeSet::new(),
            clinician,
            admin,
            transcript: Vec::new(),
            corpus: None,
            gfids: Vec::new(),
            last_job: None,
            mark: 0,
            rng: ChaCha8Rng::seed_from_u64(opts.seed),
            failures: Vec::new(),
        };
        let sites: Vec<Value> = topology
            .sites
            .iter()
            .map(|s| json!({"site": s.site_id.as_str(), "address": s.address, "latency_ms": s.latency_ms, "drop": s.drop}))
            .collect();
        sim.event("boot", json!({"registry": topology.registry, "sites": sites, "real_sockets": opts.real_sockets}));
        for (i, s) in topology.sites.iter().enumerate() {
            if s.drop {
                sim.set_dropped(i, true);
            }
        }
        sim.flush_taps();
        Ok(sim)
    }

    pub fn site_index(&self, site: &str) -> Option<usize> {
        self.topology
            .sites
            .iter()
            .position(|s| s.site_id.as_str() == site)
    }

    fn site_arg(&self, site: &str) -> Result<usize, SimError> {
        self.site_index(site)
            .ok_or_else(|| SimError::Usage(format!("unknown site `{site}`")))
    }

    /// A clinician session connected to site `i`.
    pub fn client(&self, i: usize) -> Client {
        Client::new(
            self.transport.clone(),
            &self.topology.registry,
            &self.topology.sites[i].address,
        )
        .with_session(self.clinician.clone())
    }

    pub fn admin(&self, i: usize) -> Client {
        Client::new(
            self.transport.clone(),
            &self.topology.registry,
            &self.topology.sites[i].address,
        )
        .with_session(self.admin.clone())
    }

    pub fn transport(&self) -> Arc<dyn Transport> {
        self.transport.clone()
    }

    /// Id of the most recent job submitted by `exec`.
    pub fn last_job(&self) -> Option<&str> {
        self.last_job.as_deref()
    }

    pub fn failures(&self) -> &[String] {
        &self.failures
    }

    pub fn transcript(&self) -> &[String] {
        &self.transcript
    }

    pub fn transcript_text(&self) -> String {
        let mut s = self.transcript.join("\n");
        s.push('\n');
        s
    }

    fn event(&mut self, kind: &str, detail: Value) {
        let line = json!({"t": self.clock.now_ms() - START_MS, "event": kind, "detail": detail});
        self.transcript.push(line.to_string());
    }

    fn fail(&mut self, msg: String) {
        self.event("failure", json!(msg));
        self.failures.push(msg);
    }

    /// Appends frames tapped since the last flush to the transcript.
    pub fn flush_taps(&mut self) {
        let t = self.clock.now_ms() - START_MS;
        for f in self.taps.take_new() {
            let payload = String::from_utf8_lossy(f.bytes.get(4..).unwrap_or_default());
            let line = json!({"t": t, "frame": {"from": f.from, "to": f.to, "seq": f.seq, "len": f.bytes.len(), "payload": payload}});
            self.transcript.push(line.to_string());
        }
    }

    pub fn set_dropped(&mut self, i: usize, dropped: bool) {
        let addr = self.topology.sites[i].address.clone();
        self.net.set_dropped(&addr, dropped);
        if dropped {
            self.dropped.insert(i);
        } else {
            self.dropped.remove(&i);
        }
        let site = self.topology.sites[i].site_id.to_string();
        self.event(if dropped { "drop" } else { "restore" }, json!(site));
    }

    pub fn set_latency(&mut self, i: usize, ms: u64) {
        let addr = self.topology.sites[i].address.clone();
        self.net.set_latency(&addr, ms);
        self.topology.sites[i].latency_ms = ms;
    }

    /// Sites a query submitted at `from` can reach within the timeout.
    pub fn reachable(&self, from: usize) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| {
                if i == from {
                    return true;
                }
                if self.opts.real_sockets {
                    return true;
                }
                let (a, b) = (
                    &self.topology.sites[from].address,
                    &self.topology.sites[i].address,
                );
                !self.dropped.contains(&i)
                    && !self.dropped.contains(&from)
                    && self.net.rtt_ms(a, b) <= self.opts.query_timeout_ms
            })
            .collect()
    }

    /// Every image row of the chosen sites.
    pub fn dumps(&self, sites: &[usize]) -> Vec<JoinedRow> {
        sites
            .iter()
            .flat_map(|&i| self.nodes[i].store().dump())
            .collect()
    }

    pub fn all_dumps(&self) -> Vec<JoinedRow> {
        self.dumps(&(0..self.nodes.len()).collect::<Vec<_>>())
    }

    /// Stores the corpus, each patient at one site, through the Add service.
    pub fn ingest(&mut self, corpus: Corpus) -> Result<(), SimError> {
        let parts = corpus.partition(self.nodes.len());
        let mut gfids = vec![String::new(); corpus.files.len()];
        for (i, part) in parts.iter().enumerate() {
            let c = self.client(i);
            for &k in part {
                gfids[k] = c.add(&corpus.files[k])?;
            }
        }
        self.event("ingest", json!({"seed": corpus.manifest.seed, "files": corpus.files.len(), "per_site": parts.iter().map(Vec::len).collect::<Vec<_>>()}));
        self.gfids = gfids;
        self.corpus = Some(corpus);
        self.flush_taps();
        Ok(())
    }

    /// Runs queued tasks everywhere until nothing is left to do.
    pub fn drain(&mut self) -> usize {
        let mut ran = 0;
        for _ in 0..64 {
            let n: usize = self.nodes.iter().map(|n| n.drain()).sum();
            ran += n;
            if n == 0 && self.nodes.iter().all(|n| n.pending() == 0) {
                break;
            }
        }
        self.event("drain", json!({"tasks": ran}));
        self.flush_taps();
        ran
    }

    pub fn suite_inputs(&self) -> SuiteInputs {
        let pids: BTreeSet<String> = self
            .all_dumps()
            .iter()
            .map(|r| r.patient.pid.to_string())
            .collect();
        SuiteInputs {
            pids: pids.into_iter().collect(),
            sites: self
                .topology
                .sites
                .iter()
                .map(|s| s.site_id.to_string())
                .collect(),
        }
    }

    /// Runs one query at site `i` and checks it against the oracle over the
    /// sites it can reach.
    pub fn checked_query(&mut self, i: usize, query: &str) -> Result<ResultSet, SimError> {
        let rs = self.client(i).query(query)?;
        let live = self.reachable(i);
        let expected =
            oracle_eval(&self.dumps(&live), query).map_err(|e| SimError::Usage(e.to_string()))?;
        let site = self.topology.sites[i].site_id.to_string();
        if result_rows(&rs) != expected {
            self.fail(format!("{site}: rows differ from oracle for `{query}`"));
        }
        let live_ids: BTreeSet<&str> = live
            .iter()
            .map(|&k| self.topology.sites[k].site_id.as_str())
            .collect();
        let stray: Vec<String> = rs
            .missing
            .iter()
            .filter(|m| live_ids.contains(m.site.as_str()))
            .map(|m| m.site.to_string())
            .collect();
        if !stray.is_empty() {
            self.fail(format!(
                "{site}: reachable sites reported missing for `{query}`: {stray:?}"
            ));
        }
        Ok(rs)
    }

    /// Retrieves `n` random corpus gfids at site `i`; returns (hash-equal, remote).
    pub fn retrieve_check(&mut self, i: usize, n: usize) -> Result<(usize, usize), SimError> {
        if self.gfids.is_empty() {
            return Err(SimError::Usage("retrieve needs an ingested corpus".into()));
        }
        let (mut ok, mut remote) = (0, 0);
        for _ in 0..n {
            let gfid = self
                .gfids
                .choose(&mut self.rng)
                .cloned()
                .expect("non-empty");
            let g = parse_gfid(&gfid).expect("stored gfids parse");
            let owner = self.site_index(g.site.as_str()).expect("gfid names a site");
            let want = self.nodes[owner]
                .store()
                .image(g.local_id)
                .expect("image exists")
                .blob
                .sha256;
            let got = self.client(i).retrieve(&gfid)?;
            if owner != i {
                remote += 1;
            }
            if sha256_hex(&got) == want {
                ok += 1;
            } else {
                self.fail(format!("retrieve {gfid} at {i}: hash mismatch"));
            }
        }
        Ok((ok, remote))
    }

    /// Frames recorded since the last `mark`.
    pub fn frames_since_mark(&self) -> Vec<TapFrame> {
        self.taps
            .all()
            .split_off(self.mark.min(self.taps.all().len()))
    }

    pub fn mark(&mut self) {
        self.flush_taps();
        self.mark = self.taps.all().len();
    }

    /// Leak scan over metadata logs, every tapped frame and the transcript.
    pub fn leak_hits(&self) -> Vec<String> {
        let Some(c) = &self.corpus else {
            return Vec::new();
        };
        let s = Scanner::new(identity_needles(&c.manifest));
        let mut hits = Vec::new();
        for n in &self.nodes {
            if let Ok(log) = n.store().meta_log_bytes() {
                if let Some(k) = s.first(&log) {
                    hits.push(format!("{} metadata log: needle {k}", n.site()));
                }
            }
        }
        if let Ok(log) = self.registry.store().meta_log_bytes() {
            if let Some(k) = s.first(&log) {
                hits.push(format!("registry metadata log: needle {k}"));
            }
        }
        hits.extend(
            s.scan_frames(&self.taps.all())
                .into_iter()
                .map(|h| format!("{}: needle {}", h.location, h.needle)),
        );
        for (n, line) in self.transcript.iter().enumerate() {
            if let Some(k) = s.first(line.as_bytes()) {
                hits.push(format!("transcript line {}: needle {k}", n + 1));
            }
        }
        hits
    }

    /// Frames since the last mark carrying any stored pixel-data prefix.
    pub fn pixel_hits(&self) -> Vec<String> {
        let needles: Vec<Vec<u8>> = self
            .nodes
            .iter()
            .flat_map(|n| pixel_prefixes(n.store()))
            .collect();
        let s = Scanner::new(needles);
        s.scan_frames(&self.frames_since_mark())
            .into_iter()
            .map(|h| h.location)
            .collect()
    }

    pub fn run_script(&mut self, script: &str) -> Result<(), SimError> {
        for (n, raw) in script.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.event("command", json!(line));
            let outcome = self.command(line).map_err(|e| match e {
                SimError::Usage(msg) => SimError::Parse { line: n + 1, msg },
                other => other,
            })?;
            self.event("result", outcome);
            self.flush_taps();
        }
        Ok(())
    }

    fn command(&mut self, line: &str) -> Result<Value, SimError> {
        let words: Vec<&str> = line.split_whitespace().collect();
        let rest_after = |k: usize| -> String {
            line.split_whitespace()
                .skip(k)
                .collect::<Vec<_>>()
                .join(" ")
        };
        let num = |s: Option<&&str>, what: &str| -> Result<u64, SimError> {
            s.ok_or_else(|| SimError::Usage(format!("missing {what}")))?
                .parse()
                .map_err(|_| SimError::Usage(format!("bad {what}")))
        };
        let site = |k: usize| -> Result<usize, SimError> {
            self.site_arg(
                words
                    .get(k)
                    .ok_or_else(|| SimError::Usage("missing site".into()))?,
            )
        };
        match words[0] {
            "corpus" => {
                let mut p = CorpusParams::new(
                    num(words.get(1), "seed")?,
                    num(words.get(2), "patients")? as usize,
                    num(words.get(3), "per-patient count")? as usize,
                );
                if words.len() >= 6 {
                    p.rows = num(words.get(4), "rows")? as u16;
                    p.cols = num(words.get(5), "cols")? as u16;
                }
                let c = gen_corpus(p)?;
                let files = c.files.len();
                self.ingest(c)?;
                Ok(json!({"files": files}))
            }
            "query" => {
                let i = site(1)?;
                let q = rest_after(2);
                match self.checked_query(i, &q) {
                    Ok(rs) => Ok(
                        json!({"rows": rs.rows.len(), "complete": rs.complete, "missing": rs.missing.iter().map(|m| json!({"site": m.site.as_str(), "reason": m.reason})).collect::<Vec<_>>()}),
                    ),
                    Err(SimError::Client(e)) => Ok(json!({"error": e.to_string()})),
                    Err(e) => Err(e),
                }
            }
            "suite" => {
                let seed = num(words.get(1), "seed")?;
                let n = num(words.get(2), "query count")? as usize;
                let at: Vec<usize> = match words.get(3) {
                    None | Some(&"all") => (0..self.nodes.len()).collect(),
                    Some(s) => vec![self.site_arg(s)?],
                };
                let queries = gen_suite(seed, n, &self.suite_inputs());
                let before = self.failures.len();
                let mut incomplete = 0;
                for &i in &at {
                    for q in &queries {
                        if !self.checked_query(i, q)?.complete {
                            incomplete += 1;
                        }
                    }
                }
                Ok(
                    json!({"queries": queries.len(), "sites": at.len(), "incomplete": incomplete, "mismatches": self.failures.len() - before}),
                )
            }
            "drop" | "restore" => {
                let i = site(1)?;
                self.set_dropped(i, words[0] == "drop");
                Ok(json!({}))
            }
            "latency" => {
                let i = site(1)?;
                let ms = num(words.get(2), "latency")?;
                self.set_latency(i, ms);
                Ok(json!({"latency_ms": ms}))
            }
            "algo" => {
                let i = site(1)?;
                let id = words
                    .get(2)
                    .ok_or_else(|| SimError::Usage("missing algorithm id".into()))?;
                let kind = words
                    .get(3)
                    .ok_or_else(|| SimError::Usage("missing plugin kind".into()))?;
                let mut params = BTreeMap::new();
                for kv in &words[4..] {
                    let (k, v) = kv
                        .split_once('=')
                        .ok_or_else(|| SimError::Usage(format!("bad parameter `{kv}`")))?;
                    params.insert(
                        k.to_string(),
                        v.parse()
                            .map_err(|_| SimError::Usage(format!("bad parameter `{kv}`")))?,
                    );
                }
                match self.admin(i).add_algorithm(id, kind, params) {
                    Ok(id) => Ok(json!({"algo_id": id})),
                    Err(e) => Ok(json!({"error": e.to_string()})),
                }
            }
            "poll" => {
                for n in &self.nodes {
                    let _ = n.refresh();
                }
                Ok(json!({}))
            }
            "exec" => {
                let i = site(1)?;
                let id = words
                    .get(2)
                    .ok_or_else(|| SimError::Usage("missing algorithm id".into()))?;
                let w = rest_after(3);
                match self
                    .client(i)
                    .execute_algorithm(id, (!w.is_empty()).then_some(w.as_str()))
                {
                    Ok(job) => {
                        self.last_job = Some(job.clone());
                        Ok(json!({"job_id": job}))
                    }
                    Err(e) => Ok(json!({"error": e.to_string()})),
                }
            }
            "drain" => Ok(json!({"tasks": self.drain()})),
            "job" => {
                let i = site(1)?;
                let id = match words.get(2) {
                    None | Some(&"last") => self
                        .last_job
                        .clone()
                        .ok_or_else(|| SimError::Usage("no job submitted yet".into()))?,
                    Some(j) => j.to_string(),
                };
                match self.client(i).job_status(&id) {
                    Ok(job) => Ok(
                        json!({"job_id": job.job_id, "state": job.state.to_string(), "derived_written": job.derived_written()}),
                    ),
                    Err(e) => Ok(json!({"error": e.to_string()})),
                }
            }
            "retrieve" => {
                let i = site(1)?;
                let n = num(words.get(2), "count")? as usize;
                let (ok, remote) = self.retrieve_check(i, n)?;
                Ok(json!({"checked": n, "hash_equal": ok, "remote": remote}))
            }
            "advance" => {
                let ms = num(words.get(1), "milliseconds")?;
                self.clock.advance(ms as i64);
                Ok(json!({"now": self.clock.now_ms() - START_MS}))
            }
            "mark" => {
                self.mark();
                Ok(json!({}))
            }
            "check" => {
                self.flush_taps();
                match words.get(1).copied() {
                    Some("leaks") => {
                        let hits = self.leak_hits();
                        for h in &hits {
                            self.fail(format!("identity leak at {h}"));
                        }
                        Ok(json!({"hits": hits.len()}))
                    }
                    Some("locality") => {
                        let hits = self.pixel_hits();
                        for h in &hits {
                            self.fail(format!("pixel data left its site in {h}"));
                        }
                        Ok(json!({"hits": hits.len()}))
                    }
                    Some("exposure") => {
                        let hits = self.pixel_hits();
                        if hits.is_empty() {
                            self.fail(
                                "expected pixel data in frames since mark, found none".into(),
                            );
                        }
                        Ok(json!({"hits": hits.len()}))
                    }
                    _ => Err(SimError::Usage("check leaks|locality|exposure".into())),
                }
            }
            other => Err(SimError::Usage(format!("unknown command `{other}`"))),
        }
    }

    /// Random draws for callers that need the sim's own seeded stream.
    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn random_index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }
}

impl Drop for Sim {
    fn drop(&mut self) {
        for s in self.servers.drain(..) {
            s.shutdown();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topology_file() {
        let t = Topology::parse("registry = 10.0.0.1:7000\nsite = cambridge 10.0.0.2:7001 latency_ms=20\nsite = udine 10.0.0.3:7001 drop=true # down\n").unwrap();
        assert_eq!(t.sites.len(), 2);
        assert_eq!(t.sites[0].latency_ms, 20);
        assert!(t.sites[1].drop);
        assert_eq!(Topology::parse(&t.render()).unwrap(), t);
        assert!(Topology::parse("registry = a:1\nsite = x a:2\nsite = x a:3").is_err());
        assert!(Topology::parse("site = x a:2").is_err());
    }

    const SCRIPT: &str = "\
corpus 5 8 2 32 32
query cambridge SELECT images WHERE patient.sex = 'F'
suite 9 30 all
algo cambridge density-v1 density
poll
exec udine density-v1
drain
job udine last
retrieve cambridge 6
check leaks
";

    #[test]
    fn script_runs_clean_and_repeats() {
        let topo = Topology::named(&["cambridge", "udine"]);
        let mut a = Sim::boot(&topo, SimOptions::default()).unwrap();
        a.run_script(SCRIPT).unwrap();
        assert!(a.failures().is_empty(), "{:?}", a.failures());
        let mut b = Sim::boot(&topo, SimOptions::default()).unwrap();
        b.run_script(SCRIPT).unwrap();
        assert_eq!(a.transcript(), b.transcript());
        assert!(a.transcript().iter().any(|l| l.contains("\"COMPLETED\"")));
    }

    #[test]
    fn latency_beyond_timeout_is_reported() {
        let topo = Topology::named(&["cambridge", "udine"]);
        let mut s = Sim::boot(&topo, SimOptions::default()).unwrap();
        s.run_script("corpus 2 4 1 16 16\nlatency udine 10000\n")
            .unwrap();
        let rs = s.checked_query(0, "SELECT images").unwrap();
        assert!(!rs.complete);
        assert_eq!(rs.missing[0].reason, "timeout");
        assert!(s.failures().is_empty(), "{:?}", s.failures());
    }
}
