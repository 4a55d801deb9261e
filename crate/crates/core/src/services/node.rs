//! A grid-box: one site's store behind the six services, plus the query
//! fan-out and the site's share of every job.

use std::collections::{BTreeMap, VecDeque};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock, Weak};
use std::thread::JoinHandle;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use chrono::Datelike;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tracing::{debug, warn};

use super::auth::{self, Claims, Role};
use super::body::{self, Scope};
use super::proto::{self, Op, Request, Response};
use super::transport::{Handler, NetError, Transport};
use super::{parse_body, to_body, Clock, ServiceError};
use crate::algorithms::{
    advance_job, new_job_id, run_task, schedule_job, AlgorithmDescriptor, Catalog, JobRecord,
    TaskRecord, TaskResult, TaskState,
};
use crate::dicom::{extract_metadata, parse_dicom, tags, write_dicom, Vr};
use crate::federation::{
    analyze, execute_local, federate, from_xml, FederationError, ResultSet, SiteFailure,
    DEFAULT_TIMEOUT,
};
use crate::mgql::{parse_query, print_expr, print_query, QueryAst, Target};
use crate::model::{
    derive_age, format_gfid, parse_gfid, pseudonymize, GlobalFileId, ImageRecord, PatientRecord,
    SiteDescriptor, SiteId,
};
use crate::store::{sha256_hex, Store};

#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub site_id: SiteId,
    pub display_name: String,
    pub listen: String,
    pub registry: String,
    /// `None` keeps the store in memory.
    pub data_dir: Option<PathBuf>,
    pub site_secret: Vec<u8>,
    pub vo_secret: Vec<u8>,
    pub query_timeout_ms: u64,
    pub poll_interval_s: u64,
    pub public: bool,
    pub token_ttl_s: i64,
    pub seed: Option<u64>,
}

impl NodeConfig {
    pub fn new(
        site_id: SiteId,
        listen: &str,
        registry: &str,
        site_secret: &[u8],
        vo_secret: &[u8],
    ) -> NodeConfig {
        NodeConfig {
            display_name: site_id.to_string(),
            site_id,
            listen: listen.to_string(),
            registry: registry.to_string(),
            data_dir: None,
            site_secret: site_secret.to_vec(),
            vo_secret: vo_secret.to_vec(),
            query_timeout_ms: DEFAULT_TIMEOUT.as_millis() as u64,
            poll_interval_s: 10,
            public: true,
            token_ttl_s: 300,
            seed: None,
        }
    }

    pub fn descriptor(&self) -> SiteDescriptor {
        SiteDescriptor {
            site_id: self.site_id.clone(),
            display_name: self.display_name.clone(),
            address: self.listen.clone(),
            public: self.public,
        }
    }
}

/// Who runs queued tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkMode {
    /// Background threads started by [`Node::start_workers`].
    Threaded,
    /// Only explicit calls to [`Node::drain`].
    Manual,
}

struct Work {
    origin: SiteId,
    job_id: String,
    algo: AlgorithmDescriptor,
    task: TaskRecord,
}

#[derive(Default)]
struct Queues {
    work: VecDeque<Work>,
    /// Finished tasks whose report has not reached the job origin yet.
    outbox: VecDeque<(SiteId, TaskResult)>,
}

pub struct Node {
    cfg: NodeConfig,
    store: Store,
    net: Arc<dyn Transport>,
    clock: Arc<dyn Clock>,
    mode: WorkMode,
    topology: RwLock<Vec<SiteDescriptor>>,
    catalog: RwLock<Catalog>,
    jobs: Mutex<BTreeMap<String, JobRecord>>,
    queues: Mutex<Queues>,
    wake: Condvar,
    stop: AtomicBool,
    workers: Mutex<Vec<JoinHandle<()>>>,
    rng: Mutex<ChaCha8Rng>,
    vo_in: AtomicU64,
    vo_out: AtomicU64,
}

const CACHE: &str = "cache";
const JOB: &str = "job";

fn net_failure(e: NetError) -> SiteFailure {
    match e {
        NetError::Timeout => SiteFailure::Timeout,
        NetError::ConnectionRefused => SiteFailure::ConnectionRefused,
        NetError::Io(_) => SiteFailure::Unreachable,
    }
}

impl Node {
    pub fn open(
        cfg: NodeConfig,
        net: Arc<dyn Transport>,
        clock: Arc<dyn Clock>,
        mode: WorkMode,
    ) -> Result<Arc<Node>, ServiceError> {
        if cfg.site_secret.len() < 16 || cfg.vo_secret.len() < 16 {
            return Err(ServiceError::bad_request(
                "secrets must be at least 16 bytes",
            ));
        }
        let store = match &cfg.data_dir {
            Some(d) => Store::open(cfg.site_id.clone(), d)?,
            None => Store::in_memory(cfg.site_id.clone()),
        };
        let mut topology: Vec<SiteDescriptor> = store
            .get_doc(CACHE, "topology")
            .and_then(|v| serde_json::from_value(v).ok())
            .unwrap_or_default();
        if !topology.iter().any(|s| s.site_id == cfg.site_id) {
            topology.insert(0, cfg.descriptor());
        }
        let catalog = store
            .get_doc(CACHE, "catalog")
            .and_then(|v| serde_json::from_value(v).ok())
            .unwrap_or_default();
        let jobs = store
            .docs(JOB)
            .into_iter()
            .filter_map(|(k, v)| Some((k, serde_json::from_value(v).ok()?)))
            .collect();
        let seed = cfg.seed.unwrap_or_else(|| {
            let h = sha256_hex(&cfg.site_secret);
            u64::from_str_radix(&h[..16], 16).unwrap() ^ clock.now_ms() as u64
        });
        Ok(Arc::new(Node {
            store,
            net,
            clock,
            mode,
            topology: RwLock::new(topology),
            catalog: RwLock::new(catalog),
            jobs: Mutex::new(jobs),
            queues: Mutex::new(Queues::default()),
            wake: Condvar::new(),
            stop: AtomicBool::new(false),
            workers: Mutex::new(Vec::new()),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            vo_in: AtomicU64::new(0),
            vo_out: AtomicU64::new(0),
            cfg,
        }))
    }

    pub fn site(&self) -> &SiteId {
        &self.cfg.site_id
    }

    pub fn address(&self) -> &str {
        &self.cfg.listen
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn topology(&self) -> Vec<SiteDescriptor> {
        self.topology.read().unwrap().clone()
    }

    pub fn algorithms(&self) -> Vec<AlgorithmDescriptor> {
        self.catalog.read().unwrap().list()
    }

    pub fn job(&self, job_id: &str) -> Option<JobRecord> {
        self.jobs.lock().unwrap().get(job_id).cloned()
    }

    /// VO frames received and sent by this node.
    pub fn frame_counts(&self) -> (u64, u64) {
        (
            self.vo_in.load(Ordering::SeqCst),
            self.vo_out.load(Ordering::SeqCst),
        )
    }

    fn node_token(&self) -> String {
        let user = format!("node:{}", self.cfg.site_id);
        auth::sign(
            &Claims::new(
                &user,
                &[Role::Clinician],
                self.clock.now_s(),
                self.cfg.token_ttl_s,
            ),
            &self.cfg.vo_secret,
        )
    }

    fn timeout(&self) -> Duration {
        Duration::from_millis(self.cfg.query_timeout_ms)
    }

    fn call(
        &self,
        to: &str,
        op: Op,
        session: Option<String>,
        body: Value,
        timeout: Duration,
    ) -> Result<Response, NetError> {
        let req = Request {
            via: Some(self.node_token()),
            ..Request::new(op, session, body)
        };
        let frame = proto::encode(&req);
        let resp = self.net.exchange(&self.cfg.listen, to, &frame, timeout)?;
        self.vo_out.fetch_add(1, Ordering::SeqCst);
        self.vo_in.fetch_add(1, Ordering::SeqCst);
        proto::decode(&resp).map_err(|e| NetError::Io(e.to_string()))
    }

    fn call_ok(
        &self,
        to: &str,
        op: Op,
        session: Option<String>,
        body: Value,
    ) -> Result<Value, ServiceError> {
        let resp = self
            .call(to, op, session, body, self.timeout())
            .map_err(|e| ServiceError::new("RemoteUnreachable", format!("{to}: {e}")))?;
        match resp.error {
            None => Ok(resp.body),
            Some(e) => Err(ServiceError::new(wire_code(&e.code), e.msg)),
        }
    }

    fn address_of(&self, site: &SiteId) -> Option<String> {
        self.topology
            .read()
            .unwrap()
            .iter()
            .find(|s| &s.site_id == site)
            .map(|s| s.address.clone())
    }

    /// Announces this site to the registry.
    pub fn register(&self) -> Result<(), ServiceError> {
        let body = to_body(&body::Site {
            site: self.cfg.descriptor(),
        });
        self.call_ok(
            &self.cfg.registry,
            Op::RegisterSite,
            Some(self.node_token()),
            body,
        )?;
        Ok(())
    }

    /// Pulls topology and catalog from the registry. On failure the cached
    /// copies stay in use.
    pub fn refresh(&self) -> Result<(), ServiceError> {
        let sites: body::Sites = parse_body(&self.call_ok(
            &self.cfg.registry,
            Op::ListSites,
            Some(self.node_token()),
            json!({}),
        )?)?;
        let algos: body::Algorithms = parse_body(&self.call_ok(
            &self.cfg.registry,
            Op::ListAlgorithms,
            Some(self.node_token()),
            json!({}),
        )?)?;
        let mut topo = sites.sites;
        if !topo.iter().any(|s| s.site_id == self.cfg.site_id) {
            topo.insert(0, self.cfg.descriptor());
        }
        self.store.put_doc(CACHE, "topology", to_body(&topo))?;
        *self.topology.write().unwrap() = topo;
        let mut cat = self.catalog.write().unwrap();
        cat.replace_all(algos.algorithms);
        self.store.put_doc(CACHE, "catalog", to_body(&*cat))?;
        Ok(())
    }

    /// Sets the cached topology directly, as if fetched from the registry.
    pub fn set_topology(&self, sites: Vec<SiteDescriptor>) -> Result<(), ServiceError> {
        self.store.put_doc(CACHE, "topology", to_body(&sites))?;
        *self.topology.write().unwrap() = sites;
        Ok(())
    }

    /// Stores one DICOM file under its pseudonym and returns its gfid.
    /// Identical input yields the existing gfid.
    pub fn ingest(&self, bytes: &[u8]) -> Result<GlobalFileId, ServiceError> {
        let id = ingest_dicom(&self.store, &self.cfg.site_secret, bytes)?;
        Ok(GlobalFileId::new(self.cfg.site_id.clone(), id))
    }

    pub fn retrieve(&self, gfid: &str) -> Result<Vec<u8>, ServiceError> {
        let g = parse_gfid(gfid)?;
        if g.site == self.cfg.site_id {
            let img = self
                .store
                .image(g.local_id)
                .ok_or_else(|| ServiceError::new("NotFound", format!("no image {gfid}")))?;
            return Ok(self.store.get_blob(&img.blob)?);
        }
        let addr = self
            .address_of(&g.site)
            .ok_or_else(|| ServiceError::new("NotFound", format!("unknown site {}", g.site)))?;
        let b: body::Bytes = parse_body(&self.call_ok(
            &addr,
            Op::Retrieve,
            Some(self.node_token()),
            to_body(&body::Gfid { gfid: gfid.into() }),
        )?)?;
        B64.decode(b.bytes_b64).map_err(|e| {
            ServiceError::new(
                "RemoteUnreachable",
                format!("bad payload from {}: {e}", g.site),
            )
        })
    }

    /// Runs any EXEC clause here, then answers from this store alone.
    fn answer_local(&self, q: &QueryAst) -> Result<ResultSet, ServiceError> {
        if let Some(algo_id) = &q.exec {
            let algo = self.catalog.read().unwrap().get(algo_id)?.clone();
            let selector = QueryAst {
                target: Target::Images,
                expr: q.expr.clone(),
                exec: None,
            };
            let job_id = new_job_id(self.clock.now_ms(), &mut *self.rng.lock().unwrap());
            let task = TaskRecord {
                site: self.cfg.site_id.clone(),
                state: TaskState::Running,
                selector: print_query(&selector),
                images_selected: 0,
                derived_written: 0,
                error: None,
            };
            let done = run_task(&self.store, &algo, &job_id, &task);
            if let Some(e) = done.error {
                return Err(ServiceError::new("AlgorithmFailure", e));
            }
        }
        let plain = QueryAst {
            exec: None,
            ..q.clone()
        };
        Ok(execute_local(&self.store, &plain)?)
    }

    fn forward(&self, site: &SiteId, sub: &QueryAst) -> Result<ResultSet, SiteFailure> {
        let addr = self.address_of(site).ok_or(SiteFailure::Unreachable)?;
        let b = to_body(&body::Query {
            query: print_query(sub),
            scope: Scope::Local,
        });
        let resp = self
            .call(&addr, Op::Query, Some(self.node_token()), b, self.timeout())
            .map_err(net_failure)?;
        if let Some(e) = resp.error {
            return Err(SiteFailure::RemoteError(e.code));
        }
        let x: body::ResultXml =
            parse_body(&resp.body).map_err(|_| SiteFailure::RemoteError("MalformedXml".into()))?;
        from_xml(&x.resultset_xml).map_err(|e| SiteFailure::RemoteError(e.code().into()))
    }

    pub fn query(&self, text: &str, scope: Scope) -> Result<ResultSet, ServiceError> {
        let q = parse_query(text)?;
        if let Some(a) = &q.exec {
            self.catalog.read().unwrap().get(a)?;
        }
        if scope == Scope::Local {
            return self.answer_local(&q);
        }
        let topo = self.topology();
        let local_err = Mutex::new(None);
        let rs = federate(
            &q,
            &self.cfg.site_id,
            &topo,
            |sub| {
                self.answer_local(sub).map_err(|e| {
                    let msg = e.to_string();
                    *local_err.lock().unwrap() = Some(e);
                    FederationError::SchemaViolation(msg)
                })
            },
            |site, sub| self.forward(site, sub),
        );
        match rs {
            Ok(rs) => Ok(rs),
            Err(e) => Err(local_err.into_inner().unwrap().unwrap_or_else(|| e.into())),
        }
    }

    /// Forwards a new descriptor to the registry, then adds it here.
    pub fn add_algorithm(
        &self,
        session: &str,
        b: body::AddAlgorithm,
    ) -> Result<String, ServiceError> {
        let d = AlgorithmDescriptor::new(&b.algo_id, b.kind.parse()?, b.params.clone())?;
        self.call_ok(
            &self.cfg.registry,
            Op::AddAlgorithm,
            Some(session.to_string()),
            to_body(&b),
        )?;
        let mut cat = self.catalog.write().unwrap();
        if cat.get(&d.algo_id).is_err() {
            cat.register(d)?;
            self.store.put_doc(CACHE, "catalog", to_body(&*cat))?;
        }
        Ok(b.algo_id)
    }

    pub fn execute_algorithm(
        &self,
        algo_id: &str,
        where_: Option<&str>,
    ) -> Result<String, ServiceError> {
        let algo = self.catalog.read().unwrap().get(algo_id)?.clone();
        let text = match where_.map(str::trim).filter(|w| !w.is_empty()) {
            Some(w) => format!("SELECT images WHERE {w}"),
            None => "SELECT images".to_string(),
        };
        let q = parse_query(&text)?;
        let plan = analyze(&q, &self.cfg.site_id, &self.topology())?;
        let now = self.clock.now_ms();
        let job_id = new_job_id(now, &mut *self.rng.lock().unwrap());
        let selector = q.expr.as_ref().map(print_expr).unwrap_or_default();
        let job = schedule_job(
            job_id.clone(),
            algo_id,
            &selector,
            &plan,
            &self.cfg.site_id,
            now,
        );
        let tasks = job.tasks.clone();
        self.save_job(job)?;
        for task in tasks {
            if task.site == self.cfg.site_id {
                self.enqueue(Work {
                    origin: self.cfg.site_id.clone(),
                    job_id: job_id.clone(),
                    algo: algo.clone(),
                    task,
                });
                continue;
            }
            let b = body::RunTask {
                job_id: job_id.clone(),
                origin: self.cfg.site_id.clone(),
                algo: algo.clone(),
                task: task.clone(),
            };
            let sent = match self.address_of(&task.site) {
                Some(addr) => self
                    .call_ok(&addr, Op::RunTask, Some(self.node_token()), to_body(&b))
                    .map(|_| ()),
                None => Err(ServiceError::new(
                    "RemoteUnreachable",
                    "site not in topology",
                )),
            };
            if let Err(e) = sent {
                warn!(job = %job_id, site = %task.site, "dispatch failed: {e}");
                let r = TaskResult {
                    job_id: job_id.clone(),
                    site: task.site.clone(),
                    state: TaskState::Failed,
                    images_selected: 0,
                    derived_written: 0,
                    error: Some(format!("dispatch: {e}")),
                };
                self.apply_result(&r)?;
            }
        }
        Ok(job_id)
    }

    fn save_job(&self, job: JobRecord) -> Result<(), ServiceError> {
        self.store.put_doc(JOB, &job.job_id, to_body(&job))?;
        self.jobs.lock().unwrap().insert(job.job_id.clone(), job);
        Ok(())
    }

    fn apply_result(&self, r: &TaskResult) -> Result<JobRecord, ServiceError> {
        let mut jobs = self.jobs.lock().unwrap();
        let job = jobs
            .get(&r.job_id)
            .ok_or_else(|| ServiceError::new("NotFound", format!("no job {}", r.job_id)))?;
        let next = advance_job(job, r, self.clock.now_ms())?;
        self.store.put_doc(JOB, &next.job_id, to_body(&next))?;
        jobs.insert(next.job_id.clone(), next.clone());
        Ok(next)
    }

    fn enqueue(&self, w: Work) {
        self.queues.lock().unwrap().work.push_back(w);
        self.wake.notify_all();
    }

    /// Tasks waiting to run here plus reports waiting to be delivered.
    pub fn pending(&self) -> usize {
        let q = self.queues.lock().unwrap();
        q.work.len() + q.outbox.len()
    }

    /// Runs queued tasks and delivers their reports. Returns the number of
    /// tasks run.
    pub fn drain(&self) -> usize {
        let mut ran = 0;
        loop {
            let next = self.queues.lock().unwrap().work.pop_front();
            let Some(w) = next else { break };
            self.run_work(w);
            ran += 1;
        }
        self.flush_outbox();
        ran
    }

    fn run_work(&self, w: Work) {
        debug!(job = %w.job_id, site = %self.cfg.site_id, "running task");
        let done = run_task(&self.store, &w.algo, &w.job_id, &w.task);
        let r = TaskResult {
            job_id: w.job_id,
            site: done.site,
            state: done.state,
            images_selected: done.images_selected,
            derived_written: done.derived_written,
            error: done.error,
        };
        self.queues.lock().unwrap().outbox.push_back((w.origin, r));
    }

    fn flush_outbox(&self) {
        let pending: Vec<_> = self.queues.lock().unwrap().outbox.drain(..).collect();
        let mut retry = Vec::new();
        for (origin, r) in pending {
            let delivered = if origin == self.cfg.site_id {
                self.apply_result(&r).map(|_| ())
            } else {
                match self.address_of(&origin) {
                    Some(addr) => self
                        .call_ok(&addr, Op::TaskResult, Some(self.node_token()), to_body(&r))
                        .map(|_| ()),
                    None => Err(ServiceError::new(
                        "RemoteUnreachable",
                        "origin not in topology",
                    )),
                }
            };
            match delivered {
                Ok(()) => {}
                Err(e) if e.code == "RemoteUnreachable" => retry.push((origin, r)),
                Err(e) => warn!(job = %r.job_id, "task report rejected: {e}"),
            }
        }
        self.queues.lock().unwrap().outbox.extend(retry);
    }

    /// Starts the task worker and the registry poller.
    pub fn start_workers(self: &Arc<Self>) {
        if self.mode != WorkMode::Threaded {
            return;
        }
        let weak: Weak<Node> = Arc::downgrade(self);
        let worker = std::thread::spawn(move || loop {
            let Some(node) = weak.upgrade() else { return };
            if node.stop.load(Ordering::SeqCst) {
                return;
            }
            node.drain();
            let q = node.queues.lock().unwrap();
            if q.work.is_empty() {
                let _ = node
                    .wake
                    .wait_timeout(q, Duration::from_millis(250))
                    .unwrap();
            }
        });
        let weak: Weak<Node> = Arc::downgrade(self);
        let poller = std::thread::spawn(move || {
            let mut waited = u64::MAX;
            loop {
                let Some(node) = weak.upgrade() else { return };
                if node.stop.load(Ordering::SeqCst) {
                    return;
                }
                if waited >= node.cfg.poll_interval_s.max(1) * 10 {
                    if let Err(e) = node.refresh() {
                        debug!(site = %node.cfg.site_id, "registry poll failed: {e}");
                    }
                    waited = 0;
                }
                drop(node);
                std::thread::sleep(Duration::from_millis(100));
                waited += 1;
            }
        });
        self.workers.lock().unwrap().extend([worker, poller]);
    }

    /// Stops background threads and waits for them.
    pub fn shutdown(&self) {
        self.stop.store(true, Ordering::SeqCst);
        self.wake.notify_all();
        let handles: Vec<_> = self.workers.lock().unwrap().drain(..).collect();
        for h in handles {
            let _ = h.join();
        }
    }

    fn is_node_token(&self, t: &str) -> bool {
        auth::validate_token(t, &self.cfg.vo_secret, self.clock.now_s())
            .is_ok_and(|c| c.node_site().is_some())
    }

    fn claims(&self, req: &Request) -> Result<Claims, ServiceError> {
        let t = req
            .session
            .as_deref()
            .ok_or_else(|| ServiceError::auth("no session token"))?;
        auth::validate_token(t, &self.cfg.vo_secret, self.clock.now_s())
            .map_err(|e| ServiceError::auth(e.to_string()))
    }

    fn dispatch(&self, req: &Request, c: &Claims) -> Result<Value, ServiceError> {
        let from_node = || {
            if c.node_site().is_some() {
                Ok(())
            } else {
                Err(ServiceError::auth("node session required"))
            }
        };
        match req.op {
            Op::Add => {
                let b: body::Bytes = parse_body(&req.body)?;
                let bytes = B64
                    .decode(b.bytes_b64)
                    .map_err(|e| ServiceError::bad_request(format!("bytes_b64: {e}")))?;
                Ok(to_body(&body::Gfid {
                    gfid: format_gfid(&self.ingest(&bytes)?),
                }))
            }
            Op::Retrieve => {
                let b: body::Gfid = parse_body(&req.body)?;
                Ok(to_body(&body::Bytes {
                    bytes_b64: B64.encode(self.retrieve(&b.gfid)?),
                }))
            }
            Op::Query => {
                let b: body::Query = parse_body(&req.body)?;
                Ok(to_body(&body::ResultXml {
                    resultset_xml: self.query(&b.query, b.scope)?.to_xml(),
                }))
            }
            Op::AddAlgorithm => {
                let b: body::AddAlgorithm = parse_body(&req.body)?;
                if !c.has(Role::Admin) {
                    return Err(ServiceError::auth("admin role required"));
                }
                let id = self.add_algorithm(req.session.as_deref().unwrap_or_default(), b)?;
                Ok(to_body(&body::AlgoId { algo_id: id }))
            }
            Op::ExecuteAlgorithm => {
                let b: body::ExecuteAlgorithm = parse_body(&req.body)?;
                Ok(to_body(&body::JobId {
                    job_id: self.execute_algorithm(&b.algo_id, b.where_.as_deref())?,
                }))
            }
            Op::JobStatus => {
                let b: body::JobId = parse_body(&req.body)?;
                let job = self
                    .job(&b.job_id)
                    .ok_or_else(|| ServiceError::new("NotFound", format!("no job {}", b.job_id)))?;
                Ok(to_body(&job))
            }
            Op::RunTask => {
                from_node()?;
                let b: body::RunTask = parse_body(&req.body)?;
                if b.task.site != self.cfg.site_id {
                    return Err(ServiceError::bad_request(format!(
                        "task is for {}",
                        b.task.site
                    )));
                }
                self.enqueue(Work {
                    origin: b.origin,
                    job_id: b.job_id,
                    algo: b.algo,
                    task: b.task,
                });
                Ok(json!({}))
            }
            Op::TaskResult => {
                from_node()?;
                let r: TaskResult = parse_body(&req.body)?;
                if c.node_site() != Some(r.site.as_str()) {
                    return Err(ServiceError::auth("a site may only report its own tasks"));
                }
                self.apply_result(&r)?;
                Ok(json!({}))
            }
            Op::ListSites => Ok(to_body(&body::Sites {
                sites: self.topology(),
            })),
            Op::ListAlgorithms => Ok(to_body(&body::Algorithms {
                algorithms: self.algorithms(),
            })),
            Op::Authenticate | Op::RegisterSite => Err(ServiceError::bad_request(format!(
                "{} is served by the registry",
                req.op.name()
            ))),
        }
    }
}

/// Pseudonymizes a DICOM file, drops the patient name and stores it.
/// Returns the local id; identical input yields the existing id.
pub fn ingest_dicom(store: &Store, site_secret: &[u8], bytes: &[u8]) -> Result<u64, ServiceError> {
    let mut t = parse_dicom(bytes)?;
    let meta = extract_metadata(&t)?;
    let pid = pseudonymize(&meta.patient_id_raw, site_secret)?;
    t.set_text(tags::PATIENT_ID, Vr::LO, pid.as_str());
    t.remove(tags::PATIENT_NAME);
    let anon = write_dicom(&t)?;
    if let Some(id) = store.image_by_blob(&sha256_hex(&anon)) {
        return Ok(id);
    }
    let age = derive_age(meta.birth_date, meta.study_date)?;
    let blob = store.put_blob(&anon)?;
    store.upsert_patient(PatientRecord {
        pid: pid.clone(),
        sex: meta.sex,
        birth_year: meta.birth_date.year(),
        height_m: meta.height_m,
        weight_kg: meta.weight_kg,
    })?;
    Ok(store.insert_image(ImageRecord {
        local_id: 0,
        pid,
        modality: meta.modality,
        laterality: meta.laterality,
        view: meta.view,
        study_date: meta.study_date,
        age_at_study: age,
        rows: meta.rows,
        cols: meta.cols,
        blob,
    })?)
}

/// Error codes relayed from a peer keep their name when we know it.
fn wire_code(code: &str) -> &'static str {
    const KNOWN: &[&str] = &[
        "AuthFailure",
        "BadCredentials",
        "UserUnknown",
        "NotFound",
        "ParseError",
        "MissingTag",
        "SyntaxError",
        "UnknownField",
        "TypeMismatch",
        "BadRange",
        "UnknownPluginKind",
        "DuplicateAlgoId",
        "UnknownAlgorithm",
        "BadParams",
        "DuplicateAddress",
        "IntegrityError",
        "BadRequest",
        "StoreFailure",
        "RemoteUnreachable",
    ];
    KNOWN
        .iter()
        .find(|k| **k == code)
        .copied()
        .unwrap_or("RemoteError")
}

impl Handler for Node {
    fn handle(&self, frame: &[u8]) -> Vec<u8> {
        let req: Request = match proto::decode(frame) {
            Ok(r) => r,
            Err(e) => return proto::encode(&Response::err("BadRequest", e.to_string())),
        };
        let vo = req.via.as_deref().is_some_and(|t| self.is_node_token(t));
        if vo {
            self.vo_in.fetch_add(1, Ordering::SeqCst);
        }
        let resp = match self.claims(&req).and_then(|c| self.dispatch(&req, &c)) {
            Ok(b) => Response::ok(b),
            Err(e) => Response::err(e.code, e.msg),
        };
        if vo {
            self.vo_out.fetch_add(1, Ordering::SeqCst);
        }
        proto::encode(&resp)
    }
}

impl Drop for Node {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.wake.notify_all();
    }
}
