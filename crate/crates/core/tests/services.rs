use std::sync::Arc;
use std::time::{Duration, Instant};

use base64::Engine;
use mgvo_core::algorithms::JobState;
use mgvo_core::harness::{gen_corpus, CorpusParams, Sim, SimOptions, Topology};
use mgvo_core::model::SiteId;
use mgvo_core::services::config::ConfigMap;
use mgvo_core::services::proto::Op;
use mgvo_core::services::{
    Client, ClientError, ManualClock, Node, NodeConfig, Registry, RegistryConfig, Role, SimNet,
    SystemClock, Transport, WorkMode,
};
use mgvo_core::store::sha256_hex;

fn corpus(seed: u64, patients: usize) -> Vec<Vec<u8>> {
    gen_corpus(CorpusParams {
        rows: 32,
        cols: 32,
        ..CorpusParams::new(seed, patients, 2)
    })
    .unwrap()
    .files
}

fn code(e: ClientError) -> String {
    match e {
        ClientError::Remote { code, .. } => code,
        other => panic!("expected a remote error, got {other}"),
    }
}

fn two_sites() -> Sim {
    let mut sim = Sim::boot(
        &Topology::named(&["cambridge", "udine"]),
        SimOptions::default(),
    )
    .unwrap();
    sim.ingest(
        gen_corpus(CorpusParams {
            rows: 32,
            cols: 32,
            ..CorpusParams::new(3, 10, 2)
        })
        .unwrap(),
    )
    .unwrap();
    sim
}

#[test]
fn add_is_idempotent() {
    let sim = two_sites();
    let c = sim.client(0);
    let file = &sim.corpus.as_ref().unwrap().files[0];
    let before = sim.nodes[0].store().dump().len();
    let a = c.add(file).unwrap();
    let b = c.add(file).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, sim.gfids[0]);
    assert_eq!(sim.nodes[0].store().dump().len(), before);
}

#[test]
fn retrieve_through_any_site() {
    let sim = two_sites();
    let remote = sim.gfids.iter().find(|g| g.starts_with("udine:")).unwrap();
    let k = sim.gfids.iter().position(|g| g == remote).unwrap();
    let via_cambridge = sim.client(0).retrieve(remote).unwrap();
    let at_home = sim.client(1).retrieve(remote).unwrap();
    assert_eq!(via_cambridge, at_home);
    let stored = sim.nodes[1]
        .store()
        .dump()
        .into_iter()
        .find_map(|r| {
            r.image
                .filter(|i| format!("udine:{}", i.local_id) == *remote)
        })
        .unwrap();
    assert_eq!(sha256_hex(&via_cambridge), stored.blob.sha256);
    assert_ne!(
        via_cambridge,
        sim.corpus.as_ref().unwrap().files[k],
        "stored copy is the anonymized one"
    );
    assert_eq!(
        code(sim.client(0).retrieve("udine:999999").unwrap_err()),
        "NotFound"
    );
    assert_eq!(
        code(sim.client(0).retrieve("nowhere:1").unwrap_err()),
        "NotFound"
    );
    assert_eq!(
        code(sim.client(0).retrieve("not a gfid").unwrap_err()),
        "BadRequest"
    );
}

#[test]
fn authentication_comes_before_effects() {
    let sim = two_sites();
    let node = &sim.nodes[0];
    let writes = node.store().write_count();
    let anon = Client::new(
        sim.transport(),
        &sim.topology.registry,
        &sim.topology.sites[0].address,
    );
    let file = corpus(40, 1).remove(0);
    assert!(matches!(anon.add(&file), Err(ClientError::NoSession)));
    let b64 = base64::engine::general_purpose::STANDARD.encode(&file);
    let raw = anon.call(
        &sim.topology.sites[0].address,
        Op::Add,
        serde_json::json!({ "bytes_b64": b64 }),
    );
    assert_eq!(code(raw.unwrap_err()), "AuthFailure");
    let forged = anon.with_session("bm9ib2R5.c2lnbmF0dXJl");
    assert_eq!(code(forged.add(&file).unwrap_err()), "AuthFailure");
    assert_eq!(
        code(forged.query("SELECT images").unwrap_err()),
        "AuthFailure"
    );
    assert_eq!(
        code(
            sim.client(0)
                .add_algorithm("density-v1", "density", Default::default())
                .unwrap_err()
        ),
        "AuthFailure"
    );
    assert_eq!(node.store().write_count(), writes);
    assert!(node.algorithms().is_empty());

    let mut c = Client::new(
        sim.transport(),
        &sim.topology.registry,
        &sim.topology.sites[0].address,
    );
    assert_eq!(
        code(c.authenticate("clinician", "wrong").unwrap_err()),
        "BadCredentials"
    );
    assert_eq!(
        code(c.authenticate("nobody", "x").unwrap_err()),
        "UserUnknown"
    );
}

#[test]
fn tokens_expire() {
    let sim = two_sites();
    assert!(sim.client(0).query("SELECT patients").is_ok());
    sim.clock.advance(9 * 3600 * 1000);
    assert_eq!(
        code(sim.client(0).query("SELECT patients").unwrap_err()),
        "AuthFailure"
    );
}

#[test]
fn query_errors_are_typed() {
    let sim = two_sites();
    let c = sim.client(0);
    assert_eq!(
        code(
            c.query("SELECT images WHERE patient.sex < 'F'")
                .unwrap_err()
        ),
        "TypeMismatch"
    );
    assert_eq!(
        code(
            c.query("SELECT images WHERE patient.age IN [60,50]")
                .unwrap_err()
        ),
        "BadRange"
    );
    assert_eq!(
        code(c.query("SELECT images WHERE patient.shoe = 3").unwrap_err()),
        "UnknownField"
    );
    assert_eq!(code(c.query("SELECT").unwrap_err()), "SyntaxError");
}

#[test]
fn registry_outage_keeps_queries_working() {
    let sim = two_sites();
    let full = sim.client(0).query("SELECT images").unwrap();
    sim.net.set_dropped(&sim.topology.registry, true);
    let again = sim.client(0).query("SELECT images").unwrap();
    assert_eq!(full, again);
    assert!(again.complete);
    let err = sim.nodes[0].refresh().unwrap_err();
    assert_eq!(err.code, "RemoteUnreachable");
    assert_eq!(sim.nodes[0].topology().len(), 2);
}

#[test]
fn restart_keeps_store_topology_and_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let net = SimNet::new();
    let clock = Arc::new(ManualClock::new(1_100_000_000_000));
    let secret = b"restart-vo-secret-0001".to_vec();
    let registry = Registry::open(
        RegistryConfig {
            listen: "10.0.0.1:7000".into(),
            vo_secret: secret.clone(),
            data_dir: Some(dir.path().join("registry")),
            token_ttl_s: 3600,
        },
        clock.clone(),
    )
    .unwrap();
    registry
        .add_user("admin", "pw", &[Role::Admin, Role::Clinician])
        .unwrap();
    let h: Arc<dyn mgvo_core::services::Handler> = registry.clone();
    net.attach("10.0.0.1:7000", &h, 0);
    let open = || {
        let mut cfg = NodeConfig::new(
            SiteId::new("udine").unwrap(),
            "10.0.0.2:7001",
            "10.0.0.1:7000",
            b"udine-secret-000001",
            &secret,
        );
        cfg.data_dir = Some(dir.path().join("udine"));
        cfg.seed = Some(5);
        let n = Node::open(cfg, net.clone(), clock.clone(), WorkMode::Manual).unwrap();
        let h: Arc<dyn mgvo_core::services::Handler> = n.clone();
        net.attach("10.0.0.2:7001", &h, 0);
        n
    };
    let node = open();
    node.register().unwrap();
    node.refresh().unwrap();
    for f in corpus(9, 4) {
        node.ingest(&f).unwrap();
    }
    let mut admin = Client::new(net.clone(), "10.0.0.1:7000", "10.0.0.2:7001");
    admin.authenticate("admin", "pw").unwrap();
    admin
        .add_algorithm("microcalc-v1", "microcalc", Default::default())
        .unwrap();
    let job = admin
        .execute_algorithm("microcalc-v1", Some("image.view = 'CC'"))
        .unwrap();
    node.drain();
    let before = (
        node.store().dump(),
        node.topology(),
        node.job(&job).unwrap(),
    );
    assert_eq!(before.2.state, JobState::Completed);
    drop(node);
    net.detach("10.0.0.2:7001");

    net.set_dropped("10.0.0.1:7000", true);
    let node = open();
    assert_eq!(node.store().dump(), before.0);
    assert_eq!(node.topology(), before.1);
    assert_eq!(node.job(&job).unwrap(), before.2);
    assert_eq!(node.algorithms().len(), 1);
    net.detach("10.0.0.1:7000");
    drop(registry);

    let registry = Registry::open(
        RegistryConfig {
            listen: "10.0.0.1:7000".into(),
            vo_secret: secret,
            data_dir: Some(dir.path().join("registry")),
            token_ttl_s: 3600,
        },
        clock,
    )
    .unwrap();
    assert_eq!(registry.list_sites().len(), 1);
    assert_eq!(registry.list_algorithms().len(), 1);
    assert!(registry.authenticate("admin", "pw").is_ok());
}

#[test]
fn tap_counts_match_service_counters() {
    let mut sim = two_sites();
    sim.run_script("suite 4 40 all\nalgo udine density-v1 density\npoll\nexec cambridge density-v1\ndrain\nretrieve udine 10\n").unwrap();
    assert!(sim.failures().is_empty(), "{:?}", sim.failures());
    let taps = sim.taps.counts();
    for n in &sim.nodes {
        let (recv, sent) = n.frame_counts();
        assert_eq!(taps[n.site().as_str()], (sent, recv), "{}", n.site());
    }
    let (recv, sent) = sim.registry.frame_counts();
    assert_eq!(taps["registry"], (sent, recv));
    for f in sim.taps.all() {
        assert!(
            sim.taps
                .all()
                .iter()
                .filter(|g| g.from == f.from && g.to == f.to && g.seq == f.seq)
                .count()
                == 1
        );
    }
}

#[test]
fn dropped_site_in_topology_file() {
    let topo = Topology::parse("registry = 10.0.0.1:7000\nsite = cambridge 10.0.0.2:7001\nsite = udine 10.0.0.3:7001 drop=true\n").unwrap();
    let mut sim = Sim::boot(&topo, SimOptions::default()).unwrap();
    sim.run_script("query cambridge SELECT images\n").unwrap();
    assert!(
        sim.transcript()
            .iter()
            .any(|l| l
                .contains("\"missing\":[{\"reason\":\"connection_refused\",\"site\":\"udine\"}]")),
        "{}",
        sim.transcript_text()
    );
}

#[test]
fn real_sockets_run_the_same_script() {
    let script = "corpus 6 6 2 16 16\nquery udine SELECT patients WHERE patient.sex = 'F'\nsuite 2 20 all\nalgo cambridge density-v1 density\npoll\nexec udine density-v1\ndrain\njob udine last\nretrieve cambridge 8\ncheck leaks\n";
    let topo = Topology::parse(
        "registry = 127.0.0.1:0\nsite = cambridge 127.0.0.1:0\nsite = udine 127.0.0.1:0\n",
    )
    .unwrap();
    let mut tcp = Sim::boot(
        &topo,
        SimOptions {
            real_sockets: true,
            ..SimOptions::default()
        },
    )
    .unwrap();
    tcp.run_script(script).unwrap();
    assert!(tcp.failures().is_empty(), "{:?}", tcp.failures());
    let mut sim = Sim::boot(
        &Topology::named(&["cambridge", "udine"]),
        SimOptions::default(),
    )
    .unwrap();
    sim.run_script(script).unwrap();
    let results = |s: &Sim| {
        s.transcript()
            .iter()
            .filter(|l| l.contains("\"event\":\"result\""))
            .cloned()
            .collect::<Vec<_>>()
    };
    assert_eq!(results(&tcp), results(&sim));
}

#[test]
fn port_clash_is_reported() {
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = taken.local_addr().unwrap();
    let topo = Topology::parse(&format!("registry = 127.0.0.1:0\nsite = udine {addr}\n")).unwrap();
    let err = Sim::boot(
        &topo,
        SimOptions {
            real_sockets: true,
            ..SimOptions::default()
        },
    )
    .err()
    .unwrap();
    assert!(err.to_string().starts_with("PortClash"), "{err}");
}

#[test]
fn threaded_nodes_finish_jobs_on_their_own() {
    let net = SimNet::new();
    let transport: Arc<dyn Transport> = net.clone();
    let clock = Arc::new(SystemClock);
    let secret = b"threaded-vo-secret-01".to_vec();
    let registry = Registry::open(
        RegistryConfig {
            listen: "10.1.0.1:7000".into(),
            vo_secret: secret.clone(),
            data_dir: None,
            token_ttl_s: 3600,
        },
        clock.clone(),
    )
    .unwrap();
    registry
        .add_user("admin", "pw", &[Role::Admin, Role::Clinician])
        .unwrap();
    let h: Arc<dyn mgvo_core::services::Handler> = registry.clone();
    net.attach("10.1.0.1:7000", &h, 0);
    let mut nodes = Vec::new();
    for (i, site) in ["cambridge", "udine"].into_iter().enumerate() {
        let addr = format!("10.1.0.{}:7001", i + 2);
        let mut cfg = NodeConfig::new(
            SiteId::new(site).unwrap(),
            &addr,
            "10.1.0.1:7000",
            format!("{site}-secret-000001").as_bytes(),
            &secret,
        );
        cfg.poll_interval_s = 1;
        let n = Node::open(cfg, transport.clone(), clock.clone(), WorkMode::Threaded).unwrap();
        let h: Arc<dyn mgvo_core::services::Handler> = n.clone();
        net.attach(&addr, &h, 0);
        n.register().unwrap();
        nodes.push(n);
    }
    for n in &nodes {
        n.refresh().unwrap();
        n.start_workers();
    }
    for (k, f) in corpus(12, 6).iter().enumerate() {
        nodes[k % 2].ingest(f).unwrap();
    }
    let mut admin = Client::new(transport.clone(), "10.1.0.1:7000", "10.1.0.2:7001");
    admin.authenticate("admin", "pw").unwrap();
    admin
        .add_algorithm("density-v1", "density", Default::default())
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(10);
    while nodes[1].algorithms().is_empty() {
        assert!(Instant::now() < deadline, "catalog never reached udine");
        std::thread::sleep(Duration::from_millis(50));
    }
    let job = admin.execute_algorithm("density-v1", None).unwrap();
    let rec = loop {
        let rec = admin.job_status(&job).unwrap();
        if rec.state.is_terminal() {
            break rec;
        }
        assert!(Instant::now() < deadline, "job stuck in {}", rec.state);
        std::thread::sleep(Duration::from_millis(20));
    };
    assert_eq!(rec.state, JobState::Completed);
    assert_eq!(rec.derived_written(), 12);
    let rs = admin
        .query("SELECT images WHERE derived.kind = 'smf'")
        .unwrap();
    assert_eq!(rs.rows.len(), 12);
    for n in &nodes {
        n.shutdown();
    }
}

#[test]
fn config_file_builds_a_node() {
    let text = "# udine grid-box\nsite_id = udine\nlisten = 127.0.0.1:7101\nregistry = 127.0.0.1:7100\ndata_dir = /tmp/udine\nsite_secret = udine-site-secret-1\nvo_secret = shared-vo-secret-01\nquery_timeout_ms = 2500\npoll_interval_s = 7\n";
    let cfg = ConfigMap::parse(text).unwrap().node_config().unwrap();
    assert_eq!(cfg.site_id.as_str(), "udine");
    assert_eq!(cfg.query_timeout_ms, 2500);
    assert_eq!(cfg.poll_interval_s, 7);
    assert!(ConfigMap::parse("site_id = udine\n")
        .unwrap()
        .node_config()
        .is_err());
    assert!(ConfigMap::parse("just words\n").is_err());
}
