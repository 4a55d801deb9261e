//! The central node: user authentication, site membership and the
//! algorithm catalog. It is never on the data path.

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use super::auth::{self, Claims, Role, UserDb};
use super::body;
use super::proto::{self, Op, Request, Response};
use super::transport::Handler;
use super::{parse_body, to_body, Clock, ServiceError};
use crate::algorithms::{AlgorithmDescriptor, Catalog};
use crate::model::{is_valid_address, SiteDescriptor, SiteId};
use crate::store::Store;

#[derive(Debug, Clone)]
pub struct RegistryConfig {
    pub listen: String,
    pub vo_secret: Vec<u8>,
    /// `None` keeps everything in memory.
    pub data_dir: Option<PathBuf>,
    pub token_ttl_s: i64,
}

pub struct Registry {
    cfg: RegistryConfig,
    clock: Arc<dyn Clock>,
    store: Store,
    users: RwLock<UserDb>,
    sites: RwLock<Vec<SiteDescriptor>>,
    catalog: RwLock<Catalog>,
    rng: Mutex<ChaCha8Rng>,
    vo_in: AtomicU64,
    vo_out: AtomicU64,
}

const DOC: &str = "vo";

impl Registry {
    pub fn open(cfg: RegistryConfig, clock: Arc<dyn Clock>) -> Result<Arc<Registry>, ServiceError> {
        let site = SiteId::new("registry").expect("valid id");
        let store = match &cfg.data_dir {
            Some(d) => Store::open(site, d)?,
            None => Store::in_memory(site),
        };
        let users = match &cfg.data_dir {
            Some(d) => {
                UserDb::load(&d.join("users")).map_err(|e| ServiceError::new("InternalError", e))?
            }
            None => UserDb::default(),
        };
        let sites = store
            .get_doc(DOC, "sites")
            .and_then(|v| serde_json::from_value(v).ok())
            .unwrap_or_default();
        let catalog = store
            .get_doc(DOC, "catalog")
            .and_then(|v| serde_json::from_value(v).ok())
            .unwrap_or_default();
        let seed = u64::from_le_bytes(
            crate::store::sha256_hex(&cfg.vo_secret).as_bytes()[..8]
                .try_into()
                .unwrap(),
        ) ^ clock.now_ms() as u64;
        Ok(Arc::new(Registry {
            cfg,
            clock,
            store,
            users: RwLock::new(users),
            sites: RwLock::new(sites),
            catalog: RwLock::new(catalog),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            vo_in: AtomicU64::new(0),
            vo_out: AtomicU64::new(0),
        }))
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn address(&self) -> &str {
        &self.cfg.listen
    }

    /// Adds or replaces a user and rewrites the user file.
    pub fn add_user(&self, name: &str, password: &str, roles: &[Role]) -> Result<(), ServiceError> {
        let mut users = self.users.write().unwrap();
        users
            .add_user(name, password, roles, &mut *self.rng.lock().unwrap())
            .map_err(ServiceError::bad_request)?;
        if let Some(d) = &self.cfg.data_dir {
            users
                .save(&d.join("users"))
                .map_err(|e| ServiceError::new("StoreFailure", e.to_string()))?;
        }
        Ok(())
    }

    pub fn authenticate(&self, user: &str, password: &str) -> Result<String, ServiceError> {
        let roles = self.users.read().unwrap().verify(user, password)?;
        let claims = Claims::new(user, &roles, self.clock.now_s(), self.cfg.token_ttl_s);
        Ok(auth::sign(&claims, &self.cfg.vo_secret))
    }

    /// Adds a site or updates the entry with the same id, keeping order.
    pub fn register_site(&self, d: SiteDescriptor) -> Result<(), ServiceError> {
        if !is_valid_address(&d.address) {
            return Err(ServiceError::bad_request(format!(
                "bad address `{}`",
                d.address
            )));
        }
        let mut sites = self.sites.write().unwrap();
        if let Some(other) = sites
            .iter()
            .find(|s| s.address == d.address && s.site_id != d.site_id)
        {
            return Err(ServiceError::new(
                "DuplicateAddress",
                format!("{} already uses {}", other.site_id, d.address),
            ));
        }
        match sites.iter_mut().find(|s| s.site_id == d.site_id) {
            Some(slot) => *slot = d,
            None => sites.push(d),
        }
        self.store.put_doc(DOC, "sites", to_body(&*sites))?;
        Ok(())
    }

    pub fn list_sites(&self) -> Vec<SiteDescriptor> {
        self.sites.read().unwrap().clone()
    }

    pub fn add_algorithm(&self, d: AlgorithmDescriptor) -> Result<(), ServiceError> {
        let mut cat = self.catalog.write().unwrap();
        cat.register(d)?;
        self.store.put_doc(DOC, "catalog", to_body(&*cat))?;
        Ok(())
    }

    pub fn list_algorithms(&self) -> Vec<AlgorithmDescriptor> {
        self.catalog.read().unwrap().list()
    }

    /// VO frames received and sent.
    pub fn frame_counts(&self) -> (u64, u64) {
        (
            self.vo_in.load(Ordering::SeqCst),
            self.vo_out.load(Ordering::SeqCst),
        )
    }

    fn claims(&self, req: &Request) -> Result<Claims, ServiceError> {
        let t = req
            .session
            .as_deref()
            .ok_or_else(|| ServiceError::auth("no session token"))?;
        auth::validate_token(t, &self.cfg.vo_secret, self.clock.now_s())
            .map_err(|e| ServiceError::auth(e.to_string()))
    }

    fn dispatch(
        &self,
        req: &Request,
        claims: &Result<Claims, ServiceError>,
    ) -> Result<Value, ServiceError> {
        let need = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(ServiceError::auth(format!("{what} required")))
            }
        };
        let c = || claims.clone();
        match req.op {
            Op::Authenticate => {
                let b: body::Authenticate = parse_body(&req.body)?;
                Ok(to_body(&body::Token {
                    token: self.authenticate(&b.username, &b.password)?,
                }))
            }
            Op::RegisterSite => {
                let b: body::Site = parse_body(&req.body)?;
                let c = c()?;
                need(
                    c.has(Role::Admin) || c.node_site() == Some(b.site.site_id.as_str()),
                    "admin role or the site's own node",
                )?;
                self.register_site(b.site)?;
                Ok(json!({}))
            }
            Op::ListSites => {
                c()?;
                Ok(to_body(&body::Sites {
                    sites: self.list_sites(),
                }))
            }
            Op::AddAlgorithm => {
                let b: body::AddAlgorithm = parse_body(&req.body)?;
                need(c()?.has(Role::Admin), "admin role")?;
                let d = AlgorithmDescriptor::new(&b.algo_id, b.kind.parse()?, b.params)?;
                self.add_algorithm(d)?;
                Ok(to_body(&body::AlgoId { algo_id: b.algo_id }))
            }
            Op::ListAlgorithms => {
                c()?;
                Ok(to_body(&body::Algorithms {
                    algorithms: self.list_algorithms(),
                }))
            }
            other => Err(ServiceError::bad_request(format!(
                "{} is not served by the registry",
                other.name()
            ))),
        }
    }
}

impl Handler for Registry {
    fn handle(&self, frame: &[u8]) -> Vec<u8> {
        let req: Request = match proto::decode(frame) {
            Ok(r) => r,
            Err(e) => return proto::encode(&Response::err("BadRequest", e.to_string())),
        };
        let claims = self.claims(&req);
        let vo = req.via.as_deref().is_some_and(|t| {
            auth::validate_token(t, &self.cfg.vo_secret, self.clock.now_s())
                .is_ok_and(|c| c.node_site().is_some())
        });
        if vo {
            self.vo_in.fetch_add(1, Ordering::SeqCst);
        }
        let resp = match self.dispatch(&req, &claims) {
            Ok(body) => Response::ok(body),
            Err(e) => Response::err(e.code, e.msg),
        };
        if vo {
            self.vo_out.fetch_add(1, Ordering::SeqCst);
        }
        proto::encode(&resp)
    }
}
