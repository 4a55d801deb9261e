//! The grid-box node with its six services, the registry (central node), the
//! wire protocol and the transports they share.
//!
//! Traffic is plain TCP; TLS would wrap the stream inside [`TcpTransport`]
//! and [`TcpServer`] without touching framing or handlers.

pub mod auth;
pub mod client;
pub mod config;
pub mod node;
pub mod proto;
pub mod registry;
pub mod transport;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicI64, Ordering};

use serde::{Deserialize, Serialize};

use crate::algorithms::{AlgoError, AlgorithmDescriptor, TaskRecord};
use crate::dicom::DicomError;
use crate::federation::FederationError;
use crate::mgql::QueryError;
use crate::model::{ModelError, SiteDescriptor, SiteId};
use crate::store::StoreError;

pub use auth::{Claims, Role};
pub use client::{Client, ClientError};
pub use node::{ingest_dicom, Node, NodeConfig, WorkMode};
pub use registry::{Registry, RegistryConfig};
pub use transport::{
    Handler, NetError, SimNet, TapFrame, TapLog, Tapped, TcpServer, TcpTransport, Transport, CLIENT,
};

pub trait Clock: Send + Sync {
    /// Milliseconds since the Unix epoch.
    fn now_ms(&self) -> i64;

    fn now_s(&self) -> i64 {
        self.now_ms().div_euclid(1000)
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> i64 {
        chrono::Utc::now().timestamp_millis()
    }
}

/// A clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicI64);

impl ManualClock {
    pub fn new(start_ms: i64) -> ManualClock {
        ManualClock(AtomicI64::new(start_ms))
    }

    pub fn advance(&self, ms: i64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> i64 {
        self.0.load(Ordering::SeqCst)
    }
}

/// An error as it appears on the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceError {
    pub code: &'static str,
    pub msg: String,
}

impl ServiceError {
    pub fn new(code: &'static str, msg: impl Into<String>) -> ServiceError {
        ServiceError {
            code,
            msg: msg.into(),
        }
    }

    pub fn auth(msg: impl Into<String>) -> ServiceError {
        ServiceError::new("AuthFailure", msg)
    }

    pub fn bad_request(msg: impl fmt::Display) -> ServiceError {
        ServiceError::new("BadRequest", msg.to_string())
    }
}

impl fmt::Display for ServiceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.msg)
    }
}

impl std::error::Error for ServiceError {}

impl From<StoreError> for ServiceError {
    fn from(e: StoreError) -> Self {
        let code = match e {
            StoreError::NotFound => "NotFound",
            StoreError::IntegrityError(_) => "IntegrityError",
            _ => "StoreFailure",
        };
        ServiceError::new(code, e.to_string())
    }
}

impl From<DicomError> for ServiceError {
    fn from(e: DicomError) -> Self {
        let code = if matches!(e, DicomError::MissingTag(_)) {
            "MissingTag"
        } else {
            "ParseError"
        };
        ServiceError::new(code, e.to_string())
    }
}

impl From<QueryError> for ServiceError {
    fn from(e: QueryError) -> Self {
        ServiceError::new(e.code(), e.to_string())
    }
}

impl From<FederationError> for ServiceError {
    fn from(e: FederationError) -> Self {
        match e {
            FederationError::StoreFailure(s) => s.into(),
            e => ServiceError::new(e.code(), e.to_string()),
        }
    }
}

impl From<AlgoError> for ServiceError {
    fn from(e: AlgoError) -> Self {
        ServiceError::new(e.code(), e.to_string())
    }
}

impl From<auth::AuthError> for ServiceError {
    fn from(e: auth::AuthError) -> Self {
        ServiceError::new(e.code(), e.to_string())
    }
}

impl From<ModelError> for ServiceError {
    fn from(e: ModelError) -> Self {
        ServiceError::new("BadRequest", e.to_string())
    }
}

/// Message bodies, one struct per shape.
pub mod body {
    use super::*;

    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
    pub struct Authenticate {
        pub username: String,
        pub password: String,
    }

    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
    pub struct Token {
        pub token: String,
    }

    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
    pub struct Bytes {
        pub bytes_b64: String,
    }

    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
    pub struct Gfid {
        pub gfid: String,
    }

    #[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
    #[serde(rename_all = "lowercase")]
    pub enum Scope {
        /// Fan out across the VO.
        #[default]
        Vo,
        /// This site only; used for forwarded sub-queries.
        Local,
    }

    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
    pub struct Query {
        pub query: String,
        #[serde(default)]
        pub scope: Scope,
    }

    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
    pub struct ResultXml {
        pub resultset_xml: String,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct AddAlgorithm {
        pub algo_id: String,
        pub kind: String,
        #[serde(default)]
        pub params: BTreeMap<String, f64>,
    }

    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
    pub struct AlgoId {
        pub algo_id: String,
    }

    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
    pub struct ExecuteAlgorithm {
        pub algo_id: String,
        /// Selector predicate; absent selects every image.
        #[serde(default, rename = "where")]
        pub where_: Option<String>,
    }

    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
    pub struct JobId {
        pub job_id: String,
    }

    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
    pub struct Site {
        pub site: SiteDescriptor,
    }

    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
    pub struct Sites {
        pub sites: Vec<SiteDescriptor>,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct Algorithms {
        pub algorithms: Vec<AlgorithmDescriptor>,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct RunTask {
        pub job_id: String,
        pub origin: SiteId,
        pub algo: AlgorithmDescriptor,
        pub task: TaskRecord,
    }
}

pub(crate) fn parse_body<T: for<'de> Deserialize<'de>>(
    v: &serde_json::Value,
) -> Result<T, ServiceError> {
    T::deserialize(v).map_err(|e| ServiceError::bad_request(format!("bad request body: {e}")))
}

pub(crate) fn to_body<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("bodies serialize")
}
