//! Clinician-side calls into a node and the registry.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use thiserror::Error;

use super::body;
use super::proto::{self, Op, Request, Response};
use super::transport::{NetError, Transport, CLIENT};
use crate::algorithms::{AlgorithmDescriptor, JobRecord};
use crate::federation::{from_xml, ResultSet};
use crate::model::SiteDescriptor;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClientError {
    #[error("{0}")]
    Net(#[from] NetError),
    #[error("{code}: {msg}")]
    Remote { code: String, msg: String },
    #[error("unexpected reply: {0}")]
    Decode(String),
    #[error("not logged in")]
    NoSession,
}

pub struct Client {
    net: Arc<dyn Transport>,
    pub registry: String,
    pub node: String,
    pub session: Option<String>,
    pub timeout: Duration,
}

impl Client {
    pub fn new(net: Arc<dyn Transport>, registry: &str, node: &str) -> Client {
        Client {
            net,
            registry: registry.into(),
            node: node.into(),
            session: None,
            timeout: Duration::from_secs(60),
        }
    }

    pub fn with_session(mut self, token: impl Into<String>) -> Client {
        self.session = Some(token.into());
        self
    }

    pub fn call(&self, to: &str, op: Op, body: Value) -> Result<Value, ClientError> {
        let frame = proto::encode(&Request::new(op, self.session.clone(), body));
        let raw = self.net.exchange(CLIENT, to, &frame, self.timeout)?;
        let resp: Response = proto::decode(&raw).map_err(|e| ClientError::Decode(e.to_string()))?;
        match resp.error {
            None => Ok(resp.body),
            Some(e) => Err(ClientError::Remote {
                code: e.code,
                msg: e.msg,
            }),
        }
    }

    fn node_call<T: DeserializeOwned>(&self, op: Op, body: Value) -> Result<T, ClientError> {
        if self.session.is_none() {
            return Err(ClientError::NoSession);
        }
        decode(self.call(&self.node, op, body)?)
    }

    /// Logs in at the registry and keeps the token.
    pub fn authenticate(&mut self, username: &str, password: &str) -> Result<String, ClientError> {
        let b = json!({ "username": username, "password": password });
        let t: body::Token = decode(self.call(&self.registry, Op::Authenticate, b)?)?;
        self.session = Some(t.token.clone());
        Ok(t.token)
    }

    pub fn add(&self, dicom: &[u8]) -> Result<String, ClientError> {
        let g: body::Gfid = self.node_call(Op::Add, json!({ "bytes_b64": B64.encode(dicom) }))?;
        Ok(g.gfid)
    }

    pub fn retrieve(&self, gfid: &str) -> Result<Vec<u8>, ClientError> {
        let b: body::Bytes = self.node_call(Op::Retrieve, json!({ "gfid": gfid }))?;
        B64.decode(b.bytes_b64)
            .map_err(|e| ClientError::Decode(e.to_string()))
    }

    /// The result set as MG-XML text.
    pub fn query_xml(&self, query: &str) -> Result<String, ClientError> {
        let r: body::ResultXml = self.node_call(Op::Query, json!({ "query": query }))?;
        Ok(r.resultset_xml)
    }

    pub fn query(&self, query: &str) -> Result<ResultSet, ClientError> {
        from_xml(&self.query_xml(query)?).map_err(|e| ClientError::Decode(e.to_string()))
    }

    pub fn add_algorithm(
        &self,
        algo_id: &str,
        kind: &str,
        params: BTreeMap<String, f64>,
    ) -> Result<String, ClientError> {
        let b = body::AddAlgorithm {
            algo_id: algo_id.into(),
            kind: kind.into(),
            params,
        };
        let r: body::AlgoId = self.node_call(Op::AddAlgorithm, super::to_body(&b))?;
        Ok(r.algo_id)
    }

    pub fn execute_algorithm(
        &self,
        algo_id: &str,
        where_: Option<&str>,
    ) -> Result<String, ClientError> {
        let b = body::ExecuteAlgorithm {
            algo_id: algo_id.into(),
            where_: where_.map(str::to_string),
        };
        let r: body::JobId = self.node_call(Op::ExecuteAlgorithm, super::to_body(&b))?;
        Ok(r.job_id)
    }

    pub fn job_status(&self, job_id: &str) -> Result<JobRecord, ClientError> {
        self.node_call(Op::JobStatus, json!({ "job_id": job_id }))
    }

    /// Current membership as held by the registry.
    pub fn list_sites(&self) -> Result<Vec<SiteDescriptor>, ClientError> {
        if self.session.is_none() {
            return Err(ClientError::NoSession);
        }
        let s: body::Sites = decode(self.call(&self.registry, Op::ListSites, json!({}))?)?;
        Ok(s.sites)
    }

    pub fn list_algorithms(&self) -> Result<Vec<AlgorithmDescriptor>, ClientError> {
        let a: body::Algorithms = self.node_call(Op::ListAlgorithms, json!({}))?;
        Ok(a.algorithms)
    }
}

fn decode<T: DeserializeOwned>(v: Value) -> Result<T, ClientError> {
    serde_json::from_value(v).map_err(|e| ClientError::Decode(e.to_string()))
}
