//! Wire protocol: a 4-byte big-endian length, then a UTF-8 JSON message.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const PROTOCOL_VERSION: u32 = 1;
pub const MAX_FRAME: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Op {
    Authenticate,
    Add,
    Retrieve,
    Query,
    AddAlgorithm,
    ExecuteAlgorithm,
    JobStatus,
    RegisterSite,
    ListSites,
    /// Site to job origin: a task finished.
    TaskResult,
    /// Job origin to site: run one task.
    RunTask,
    ListAlgorithms,
}

impl Op {
    pub fn name(self) -> &'static str {
        match self {
            Op::Authenticate => "Authenticate",
            Op::Add => "Add",
            Op::Retrieve => "Retrieve",
            Op::Query => "Query",
            Op::AddAlgorithm => "AddAlgorithm",
            Op::ExecuteAlgorithm => "ExecuteAlgorithm",
            Op::JobStatus => "JobStatus",
            Op::RegisterSite => "RegisterSite",
            Op::ListSites => "ListSites",
            Op::TaskResult => "TaskResult",
            Op::RunTask => "RunTask",
            Op::ListAlgorithms => "ListAlgorithms",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub mg: u32,
    pub op: Op,
    pub session: Option<String>,
    /// Node token of the grid-box sending the frame, absent for clients.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub via: Option<String>,
    pub body: Value,
}

impl Request {
    pub fn new(op: Op, session: Option<String>, body: Value) -> Request {
        Request {
            mg: PROTOCOL_VERSION,
            op,
            session,
            via: None,
            body,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireError {
    pub code: String,
    pub msg: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub mg: u32,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<WireError>,
    pub body: Value,
}

impl Response {
    pub fn ok(body: Value) -> Response {
        Response {
            mg: PROTOCOL_VERSION,
            status: "ok".into(),
            error: None,
            body,
        }
    }

    pub fn err(code: &str, msg: impl Into<String>) -> Response {
        Response {
            mg: PROTOCOL_VERSION,
            status: "error".into(),
            error: Some(WireError {
                code: code.into(),
                msg: msg.into(),
            }),
            body: Value::Object(Default::default()),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Length-prefixes a JSON message.
pub fn encode<T: Serialize>(msg: &T) -> Vec<u8> {
    let body = serde_json::to_vec(msg).expect("protocol messages serialize");
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

/// Splits a whole frame into its JSON payload.
pub fn payload(frame: &[u8]) -> io::Result<&[u8]> {
    let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
    let len = frame.get(..4).ok_or_else(|| bad("short frame"))?;
    let len = u32::from_be_bytes(len.try_into().unwrap()) as usize;
    if len > MAX_FRAME {
        return Err(bad("frame exceeds 64 MiB"));
    }
    if frame.len() != len + 4 {
        return Err(bad("frame length does not match prefix"));
    }
    Ok(&frame[4..])
}

pub fn decode<T: for<'de> Deserialize<'de>>(frame: &[u8]) -> io::Result<T> {
    serde_json::from_slice(payload(frame)?)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

/// Reads one whole frame (prefix included). `Ok(None)` on clean end of stream.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let n = u32::from_be_bytes(len) as usize;
    if n > MAX_FRAME {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            "frame exceeds 64 MiB",
        ));
    }
    let mut frame = Vec::with_capacity(n + 4);
    frame.extend_from_slice(&len);
    frame.resize(n + 4, 0);
    r.read_exact(&mut frame[4..])?;
    Ok(Some(frame))
}

pub fn write_frame(w: &mut impl Write, frame: &[u8]) -> io::Result<()> {
    w.write_all(frame)?;
    w.flush()
}

#[cfg(test)]
mod tests {
    use serde_json::json;

    use super::*;

    #[test]
    fn request_layout() {
        let r = Request::new(Op::Query, None, json!({"query": "SELECT images"}));
        let f = encode(&r);
        assert_eq!(&f[..4], &((f.len() - 4) as u32).to_be_bytes());
        assert_eq!(
            std::str::from_utf8(&f[4..]).unwrap(),
            r#"{"mg":1,"op":"Query","session":null,"body":{"query":"SELECT images"}}"#
        );
        assert_eq!(decode::<Request>(&f).unwrap(), r);
    }

    #[test]
    fn response_layout() {
        let ok = encode(&Response::ok(json!({})));
        assert_eq!(&ok[4..], br#"{"mg":1,"status":"ok","body":{}}"#);
        let err = encode(&Response::err("NotFound", "no such image"));
        assert_eq!(
            &err[4..],
            br#"{"mg":1,"status":"error","error":{"code":"NotFound","msg":"no such image"},"body":{}}"#
        );
    }

    #[test]
    fn stream_framing() {
        let a = encode(&Response::ok(json!(1)));
        let b = encode(&Response::ok(json!(2)));
        let mut buf = a.clone();
        buf.extend_from_slice(&b);
        let mut cur = io::Cursor::new(buf);
        assert_eq!(read_frame(&mut cur).unwrap(), Some(a));
        assert_eq!(read_frame(&mut cur).unwrap(), Some(b));
        assert_eq!(read_frame(&mut cur).unwrap(), None);

        let mut huge = io::Cursor::new(((MAX_FRAME + 1) as u32).to_be_bytes().to_vec());
        assert!(read_frame(&mut huge).is_err());
        assert!(payload(&[0, 0, 0, 5, b'{']).is_err());
    }
}
