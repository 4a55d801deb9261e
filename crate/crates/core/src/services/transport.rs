//! Request/response transports: loopback TCP, an in-memory network for the
//! simulation harness, and a tap that records frames on VO links.

use std::collections::{BTreeMap, HashMap};
use std::io;
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, Weak};
use std::thread::JoinHandle;
use std::time::Duration;

use thiserror::Error;

use super::proto::{read_frame, write_frame};

/// Caller label for clients outside the VO.
pub const CLIENT: &str = "client";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetError {
    #[error("timeout")]
    Timeout,
    #[error("connection refused")]
    ConnectionRefused,
    #[error("i/o: {0}")]
    Io(String),
}

impl From<io::Error> for NetError {
    fn from(e: io::Error) -> Self {
        match e.kind() {
            io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock => NetError::Timeout,
            io::ErrorKind::ConnectionRefused => NetError::ConnectionRefused,
            _ => NetError::Io(e.to_string()),
        }
    }
}

/// Serves whole frames.
pub trait Handler: Send + Sync {
    fn handle(&self, frame: &[u8]) -> Vec<u8>;
}

pub trait Transport: Send + Sync {
    /// Sends one request frame from `from` (the caller's own address, or
    /// [`CLIENT`]) to `to` and waits for the response frame.
    fn exchange(
        &self,
        from: &str,
        to: &str,
        frame: &[u8],
        timeout: Duration,
    ) -> Result<Vec<u8>, NetError>;
}

impl<T: Transport + ?Sized> Transport for Arc<T> {
    fn exchange(
        &self,
        from: &str,
        to: &str,
        frame: &[u8],
        timeout: Duration,
    ) -> Result<Vec<u8>, NetError> {
        (**self).exchange(from, to, frame, timeout)
    }
}

/// One connection per exchange over TCP.
#[derive(Debug, Default, Clone, Copy)]
pub struct TcpTransport;

impl Transport for TcpTransport {
    fn exchange(
        &self,
        _from: &str,
        to: &str,
        frame: &[u8],
        timeout: Duration,
    ) -> Result<Vec<u8>, NetError> {
        let addr = to
            .to_socket_addrs()
            .map_err(NetError::from)?
            .next()
            .ok_or_else(|| NetError::Io(format!("cannot resolve {to}")))?;
        let mut s = TcpStream::connect_timeout(&addr, timeout)?;
        s.set_read_timeout(Some(timeout))?;
        s.set_write_timeout(Some(timeout))?;
        s.set_nodelay(true)?;
        write_frame(&mut s, frame)?;
        let resp = read_frame(&mut s)?
            .ok_or_else(|| NetError::Io("connection closed before response".into()))?;
        let _ = s.shutdown(Shutdown::Both);
        Ok(resp)
    }
}

/// A running TCP listener.
pub struct TcpServer {
    addr: String,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl TcpServer {
    pub fn bind(addr: &str, handler: Arc<dyn Handler>) -> io::Result<TcpServer> {
        let listener = TcpListener::bind(addr)?;
        let local = listener.local_addr()?.to_string();
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let thread = std::thread::spawn(move || {
            for conn in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(mut conn) = conn else { continue };
                let h = Arc::clone(&handler);
                std::thread::spawn(move || {
                    let _ = conn.set_nodelay(true);
                    while let Ok(Some(frame)) = read_frame(&mut conn) {
                        let resp = h.handle(&frame);
                        if write_frame(&mut conn, &resp).is_err() {
                            break;
                        }
                    }
                });
            }
        });
        Ok(TcpServer {
            addr: local,
            stop,
            thread: Some(thread),
        })
    }

    /// The bound address, with the real port when bound to port 0.
    pub fn addr(&self) -> &str {
        &self.addr
    }

    /// Blocks until the listener stops.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(&self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for TcpServer {
    fn drop(&mut self) {
        if self.thread.is_some() {
            self.stop_now();
        }
    }
}

struct SimEndpoint {
    handler: Weak<dyn Handler>,
    latency_ms: u64,
    dropped: bool,
}

/// In-memory network with per-endpoint latency and binary drop.
///
/// The round trip between two endpoints costs twice the sum of their
/// latencies, in virtual time. An exchange whose round trip exceeds the
/// caller's timeout is never delivered; neither is one touching a dropped
/// endpoint.
#[derive(Default)]
pub struct SimNet {
    endpoints: Mutex<HashMap<String, SimEndpoint>>,
}

impl SimNet {
    pub fn new() -> Arc<SimNet> {
        Arc::new(SimNet::default())
    }

    pub fn attach(&self, addr: &str, handler: &Arc<dyn Handler>, latency_ms: u64) {
        let ep = SimEndpoint {
            handler: Arc::downgrade(handler),
            latency_ms,
            dropped: false,
        };
        self.endpoints.lock().unwrap().insert(addr.to_string(), ep);
    }

    pub fn detach(&self, addr: &str) {
        self.endpoints.lock().unwrap().remove(addr);
    }

    pub fn set_dropped(&self, addr: &str, dropped: bool) {
        if let Some(ep) = self.endpoints.lock().unwrap().get_mut(addr) {
            ep.dropped = dropped;
        }
    }

    pub fn set_latency(&self, addr: &str, latency_ms: u64) {
        if let Some(ep) = self.endpoints.lock().unwrap().get_mut(addr) {
            ep.latency_ms = latency_ms;
        }
    }

    /// Virtual round-trip time between two endpoints.
    pub fn rtt_ms(&self, from: &str, to: &str) -> u64 {
        let eps = self.endpoints.lock().unwrap();
        let lat = |a: &str| eps.get(a).map_or(0, |e| e.latency_ms);
        2 * (lat(from) + lat(to))
    }
}

impl Transport for SimNet {
    fn exchange(
        &self,
        from: &str,
        to: &str,
        frame: &[u8],
        timeout: Duration,
    ) -> Result<Vec<u8>, NetError> {
        let handler = {
            let eps = self.endpoints.lock().unwrap();
            let target = eps.get(to).ok_or(NetError::ConnectionRefused)?;
            let source = eps.get(from);
            if target.dropped || source.is_some_and(|s| s.dropped) {
                return Err(NetError::ConnectionRefused);
            }
            let rtt = 2 * (target.latency_ms + source.map_or(0, |s| s.latency_ms));
            if u128::from(rtt) > timeout.as_millis() {
                return Err(NetError::Timeout);
            }
            target
                .handler
                .upgrade()
                .ok_or(NetError::ConnectionRefused)?
        };
        Ok(handler.handle(frame))
    }
}

/// One frame seen on a VO link.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TapFrame {
    pub from: String,
    pub to: String,
    /// Position on the directed link `from -> to`.
    pub seq: u64,
    pub bytes: Vec<u8>,
}

/// Records every delivered frame between named VO endpoints.
#[derive(Default)]
pub struct TapLog {
    inner: Mutex<TapState>,
}

#[derive(Default)]
struct TapState {
    names: HashMap<String, String>,
    seq: BTreeMap<(String, String), u64>,
    frames: Vec<TapFrame>,
    cursor: usize,
}

impl TapState {
    fn push(&mut self, from: &str, to: &str, bytes: &[u8]) {
        let seq = self
            .seq
            .entry((from.to_string(), to.to_string()))
            .or_insert(0);
        *seq += 1;
        let f = TapFrame {
            from: from.to_string(),
            to: to.to_string(),
            seq: *seq,
            bytes: bytes.to_vec(),
        };
        self.frames.push(f);
    }
}

impl TapLog {
    pub fn new() -> Arc<TapLog> {
        Arc::new(TapLog::default())
    }

    /// Names a VO endpoint; only traffic between named endpoints is recorded.
    pub fn name(&self, addr: &str, name: &str) {
        self.inner
            .lock()
            .unwrap()
            .names
            .insert(addr.to_string(), name.to_string());
    }

    fn record(&self, from: &str, to: &str, req: &[u8], resp: &[u8]) {
        let mut st = self.inner.lock().unwrap();
        let (Some(a), Some(b)) = (st.names.get(from).cloned(), st.names.get(to).cloned()) else {
            return;
        };
        st.push(&a, &b, req);
        st.push(&b, &a, resp);
    }

    /// Frames recorded since the previous call, ordered by link then sequence.
    pub fn take_new(&self) -> Vec<TapFrame> {
        let mut st = self.inner.lock().unwrap();
        let mut out = st.frames[st.cursor..].to_vec();
        st.cursor = st.frames.len();
        out.sort_by(|a, b| (&a.from, &a.to, a.seq).cmp(&(&b.from, &b.to, b.seq)));
        out
    }

    pub fn all(&self) -> Vec<TapFrame> {
        self.inner.lock().unwrap().frames.clone()
    }

    /// Frames sent and received per endpoint name.
    pub fn counts(&self) -> BTreeMap<String, (u64, u64)> {
        let st = self.inner.lock().unwrap();
        let mut out: BTreeMap<String, (u64, u64)> = BTreeMap::new();
        for f in &st.frames {
            out.entry(f.from.clone()).or_default().0 += 1;
            out.entry(f.to.clone()).or_default().1 += 1;
        }
        out
    }
}

/// Wraps a transport and records successful exchanges in a [`TapLog`].
pub struct Tapped<T> {
    pub inner: T,
    pub taps: Arc<TapLog>,
}

impl<T: Transport> Transport for Tapped<T> {
    fn exchange(
        &self,
        from: &str,
        to: &str,
        frame: &[u8],
        timeout: Duration,
    ) -> Result<Vec<u8>, NetError> {
        let resp = self.inner.exchange(from, to, frame, timeout)?;
        self.taps.record(from, to, frame, &resp);
        Ok(resp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Echo;

    impl Handler for Echo {
        fn handle(&self, frame: &[u8]) -> Vec<u8> {
            let mut v = frame.to_vec();
            v.reverse();
            v
        }
    }

    #[test]
    fn sim_latency_and_drop() {
        let net = SimNet::new();
        let h: Arc<dyn Handler> = Arc::new(Echo);
        net.attach("a:1", &h, 10);
        net.attach("b:1", &h, 2_000);
        let t = Duration::from_secs(5);
        assert_eq!(net.exchange("a:1", "a:1", b"ab", t), Ok(b"ba".to_vec()));
        assert_eq!(net.rtt_ms("a:1", "b:1"), 4_020);
        assert_eq!(net.exchange("a:1", "b:1", b"x", t), Ok(b"x".to_vec()));
        net.set_latency("b:1", 10_000);
        assert_eq!(net.exchange("a:1", "b:1", b"x", t), Err(NetError::Timeout));
        net.set_dropped("b:1", true);
        assert_eq!(
            net.exchange("a:1", "b:1", b"x", t),
            Err(NetError::ConnectionRefused)
        );
        assert_eq!(
            net.exchange("a:1", "nowhere:1", b"x", t),
            Err(NetError::ConnectionRefused)
        );
        drop(h);
        assert_eq!(
            net.exchange("b:1", "a:1", b"x", t),
            Err(NetError::ConnectionRefused)
        );
    }

    #[test]
    fn taps_only_named_links() {
        let net = SimNet::new();
        let h: Arc<dyn Handler> = Arc::new(Echo);
        net.attach("a:1", &h, 0);
        net.attach("b:1", &h, 0);
        let taps = TapLog::new();
        taps.name("a:1", "a");
        taps.name("b:1", "b");
        let t = Tapped {
            inner: Arc::clone(&net),
            taps: Arc::clone(&taps),
        };
        let d = Duration::from_secs(1);
        t.exchange("a:1", "b:1", b"12", d).unwrap();
        t.exchange(CLIENT, "b:1", b"34", d).unwrap();
        t.exchange("a:1", "b:1", b"56", d).unwrap();
        let frames = taps.take_new();
        let summary: Vec<(&str, &str, u64, &[u8])> = frames
            .iter()
            .map(|f| (f.from.as_str(), f.to.as_str(), f.seq, f.bytes.as_slice()))
            .collect();
        assert_eq!(
            summary,
            vec![
                ("a", "b", 1, &b"12"[..]),
                ("a", "b", 2, b"56"),
                ("b", "a", 1, b"21"),
                ("b", "a", 2, b"65")
            ]
        );
        assert!(taps.take_new().is_empty());
        assert_eq!(taps.counts()["a"], (2, 2));
    }

    struct Same;

    impl Handler for Same {
        fn handle(&self, frame: &[u8]) -> Vec<u8> {
            frame.to_vec()
        }
    }

    #[test]
    fn tcp_round_trip() {
        let server = TcpServer::bind("127.0.0.1:0", Arc::new(Same)).unwrap();
        let frame = super::super::proto::encode(&serde_json::json!({"k": "v"}));
        for _ in 0..3 {
            let resp = TcpTransport
                .exchange(CLIENT, server.addr(), &frame, Duration::from_secs(5))
                .unwrap();
            assert_eq!(resp, frame);
        }
        let addr = server.addr().to_string();
        server.shutdown();
        assert!(TcpTransport
            .exchange(CLIENT, &addr, &frame, Duration::from_millis(500))
            .is_err());
    }
}
