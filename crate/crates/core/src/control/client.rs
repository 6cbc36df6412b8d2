//! Client side of the control channel: transports, proxies and `invoke`.

use std::collections::HashMap;
use std::io;
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use thiserror::Error;

use super::codec::{
    decode_body, encode_body, read_frame, write_frame, CodecError, DEFAULT_MAX_BODY,
};
use super::message::{ControlMessage, RemoteError, Request, Response, Value};
use super::stem::{frames_from_value, PROBE_POSITION, SCAN_CHANNEL, SCAN_STATUS};
use super::uri::ObjectUri;
use crate::instrument::{Frame, PositionReport};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InvokeError {
    #[error("connection refused: {0}")]
    ConnectionRefused(String),
    #[error("no response within {0:?}")]
    Timeout(Duration),
    #[error("no route to {0}")]
    Unreachable(String),
    #[error("remote error {0}")]
    Remote(RemoteError),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("connection closed before the response arrived")]
    ConnectionClosed,
    #[error("i/o error: {0}")]
    Io(String),
}

impl InvokeError {
    fn from_io(e: &io::Error, timeout: Duration) -> Self {
        match e.kind() {
            io::ErrorKind::ConnectionRefused => InvokeError::ConnectionRefused(e.to_string()),
            io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock => InvokeError::Timeout(timeout),
            _ => InvokeError::Io(e.to_string()),
        }
    }

    /// True when the server was never reached or the link failed, as opposed
    /// to the server answering with an error.
    pub fn is_connectivity(&self) -> bool {
        !matches!(self, InvokeError::Remote(_))
    }
}

/// Carries one request to its object and brings back the matching response.
pub trait ControlTransport {
    fn call(&self, req: Request, timeout: Duration) -> Result<Response, InvokeError>;
}

type Pending = Arc<Mutex<HashMap<u64, Sender<Response>>>>;

/// A multiplexed TCP connection: many requests may be in flight at once and
/// responses are routed back by id. Cloning shares the connection.
#[derive(Clone)]
pub struct TcpTransport {
    inner: Arc<TcpInner>,
}

struct TcpInner {
    writer: Mutex<TcpStream>,
    pending: Pending,
    closed: Arc<AtomicBool>,
    cap: usize,
}

impl Drop for TcpInner {
    fn drop(&mut self) {
        if let Ok(w) = self.writer.lock() {
            let _ = w.shutdown(Shutdown::Both);
        }
    }
}

impl TcpTransport {
    pub fn connect(endpoint: &str, timeout: Duration) -> Result<Self, InvokeError> {
        let addr = endpoint
            .to_socket_addrs()
            .map_err(|e| InvokeError::Unreachable(format!("{endpoint}: {e}")))?
            .next()
            .ok_or_else(|| InvokeError::Unreachable(endpoint.to_string()))?;
        let stream = TcpStream::connect_timeout(&addr, timeout)
            .map_err(|e| InvokeError::from_io(&e, timeout))?;
        let _ = stream.set_nodelay(true);
        let reader = stream
            .try_clone()
            .map_err(|e| InvokeError::Io(e.to_string()))?;
        let pending: Pending = Arc::default();
        let closed = Arc::new(AtomicBool::new(false));
        {
            let pending = pending.clone();
            let closed = closed.clone();
            std::thread::spawn(move || read_loop(reader, pending, closed, DEFAULT_MAX_BODY));
        }
        Ok(Self {
            inner: Arc::new(TcpInner {
                writer: Mutex::new(stream),
                pending,
                closed,
                cap: DEFAULT_MAX_BODY,
            }),
        })
    }
}

fn read_loop(mut stream: TcpStream, pending: Pending, closed: Arc<AtomicBool>, cap: usize) {
    while let Ok(Some(body)) = read_frame(&mut stream, cap) {
        match decode_body(&body) {
            Ok(ControlMessage::Response(resp)) => {
                let tx = pending
                    .lock()
                    .unwrap_or_else(|p| p.into_inner())
                    .remove(&resp.id);
                match tx {
                    Some(tx) => {
                        let _ = tx.send(resp);
                    }
                    // id 0 answers a request the server could not decode; it
                    // closes the connection right after
                    None => log::warn!("response for unknown request id {}", resp.id),
                }
            }
            _ => break,
        }
    }
    closed.store(true, Ordering::SeqCst);
    // dropping the senders wakes every waiter with a disconnect
    pending.lock().unwrap_or_else(|p| p.into_inner()).clear();
}

impl ControlTransport for TcpTransport {
    fn call(&self, req: Request, timeout: Duration) -> Result<Response, InvokeError> {
        let inner = &self.inner;
        if inner.closed.load(Ordering::SeqCst) {
            return Err(InvokeError::ConnectionClosed);
        }
        let id = req.id;
        let body = encode_body(&ControlMessage::Request(req), inner.cap)
            .map_err(|e| InvokeError::Protocol(e.to_string()))?;
        let (tx, rx) = mpsc::channel();
        inner
            .pending
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .insert(id, tx);
        let sent = {
            let mut w = inner.writer.lock().unwrap_or_else(|p| p.into_inner());
            write_frame(&mut *w, &body)
        };
        if let Err(e) = sent {
            inner
                .pending
                .lock()
                .unwrap_or_else(|p| p.into_inner())
                .remove(&id);
            return Err(InvokeError::from_io(&e, timeout));
        }
        match rx.recv_timeout(timeout) {
            Ok(resp) => Ok(resp),
            Err(RecvTimeoutError::Timeout) => {
                inner
                    .pending
                    .lock()
                    .unwrap_or_else(|p| p.into_inner())
                    .remove(&id);
                Err(InvokeError::Timeout(timeout))
            }
            Err(RecvTimeoutError::Disconnected) => Err(InvokeError::ConnectionClosed),
        }
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Fresh request id, unique within the process.
pub fn next_request_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// A remote object bound to a transport.
#[derive(Clone)]
pub struct Proxy<T: ControlTransport> {
    uri: ObjectUri,
    transport: T,
    timeout: Duration,
}

impl<T: ControlTransport> Proxy<T> {
    pub fn new(uri: ObjectUri, transport: T) -> Self {
        Self {
            uri,
            transport,
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn uri(&self) -> &ObjectUri {
        &self.uri
    }

    pub fn call(&self, method: &str, args: Vec<Value>) -> Result<Value, InvokeError> {
        let req = Request {
            id: next_request_id(),
            object: self.uri.objectid().to_string(),
            method: method.to_string(),
            args,
        };
        let id = req.id;
        let resp = self.transport.call(req, self.timeout)?;
        if resp.id != id {
            return Err(InvokeError::Protocol(format!(
                "response id {} does not match request id {id}",
                resp.id
            )));
        }
        resp.outcome.into_result().map_err(InvokeError::Remote)
    }

    pub fn scan_status(&self) -> Result<bool, InvokeError> {
        let v = self.call(SCAN_STATUS, vec![])?;
        v.as_bool()
            .ok_or_else(|| InvokeError::Protocol(format!("scan_status returned {v}")))
    }

    pub fn scan_channel(&self, ch: i64, num_frames: i64) -> Result<Vec<Frame>, InvokeError> {
        let v = self.call(SCAN_CHANNEL, vec![ch.into(), num_frames.into()])?;
        frames_from_value(v).map_err(|e| InvokeError::Protocol(e.to_string()))
    }

    pub fn probe_position(&self, x: f64, y: f64) -> Result<PositionReport, InvokeError> {
        let v = self.call(PROBE_POSITION, vec![x.into(), y.into()])?;
        serde_json::from_value(v).map_err(|e| InvokeError::Protocol(e.to_string()))
    }
}

/// Connects to the object at `uri` over TCP.
pub fn connect(uri: &ObjectUri, timeout: Duration) -> Result<Proxy<TcpTransport>, InvokeError> {
    let t = TcpTransport::connect(&uri.endpoint(), timeout)?;
    Ok(Proxy::new(uri.clone(), t).with_timeout(timeout))
}

/// One-shot call: connect, send one request, await its response.
pub fn invoke(uri: &ObjectUri, method: &str, args: Vec<Value>) -> Result<Value, InvokeError> {
    connect(uri, DEFAULT_TIMEOUT)?.call(method, args)
}

impl From<CodecError> for InvokeError {
    fn from(e: CodecError) -> Self {
        InvokeError::Protocol(e.to_string())
    }
}
