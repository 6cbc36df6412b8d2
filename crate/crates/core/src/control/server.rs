//! The control-channel daemon.
//!
//! [`ControlService`] turns request bodies into response bodies and is
//! independent of transport. [`serve`] runs it over TCP; the twin hosts the
//! same service on virtual connections.

use std::io;
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use thiserror::Error;

use super::codec::{
    decode_body, encode_body, read_frame, write_frame, CodecError, DEFAULT_MAX_BODY,
};
use super::message::{ControlMessage, ErrorCode, Outcome, RemoteError, Response};
use super::registry::{CallResult, ObjectRegistry, Reply};
use crate::tcp::TcpServer;
use crate::time::{Clock, SystemClock};

pub const DEFAULT_CONTROL_PORT: u16 = 9090;

#[derive(Debug, Error)]
#[error("cannot bind {addr}: {source}")]
pub struct BindError {
    pub addr: String,
    #[source]
    pub source: io::Error,
}

/// What to do with one incoming body.
pub enum Handled {
    /// Send this response body now.
    Reply(Vec<u8>),
    /// Wait `delay`, then send what `finish` produces.
    Deferred {
        delay: Duration,
        finish: Box<dyn FnOnce() -> Vec<u8> + Send>,
    },
    /// Send this body, then close the connection.
    Close(Vec<u8>),
}

/// Request decoding, dispatch and response encoding.
#[derive(Debug, Clone)]
pub struct ControlService {
    registry: Arc<ObjectRegistry>,
    cap: usize,
}

impl ControlService {
    pub fn new(registry: Arc<ObjectRegistry>) -> Self {
        Self {
            registry,
            cap: DEFAULT_MAX_BODY,
        }
    }

    pub fn with_cap(mut self, cap: usize) -> Self {
        self.cap = cap;
        self
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn registry(&self) -> &Arc<ObjectRegistry> {
        &self.registry
    }

    /// Encodes a response, replacing an oversize result with a `FrameTooLarge` error.
    pub fn encode_response(id: u64, result: CallResult, cap: usize) -> Vec<u8> {
        let msg = ControlMessage::Response(Response {
            id,
            outcome: Outcome::from(result),
        });
        match encode_body(&msg, cap) {
            Ok(b) => b,
            Err(e) => {
                let code = match e {
                    CodecError::FrameTooLarge { .. } => ErrorCode::FrameTooLarge,
                    _ => ErrorCode::ApplicationError,
                };
                let msg = ControlMessage::Response(Response {
                    id,
                    outcome: Outcome::Error(RemoteError::new(code, e.to_string())),
                });
                encode_body(&msg, usize::MAX).expect("error responses always encode")
            }
        }
    }

    pub fn handle(&self, body: &[u8]) -> Handled {
        let req = match decode_body(body) {
            Ok(ControlMessage::Request(r)) => r,
            Ok(ControlMessage::Response(_)) => {
                return Handled::Close(Self::encode_response(
                    0,
                    Err(RemoteError::new(
                        ErrorCode::DecodeError,
                        "server received a response message",
                    )),
                    self.cap,
                ))
            }
            Err(e) => {
                return Handled::Close(Self::encode_response(
                    0,
                    Err(RemoteError::new(ErrorCode::DecodeError, e.to_string())),
                    self.cap,
                ))
            }
        };
        log::debug!("request {} {}.{}", req.id, req.object, req.method);
        let (id, cap) = (req.id, self.cap);
        match self.registry.dispatch(&req) {
            Reply::Ready(r) => Handled::Reply(Self::encode_response(id, r, cap)),
            Reply::Deferred { delay, finish } => Handled::Deferred {
                delay,
                finish: Box::new(move || Self::encode_response(id, finish(), cap)),
            },
        }
    }
}

/// A running TCP control server.
pub struct ControlServer {
    inner: TcpServer,
}

impl ControlServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.inner.local_addr()
    }

    pub fn shutdown(&mut self) {
        self.inner.shutdown();
    }

    pub fn wait(self) {
        self.inner.wait();
    }
}

/// Serves `registry` on `bind`, waiting out deferred replies in real time.
pub fn serve<A: ToSocketAddrs>(
    registry: ObjectRegistry,
    bind: A,
) -> Result<ControlServer, BindError> {
    serve_with(
        ControlService::new(Arc::new(registry)),
        Arc::new(SystemClock),
        bind,
    )
}

/// Serves on `bind`, using `clock` for deferred replies.
pub fn serve_with<A: ToSocketAddrs>(
    service: ControlService,
    clock: Arc<dyn Clock>,
    bind: A,
) -> Result<ControlServer, BindError> {
    let addr = bind
        .to_socket_addrs()
        .ok()
        .and_then(|mut a| a.next())
        .map(|a| a.to_string())
        .unwrap_or_else(|| "?".into());
    let handler = Arc::new(move |stream: TcpStream| connection(&service, &clock, stream));
    let inner = TcpServer::spawn(&*addr, handler).map_err(|source| BindError { addr, source })?;
    log::info!("control server listening on {}", inner.local_addr());
    Ok(ControlServer { inner })
}

fn send(writer: &Mutex<TcpStream>, body: &[u8]) -> io::Result<()> {
    let mut w = writer.lock().unwrap_or_else(|p| p.into_inner());
    write_frame(&mut *w, body)
}

fn connection(service: &ControlService, clock: &Arc<dyn Clock>, stream: TcpStream) {
    let peer = stream.peer_addr().ok();
    let writer = match stream.try_clone() {
        Ok(w) => Arc::new(Mutex::new(w)),
        Err(_) => return,
    };
    let mut reader = stream;
    loop {
        let body = match read_frame(&mut reader, service.cap()) {
            Ok(Some(b)) => b,
            Ok(None) => break,
            Err(CodecError::FrameTooLarge { size, cap }) => {
                let err = RemoteError::new(
                    ErrorCode::FrameTooLarge,
                    format!("frame body of {size} bytes exceeds the {cap}-byte cap"),
                );
                let _ = send(&writer, &ControlService::encode_response(0, Err(err), cap));
                break;
            }
            Err(e) => {
                log::debug!("control connection {peer:?}: {e}");
                break;
            }
        };
        match service.handle(&body) {
            Handled::Reply(b) => {
                if send(&writer, &b).is_err() {
                    break;
                }
            }
            Handled::Close(b) => {
                let _ = send(&writer, &b);
                if let Ok(w) = writer.lock() {
                    let _ = w.shutdown(std::net::Shutdown::Both);
                }
                break;
            }
            Handled::Deferred { delay, finish } => {
                let writer = writer.clone();
                let clock = clock.clone();
                std::thread::spawn(move || {
                    clock.sleep(delay);
                    let _ = send(&writer, &finish());
                });
            }
        }
    }
}
