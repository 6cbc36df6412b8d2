//! Blocking control and share transports over the twin.
//!
//! Each call drives the shared engine until its own response arrives, so the
//! ordinary [`Proxy`](crate::control::Proxy) and
//! [`ShareHandle`](crate::data::ShareHandle) run unchanged on virtual links.
//! Suitable for sequential drivers; concurrent workflows use the scenario
//! runner, which multiplexes many connections over one engine.

use std::cell::{Cell, RefCell};
use std::net::Ipv4Addr;
use std::rc::Rc;
use std::time::Duration;

use super::engine::{ConnId, Engine};
use super::route::NetError;
use crate::control::client::{ControlTransport, InvokeError, Proxy};
use crate::control::codec::{decode_body, encode_body, DEFAULT_MAX_BODY};
use crate::control::message::{ControlMessage, Request, Response};
use crate::control::uri::ObjectUri;
use crate::data::share::{ShareError, ShareHandle, ShareTransport};

pub type SharedEngine = Rc<RefCell<Engine>>;

impl From<NetError> for InvokeError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::ConnectionRefused(m) => InvokeError::ConnectionRefused(m),
            NetError::Unroutable(m) | NetError::UnknownHost(m) => InvokeError::Unreachable(m),
            NetError::NoSuchConnection => InvokeError::ConnectionClosed,
        }
    }
}

impl From<NetError> for ShareError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::ConnectionRefused(m) => ShareError::ConnectionRefused(m),
            other => ShareError::Io(other.to_string()),
        }
    }
}

enum Wait {
    Body(Vec<u8>),
    Closed,
    Timeout,
}

/// Runs the engine until `conn` has something for its client, it closes, or
/// `timeout` of virtual time passes.
fn wait_rx(engine: &SharedEngine, conn: ConnId, timeout: Duration) -> Wait {
    let mut e = engine.borrow_mut();
    let deadline = e.now() + timeout;
    loop {
        if let Some(b) = e.take_rx(conn) {
            return Wait::Body(b);
        }
        if !e.is_open(conn) {
            return Wait::Closed;
        }
        match e.next_event_at() {
            Some(t) if t <= deadline => {
                e.step();
            }
            _ => {
                e.run_until(deadline);
                return Wait::Timeout;
            }
        }
    }
}

/// Control transport on one virtual connection.
pub struct SimControlTransport {
    engine: SharedEngine,
    conn: ConnId,
    cap: usize,
    closed: Cell<bool>,
}

impl SimControlTransport {
    pub fn connect(
        engine: &SharedEngine,
        actor: &str,
        via: Option<&str>,
        dst: Ipv4Addr,
        port: u16,
    ) -> Result<Self, InvokeError> {
        let conn = engine.borrow_mut().connect(actor, via, dst, port)?;
        Ok(Self {
            engine: engine.clone(),
            conn,
            cap: DEFAULT_MAX_BODY,
            closed: Cell::new(false),
        })
    }

    pub fn conn(&self) -> ConnId {
        self.conn
    }
}

impl ControlTransport for SimControlTransport {
    fn call(&self, req: Request, timeout: Duration) -> Result<Response, InvokeError> {
        if self.closed.get() {
            return Err(InvokeError::ConnectionClosed);
        }
        let id = req.id;
        let body = encode_body(&ControlMessage::Request(req), self.cap)?;
        self.engine.borrow_mut().send(self.conn, body)?;
        loop {
            match wait_rx(&self.engine, self.conn, timeout) {
                Wait::Body(b) => match decode_body(&b)? {
                    ControlMessage::Response(r) if r.id == id => return Ok(r),
                    ControlMessage::Response(r) if r.id == 0 => {
                        self.closed.set(true);
                        return r
                            .outcome
                            .into_result()
                            .map(|_| unreachable!("id 0 only carries errors"))
                            .map_err(InvokeError::Remote);
                    }
                    other => log::warn!("ignoring unexpected message {other:?}"),
                },
                Wait::Closed => {
                    self.closed.set(true);
                    return Err(InvokeError::ConnectionClosed);
                }
                Wait::Timeout => return Err(InvokeError::Timeout(timeout)),
            }
        }
    }
}

/// Resolves `uri`'s host in the topology and connects a proxy from `actor`.
pub fn sim_proxy(
    engine: &SharedEngine,
    actor: &str,
    via: Option<&str>,
    uri: &ObjectUri,
) -> Result<Proxy<SimControlTransport>, InvokeError> {
    let dst = engine.borrow().resolve(uri.host())?;
    let t = SimControlTransport::connect(engine, actor, via, dst, uri.port())?;
    Ok(Proxy::new(uri.clone(), t))
}

/// Share transport on one virtual connection.
pub struct SimShareTransport {
    engine: SharedEngine,
    conn: ConnId,
    timeout: Duration,
}

impl SimShareTransport {
    pub fn connect(
        engine: &SharedEngine,
        actor: &str,
        via: Option<&str>,
        dst: Ipv4Addr,
        port: u16,
    ) -> Result<Self, ShareError> {
        let conn = engine.borrow_mut().connect(actor, via, dst, port)?;
        Ok(Self {
            engine: engine.clone(),
            conn,
            timeout: crate::control::DEFAULT_TIMEOUT,
        })
    }
}

impl ShareTransport for SimShareTransport {
    fn exchange(&mut self, body: &[u8]) -> Result<Vec<u8>, ShareError> {
        self.engine.borrow_mut().send(self.conn, body.to_vec())?;
        match wait_rx(&self.engine, self.conn, self.timeout) {
            Wait::Body(b) => Ok(b),
            Wait::Closed => Err(ShareError::Io("connection closed".into())),
            Wait::Timeout => Err(ShareError::Timeout),
        }
    }
}

/// Mounts the share at `endpoint` (`host:port`, host by name or address) from `actor`.
pub fn sim_mount(
    engine: &SharedEngine,
    actor: &str,
    via: Option<&str>,
    endpoint: &str,
) -> Result<ShareHandle<SimShareTransport>, ShareError> {
    let (host, port) = endpoint
        .rsplit_once(':')
        .and_then(|(h, p)| Some((h, p.parse::<u16>().ok()?)))
        .ok_or_else(|| ShareError::Io(format!("bad endpoint {endpoint:?}")))?;
    let dst = engine.borrow().resolve(host)?;
    let t = SimShareTransport::connect(engine, actor, via, dst, port)?;
    Ok(ShareHandle::with_transport(endpoint, "NION100", t))
}
