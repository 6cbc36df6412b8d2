//! The discrete-event engine.
//!
//! Messages travel store-and-forward: at each hop a message waits for the
//! link direction to be free (FIFO), is clocked out at the link bandwidth,
//! then spends the link latency in flight. Events are ordered by virtual time,
//! ties by insertion sequence. Connections are checked against the firewalls
//! when opened; nothing is enqueued for a refused connection.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::fmt;
use std::net::Ipv4Addr;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::log::{payload_digest, EventLog, LogRecord};
use super::route::{NetError, Path, Verdict};
use super::topology::{Endpoint, HostId, Topology};
use crate::control::server::{ControlService, Handled};
use crate::data::share::ShareService;
use crate::time::{ManualClock, SimTime};

pub type ConnId = u64;

/// Segment size used for bulk flows.
pub const BULK_SEGMENT: u64 = 64 * 1024;
/// Framing overhead added to every message body on the wire.
pub const FRAME_OVERHEAD: u64 = 4;

/// How a hosted service answers one message.
pub enum ServiceAction {
    Reply(Vec<u8>),
    Deferred {
        delay: Duration,
        finish: Box<dyn FnOnce() -> Vec<u8>>,
    },
    /// Reply, then close the connection.
    Close(Vec<u8>),
    Ignore,
}

/// A server hosted on a virtual host and port.
pub trait VirtualService {
    fn on_message(&mut self, conn: ConnId, body: &[u8]) -> ServiceAction;
}

impl VirtualService for ControlService {
    fn on_message(&mut self, _conn: ConnId, body: &[u8]) -> ServiceAction {
        match self.handle(body) {
            Handled::Reply(b) => ServiceAction::Reply(b),
            Handled::Close(b) => ServiceAction::Close(b),
            Handled::Deferred { delay, finish } => ServiceAction::Deferred {
                delay,
                finish: Box::new(finish),
            },
        }
    }
}

impl VirtualService for ShareService {
    fn on_message(&mut self, _conn: ConnId, body: &[u8]) -> ServiceAction {
        ServiceAction::Reply(self.handle(body))
    }
}

/// Sends every message straight back.
#[derive(Debug, Default, Clone, Copy)]
pub struct EchoService;

impl VirtualService for EchoService {
    fn on_message(&mut self, _conn: ConnId, body: &[u8]) -> ServiceAction {
        ServiceAction::Reply(body.to_vec())
    }
}

/// Something a driver of the engine may want to react to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Notice {
    /// A message reached the client end of `conn`; take it with [`Engine::take_rx`].
    Rx {
        conn: ConnId,
        at: SimTime,
    },
    Timer {
        token: u64,
        at: SimTime,
    },
    BulkDone {
        conn: ConnId,
        at: SimTime,
    },
    Closed {
        conn: ConnId,
        at: SimTime,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RunMode {
    Virtual,
    /// Sleep `scale` real seconds per virtual second between events.
    Realtime {
        scale: f64,
    },
}

/// Bookkeeping for one open connection.
#[derive(Debug, Clone)]
pub struct ConnInfo {
    pub client_host: HostId,
    pub client: Endpoint,
    pub server_host: HostId,
    pub server: Endpoint,
    pub port: u16,
    pub open: bool,
    pub opened_at: SimTime,
    /// When the most recent request reached the server.
    pub last_server_rx: Option<SimTime>,
    /// When the server sent its most recent reply.
    pub last_server_tx: Option<SimTime>,
    pub bytes_sent: [u64; 2],
    pub bytes_delivered: [u64; 2],
}

struct Conn {
    info: ConnInfo,
    fwd: Path,
    rev: Path,
    inbox: VecDeque<Vec<u8>>,
}

struct Msg {
    conn: ConnId,
    to_server: bool,
    body: Option<Vec<u8>>,
    wire_len: u64,
    bulk: bool,
}

enum EventKind {
    Hop {
        msg: Msg,
        hop: usize,
    },
    Timer {
        token: u64,
    },
    Finish {
        conn: ConnId,
        finish: Box<dyn FnOnce() -> Vec<u8>>,
    },
}

struct Event {
    at: SimTime,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, o: &Self) -> bool {
        (self.at, self.seq) == (o.at, o.seq)
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Event {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, o: &Self) -> Ordering {
        (o.at, o.seq).cmp(&(self.at, self.seq))
    }
}

/// Per-link, per-direction counters (index 0 is a→b).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LinkStats {
    pub bytes: [u64; 2],
    pub messages: [u64; 2],
    pub dropped: [u64; 2],
}

pub struct Engine {
    topo: Topology,
    clock: ManualClock,
    now: SimTime,
    mode: RunMode,
    seq: u64,
    queue: BinaryHeap<Event>,
    rng: ChaCha8Rng,
    busy_until: Vec<[SimTime; 2]>,
    stats: Vec<LinkStats>,
    services: BTreeMap<(HostId, u16), Box<dyn VirtualService>>,
    conns: BTreeMap<ConnId, Conn>,
    bulk_left: BTreeMap<ConnId, u64>,
    next_conn: ConnId,
    notices: VecDeque<Notice>,
    log: EventLog,
}

impl fmt::Debug for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Engine")
            .field("topology", &self.topo.name)
            .field("now", &self.now)
            .field("pending", &self.queue.len())
            .finish()
    }
}

impl Engine {
    pub fn new(topo: Topology, seed: u64) -> Self {
        let n = topo.links.len();
        Self {
            topo,
            clock: ManualClock::new(),
            now: SimTime::ZERO,
            mode: RunMode::Virtual,
            seq: 0,
            queue: BinaryHeap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            busy_until: vec![[SimTime::ZERO; 2]; n],
            stats: vec![LinkStats::default(); n],
            services: BTreeMap::new(),
            conns: BTreeMap::new(),
            bulk_left: BTreeMap::new(),
            next_conn: 1,
            notices: VecDeque::new(),
            log: EventLog::new(),
        }
    }

    pub fn set_mode(&mut self, mode: RunMode) {
        self.mode = mode;
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    /// The engine's clock; hand clones to anything that must share virtual time.
    pub fn clock(&self) -> ManualClock {
        self.clock.clone()
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn link_stats(&self) -> &[LinkStats] {
        &self.stats
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    fn record(
        &mut self,
        entity: String,
        kind: &'static str,
        detail: String,
        digest: Option<String>,
    ) {
        self.log.push(LogRecord {
            time: self.now,
            entity,
            kind,
            detail,
            digest,
        });
    }

    /// Adds a driver-level record (e.g. a scenario step) to the log at the current time.
    pub fn note(&mut self, entity: impl Into<String>, kind: &'static str, detail: String) {
        self.record(entity.into(), kind, detail, None);
    }

    fn schedule(&mut self, at: SimTime, kind: EventKind) {
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Event {
            at: at.max(self.now),
            seq,
            kind,
        });
    }

    pub fn host_id(&self, name: &str) -> Result<HostId, NetError> {
        self.topo
            .host_id(name)
            .ok_or_else(|| NetError::UnknownHost(name.to_string()))
    }

    /// Address literal or host name (`host` or `host:iface`) to address.
    pub fn resolve(&self, text: &str) -> Result<Ipv4Addr, NetError> {
        self.topo
            .resolve(text)
            .ok_or_else(|| NetError::UnknownHost(text.to_string()))
    }

    /// Hosts `service` on every address of `host` at `port`.
    pub fn bind(
        &mut self,
        host: &str,
        port: u16,
        service: Box<dyn VirtualService>,
    ) -> Result<(), NetError> {
        let h = self.host_id(host)?;
        if self.services.contains_key(&(h, port)) {
            return Err(NetError::ConnectionRefused(format!(
                "{host}:{port} already bound"
            )));
        }
        self.services.insert((h, port), service);
        self.record(host.to_string(), "listen", format!("port={port}"), None);
        Ok(())
    }

    /// Opens a connection from `client` (leaving by interface `via`, or by
    /// its routes) to `dst:port`. Firewalls are evaluated here.
    pub fn connect(
        &mut self,
        client: &str,
        via: Option<&str>,
        dst: Ipv4Addr,
        port: u16,
    ) -> Result<ConnId, NetError> {
        let ch = self.host_id(client)?;
        let via = match via {
            Some(name) => Some(
                self.topo
                    .iface_id(ch, name)
                    .ok_or_else(|| NetError::UnknownHost(format!("{client}:{name}")))?,
            ),
            None => None,
        };
        let attempt = format!("{dst}:{port}");
        let fwd = match self.topo.route(ch, via, dst) {
            Ok(p) => p,
            Err(e) => {
                self.record(client.to_string(), "unroutable", attempt, None);
                return Err(e);
            }
        };
        let src_name = self.topo.endpoint_name(fwd.src);
        if let Verdict::Deny { at } = self.topo.evaluate(&fwd, port) {
            self.record(
                src_name,
                "refused",
                format!("{attempt} firewall={at}"),
                None,
            );
            return Err(NetError::ConnectionRefused(format!(
                "{attempt} denied at {at}"
            )));
        }
        let Endpoint::Iface {
            host: sh,
            iface: si,
        } = fwd.dst
        else {
            unreachable!("paths end at interfaces")
        };
        if !self.services.contains_key(&(sh, port)) {
            self.record(src_name, "refused", format!("{attempt} no-listener"), None);
            return Err(NetError::ConnectionRefused(format!(
                "nothing listens on {attempt}"
            )));
        }
        let client_addr = self.topo.iface_address(fwd.src).expect("interface");
        let rev = self.topo.route(sh, Some(si), client_addr)?;
        let id = self.next_conn;
        self.next_conn += 1;
        self.record(
            src_name,
            "open",
            format!("conn={id} {attempt} hops={}", fwd.hops.len()),
            None,
        );
        self.conns.insert(
            id,
            Conn {
                info: ConnInfo {
                    client_host: ch,
                    client: fwd.src,
                    server_host: sh,
                    server: fwd.dst,
                    port,
                    open: true,
                    opened_at: self.now,
                    last_server_rx: None,
                    last_server_tx: None,
                    bytes_sent: [0; 2],
                    bytes_delivered: [0; 2],
                },
                fwd,
                rev,
                inbox: VecDeque::new(),
            },
        );
        Ok(id)
    }

    pub fn conn_info(&self, conn: ConnId) -> Option<&ConnInfo> {
        self.conns.get(&conn).map(|c| &c.info)
    }

    pub fn is_open(&self, conn: ConnId) -> bool {
        self.conns.get(&conn).is_some_and(|c| c.info.open)
    }

    pub fn close(&mut self, conn: ConnId) {
        if let Some(c) = self.conns.get_mut(&conn) {
            if c.info.open {
                c.info.open = false;
                self.record(format!("conn{conn}"), "close", String::new(), None);
            }
        }
    }

    fn enqueue(&mut self, msg: Msg) -> Result<(), NetError> {
        let c = self
            .conns
            .get_mut(&msg.conn)
            .ok_or(NetError::NoSuchConnection)?;
        if !c.info.open {
            return Err(NetError::NoSuchConnection);
        }
        c.info.bytes_sent[!msg.to_server as usize] += msg.wire_len;
        let now = self.now;
        self.schedule(now, EventKind::Hop { msg, hop: 0 });
        Ok(())
    }

    /// Client → server message.
    pub fn send(&mut self, conn: ConnId, body: Vec<u8>) -> Result<(), NetError> {
        let wire_len = body.len() as u64 + FRAME_OVERHEAD;
        let digest = payload_digest(&body);
        self.record(
            format!("conn{conn}"),
            "send",
            format!("bytes={wire_len}"),
            Some(digest),
        );
        self.enqueue(Msg {
            conn,
            to_server: true,
            body: Some(body),
            wire_len,
            bulk: false,
        })
    }

    fn send_from_server(&mut self, conn: ConnId, body: Vec<u8>) {
        let wire_len = body.len() as u64 + FRAME_OVERHEAD;
        if let Some(c) = self.conns.get_mut(&conn) {
            c.info.last_server_tx = Some(self.now);
        }
        self.record(
            format!("conn{conn}"),
            "reply",
            format!("bytes={wire_len}"),
            Some(payload_digest(&body)),
        );
        let _ = self.enqueue(Msg {
            conn,
            to_server: false,
            body: Some(body),
            wire_len,
            bulk: false,
        });
    }

    /// Streams `bytes` of opaque payload over `conn` in 64 KiB segments, all
    /// offered at once, towards the client (`to_client`) or the server. A
    /// [`Notice::BulkDone`] follows once every segment has arrived.
    pub fn send_bulk(&mut self, conn: ConnId, bytes: u64, to_client: bool) -> Result<(), NetError> {
        if !self.is_open(conn) {
            return Err(NetError::NoSuchConnection);
        }
        let segments = bytes.div_ceil(BULK_SEGMENT);
        self.record(
            format!("conn{conn}"),
            "bulk-start",
            format!(
                "bytes={bytes} segments={segments} to={}",
                if to_client { "client" } else { "server" }
            ),
            None,
        );
        *self.bulk_left.entry(conn).or_default() += segments;
        let mut left = bytes;
        while left > 0 {
            let seg = left.min(BULK_SEGMENT);
            left -= seg;
            self.enqueue(Msg {
                conn,
                to_server: !to_client,
                body: None,
                wire_len: seg,
                bulk: true,
            })?;
        }
        Ok(())
    }

    pub fn schedule_timer(&mut self, at: SimTime, token: u64) {
        self.schedule(at, EventKind::Timer { token });
    }

    pub fn take_rx(&mut self, conn: ConnId) -> Option<Vec<u8>> {
        self.conns.get_mut(&conn)?.inbox.pop_front()
    }

    pub fn next_notice(&mut self) -> Option<Notice> {
        self.notices.pop_front()
    }

    pub fn drain_notices(&mut self) -> Vec<Notice> {
        self.notices.drain(..).collect()
    }

    /// Time of the earliest pending event.
    pub fn next_event_at(&self) -> Option<SimTime> {
        self.queue.peek().map(|e| e.at)
    }

    fn advance_to(&mut self, at: SimTime) {
        if at > self.now {
            if let RunMode::Realtime { scale } = self.mode {
                if scale > 0.0 {
                    let real = at.since(self.now).mul_f64(scale);
                    std::thread::sleep(real);
                }
            }
            self.now = at;
            self.clock.set(at);
        }
    }

    /// Processes one event. Returns `false` when nothing is pending.
    pub fn step(&mut self) -> bool {
        let Some(ev) = self.queue.pop() else {
            return false;
        };
        self.advance_to(ev.at);
        match ev.kind {
            EventKind::Hop { msg, hop } => self.hop(msg, hop),
            EventKind::Timer { token } => self.notices.push_back(Notice::Timer {
                token,
                at: self.now,
            }),
            EventKind::Finish { conn, finish } => {
                let body = finish();
                if self.is_open(conn) {
                    self.send_from_server(conn, body);
                }
            }
        }
        true
    }

    /// Processes events up to and including `deadline`, then moves the clock there.
    pub fn run_until(&mut self, deadline: SimTime) {
        while self.next_event_at().is_some_and(|t| t <= deadline) {
            self.step();
        }
        self.advance_to(deadline);
    }

    /// Processes events until the queue is empty.
    pub fn run_until_idle(&mut self) {
        while self.step() {}
    }

    fn hop(&mut self, msg: Msg, hop: usize) {
        let Some(c) = self.conns.get(&msg.conn) else {
            return;
        };
        let path = if msg.to_server { &c.fwd } else { &c.rev };
        if hop == path.hops.len() {
            self.deliver(msg);
            return;
        }
        let (link, dir) = path.hops[hop];
        let d = dir.index();
        let l = &self.topo.links[link];
        let depart = self.now.max(self.busy_until[link][d]);
        let done = depart + l.serialization(msg.wire_len);
        let arrive = done + l.latency;
        let loss = l.loss;
        self.busy_until[link][d] = done;
        self.stats[link].bytes[d] += msg.wire_len;
        self.stats[link].messages[d] += 1;
        if !msg.bulk {
            let detail = format!(
                "conn={} bytes={} depart={depart} arrive={arrive}",
                msg.conn, msg.wire_len
            );
            self.record(self.topo.link_name(link), "hop", detail, None);
        }
        if loss > 0.0 && self.rng.gen::<f64>() < loss {
            self.stats[link].dropped[d] += 1;
            self.record(
                self.topo.link_name(link),
                "drop",
                format!("conn={} bytes={}", msg.conn, msg.wire_len),
                None,
            );
            if msg.bulk {
                self.bulk_segment_done(msg.conn);
            }
            return;
        }
        self.schedule(arrive, EventKind::Hop { msg, hop: hop + 1 });
    }

    fn bulk_segment_done(&mut self, conn: ConnId) {
        if let Some(left) = self.bulk_left.get_mut(&conn) {
            *left -= 1;
            if *left == 0 {
                self.bulk_left.remove(&conn);
                self.record(format!("conn{conn}"), "bulk-done", String::new(), None);
                self.notices
                    .push_back(Notice::BulkDone { conn, at: self.now });
            }
        }
    }

    fn deliver(&mut self, msg: Msg) {
        let now = self.now;
        let Some(c) = self.conns.get_mut(&msg.conn) else {
            return;
        };
        c.info.bytes_delivered[!msg.to_server as usize] += msg.wire_len;
        if msg.bulk {
            self.bulk_segment_done(msg.conn);
            return;
        }
        let body = msg.body.expect("non-bulk messages carry a body");
        if !msg.to_server {
            c.inbox.push_back(body);
            self.notices.push_back(Notice::Rx {
                conn: msg.conn,
                at: now,
            });
            return;
        }
        c.info.last_server_rx = Some(now);
        let key = (c.info.server_host, c.info.port);
        let entity = format!("{}:{}", self.topo.hosts[key.0].name, key.1);
        self.record(
            entity,
            "serve",
            format!("conn={}", msg.conn),
            Some(payload_digest(&body)),
        );
        let action = match self.services.get_mut(&key) {
            Some(svc) => svc.on_message(msg.conn, &body),
            None => ServiceAction::Ignore,
        };
        match action {
            ServiceAction::Reply(b) => self.send_from_server(msg.conn, b),
            ServiceAction::Deferred { delay, finish } => self.schedule(
                now + delay,
                EventKind::Finish {
                    conn: msg.conn,
                    finish,
                },
            ),
            ServiceAction::Close(b) => {
                self.send_from_server(msg.conn, b);
                // the reply is already queued; later sends are refused
                if let Some(c) = self.conns.get_mut(&msg.conn) {
                    c.info.open = false;
                }
                self.notices.push_back(Notice::Closed {
                    conn: msg.conn,
                    at: now,
                });
            }
            ServiceAction::Ignore => {}
        }
    }
}
