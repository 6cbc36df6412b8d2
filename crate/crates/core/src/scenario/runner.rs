//! Drives a scenario through the twin.
//!
//! Every actor's work is multiplexed onto the one engine: a step sends its
//! request and yields, and the reply (or a timer) resumes it. Nothing runs on
//! another thread, so a run is a pure function of topology, scenario and seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde_json::json;

use super::bundled::load_topology;
use super::report::{summarize, AssertReport, Failure, ScenarioReport, StepReport};
use super::spec::{
    value_matches, ActionKind, AssertKind, BulkDirection, Scenario, ScenarioError, ServerKind,
    StepSpec,
};
use crate::control::codec::{decode_body, encode_body, DEFAULT_MAX_BODY};
use crate::control::message::{ControlMessage, RemoteError, Request, Value};
use crate::control::registry::ObjectRegistry;
use crate::control::server::ControlService;
use crate::control::stem::StemTaskObject;
use crate::control::uri::ObjectUri;
use crate::data::share::{
    FetchOp, ShareError, ShareRequest, ShareResponse, ShareService, DEFAULT_CHUNK,
    DEFAULT_SHARE_PORT,
};
use crate::data::store::{IndexEntry, MeasurementStore};
use crate::instrument::{Instrument, InstrumentConfig};
use crate::netem::engine::{ConnId, Engine, Notice, RunMode};
use crate::netem::route::NetError;
use crate::netem::topology::{HostId, Topology};
use crate::time::{Clock, SimTime};

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Replaces the scenario's seed.
    pub seed: Option<u64>,
    pub mode: RunMode,
    /// Parent directory for named stores; a temporary directory otherwise.
    pub store_dir: Option<PathBuf>,
    /// Replaces the scenario's topology (bundled name or path).
    pub topology: Option<String>,
    /// Directory relative topology paths are resolved against.
    pub base_dir: Option<PathBuf>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            seed: None,
            mode: RunMode::Virtual,
            store_dir: None,
            topology: None,
            base_dir: None,
        }
    }
}

/// Loads the scenario's topology and runs it.
pub fn run_scenario(
    scenario: &Scenario,
    opts: &RunOptions,
) -> Result<ScenarioReport, ScenarioError> {
    let spec = opts.topology.as_deref().unwrap_or(&scenario.topology);
    let topo = load_topology(spec, opts.base_dir.as_deref())?;
    run_with_topology(scenario, topo, opts)
}

/// Loads a scenario file and runs it, resolving relative topology paths
/// against the file's directory.
pub fn run_file(path: &Path, opts: &RunOptions) -> Result<ScenarioReport, ScenarioError> {
    let scenario = Scenario::load(path)?;
    let mut opts = opts.clone();
    if opts.base_dir.is_none() {
        opts.base_dir = path.parent().map(Path::to_path_buf);
    }
    run_scenario(&scenario, &opts)
}

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Removes a temporary store directory on drop.
struct TempRoot(Option<PathBuf>);

impl Drop for TempRoot {
    fn drop(&mut self) {
        if let Some(p) = self.0.take() {
            if let Err(e) = std::fs::remove_dir_all(&p) {
                log::debug!("leaving {}: {e}", p.display());
            }
        }
    }
}

pub fn run_with_topology(
    scenario: &Scenario,
    topo: Topology,
    opts: &RunOptions,
) -> Result<ScenarioReport, ScenarioError> {
    let seed = opts.seed.unwrap_or(scenario.seed);
    let topo_name = topo.name.clone();
    for step in &scenario.steps {
        let h = topo.host_id(&step.actor).ok_or_else(|| {
            ScenarioError::Invalid(format!(
                "step {:?}: unknown actor {:?}",
                step.label, step.actor
            ))
        })?;
        if let Some(via) = &step.via {
            topo.iface_id(h, via).ok_or_else(|| {
                ScenarioError::Invalid(format!(
                    "step {:?}: {} has no interface {via:?}",
                    step.label, step.actor
                ))
            })?;
        }
    }

    let (root, _cleanup) = match &opts.store_dir {
        Some(d) => (d.clone(), TempRoot(None)),
        None => {
            let n = TEMP_COUNTER.fetch_add(1, Ordering::Relaxed);
            let d = std::env::temp_dir().join(format!(
                "stemlink-{}-{}-{n}",
                scenario.name,
                std::process::id()
            ));
            (d.clone(), TempRoot(Some(d)))
        }
    };

    let mut engine = Engine::new(topo, seed);
    engine.set_mode(opts.mode);
    let clock: Arc<dyn Clock> = Arc::new(engine.clock());

    let mut stores: BTreeMap<String, Arc<MeasurementStore>> = BTreeMap::new();
    let mut open_store = |name: &str| -> Result<Arc<MeasurementStore>, ScenarioError> {
        if let Some(s) = stores.get(name) {
            return Ok(s.clone());
        }
        let valid = !name.is_empty()
            && name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        if !valid {
            return Err(ScenarioError::Invalid(format!("bad store name {name:?}")));
        }
        let s = Arc::new(
            MeasurementStore::open(root.join(name))
                .map_err(|e| ScenarioError::Server(e.to_string()))?,
        );
        stores.insert(name.to_string(), s.clone());
        Ok(s)
    };

    let mut served_stores: BTreeMap<(HostId, u16), Arc<MeasurementStore>> = BTreeMap::new();
    for srv in &scenario.servers {
        let host = engine
            .host_id(&srv.host)
            .map_err(|e| ScenarioError::Invalid(format!("server: {e}")))?;
        let port = srv.port();
        let service: Box<dyn crate::netem::VirtualService> = match srv.kind {
            ServerKind::Instrument => {
                let table = srv.config.clone().unwrap_or_default();
                let explicit_seed = table.contains_key("rng_seed");
                let mut cfg: InstrumentConfig =
                    toml::Value::Table(table)
                        .try_into()
                        .map_err(|e: toml::de::Error| {
                            ScenarioError::Server(format!("instrument config: {}", e.message()))
                        })?;
                if !explicit_seed {
                    cfg.rng_seed = seed;
                }
                let instrument = Instrument::new(&cfg, clock.clone())
                    .map_err(|e| ScenarioError::Server(e.to_string()))?;
                let mut obj = StemTaskObject::new(Arc::new(instrument));
                if let Some(name) = &srv.store {
                    obj = obj.with_store(open_store(name)?);
                }
                let mut reg = ObjectRegistry::new();
                reg.register(srv.objectid(), Arc::new(obj))
                    .map_err(|e| ScenarioError::Server(e.to_string()))?;
                Box::new(ControlService::new(Arc::new(reg)))
            }
            ServerKind::Share => {
                let name = srv.store.as_deref().ok_or_else(|| {
                    ScenarioError::Invalid(format!("share on {} needs a store", srv.host))
                })?;
                let store = open_store(name)?;
                served_stores.insert((host, port), store.clone());
                Box::new(ShareService::new(store))
            }
        };
        engine
            .bind(&srv.host, port, service)
            .map_err(|e| ScenarioError::Server(e.to_string()))?;
    }

    let mut run = Run {
        scenario,
        engine,
        served_stores,
        steps: scenario.steps.iter().map(|_| StepRun::default()).collect(),
        owners: BTreeMap::new(),
        mounts: BTreeMap::new(),
        next_id: 1,
    };
    run.drive();
    Ok(run.report(seed, topo_name))
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
enum Phase {
    #[default]
    Waiting,
    Scheduled,
    Running,
    Done,
}

#[derive(Default)]
struct StepRun {
    phase: Phase,
    issued_at: Option<SimTime>,
    completed_at: Option<SimTime>,
    served_first: Option<SimTime>,
    served_last: Option<SimTime>,
    replied_at: Option<SimTime>,
    conn: Option<ConnId>,
    /// Request id of an outstanding control call.
    req_id: u64,
    /// Bumped per request; stale timeouts are ignored.
    generation: u64,
    /// Opcode of an outstanding share request.
    share_op: u8,
    fetch: Option<FetchOp>,
    polls: usize,
    observed: Vec<Value>,
    passed: bool,
    result: Option<Value>,
    error: Option<String>,
    error_kind: Option<String>,
    message: String,
}

struct Mount {
    conn: ConnId,
    listing: Vec<IndexEntry>,
}

/// A failed outcome: message plus every name it can be expected by.
struct StepError {
    message: String,
    names: Vec<String>,
}

impl StepError {
    fn new(message: impl Into<String>, names: &[&str]) -> Self {
        Self {
            message: message.into(),
            names: names.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl From<NetError> for StepError {
    fn from(e: NetError) -> Self {
        let name = match e {
            NetError::ConnectionRefused(_) => "ConnectionRefused",
            NetError::Unroutable(_) => "Unroutable",
            NetError::NoSuchConnection => "ConnectionClosed",
            NetError::UnknownHost(_) => "UnknownHost",
        };
        StepError::new(e.to_string(), &[name])
    }
}

impl From<RemoteError> for StepError {
    fn from(e: RemoteError) -> Self {
        let mut names = vec![e.code.to_string()];
        names.extend(e.kind.clone());
        Self {
            message: e.to_string(),
            names,
        }
    }
}

impl From<ShareError> for StepError {
    fn from(e: ShareError) -> Self {
        let name = format!("{e:?}");
        let name = name.split('(').next().unwrap_or_default().to_string();
        Self {
            message: e.to_string(),
            names: vec![name],
        }
    }
}

type Outcome = Result<Value, StepError>;

const TIMER_START: u64 = 0;
const TIMER_POLL: u64 = 1;
const TIMER_TIMEOUT: u64 = 2;

const GEN_MASK: u64 = (1 << 38) - 1;

// step index | generation (38 bits) | kind (2 bits)
fn token(idx: usize, generation: u64, kind: u64) -> u64 {
    ((idx as u64) << 40) | ((generation & GEN_MASK) << 2) | kind
}

fn untoken(t: u64) -> (usize, u64, u64) {
    ((t >> 40) as usize, (t >> 2) & GEN_MASK, t & 3)
}

fn secs(s: f64) -> Duration {
    Duration::from_secs_f64(s)
}

/// `host:port` or `host`, with the share port as default.
fn split_endpoint(text: &str) -> (&str, u16) {
    match text.rsplit_once(':') {
        Some((h, p)) if p.parse::<u16>().is_ok() => (h, p.parse().unwrap()),
        _ => (text, DEFAULT_SHARE_PORT),
    }
}

fn is_subsequence(want: &[Value], seen: &[Value]) -> bool {
    let mut it = seen.iter();
    want.iter().all(|w| it.any(|s| value_matches(w, s)))
}

struct Run<'a> {
    scenario: &'a Scenario,
    engine: Engine,
    served_stores: BTreeMap<(HostId, u16), Arc<MeasurementStore>>,
    steps: Vec<StepRun>,
    /// Which step is waiting on each connection.
    owners: BTreeMap<ConnId, usize>,
    mounts: BTreeMap<(String, String), Mount>,
    next_id: u64,
}

impl Run<'_> {
    fn spec(&self, idx: usize) -> &StepSpec {
        &self.scenario.steps[idx]
    }

    fn drive(&mut self) {
        self.schedule_ready();
        loop {
            while let Some(n) = self.engine.next_notice() {
                self.on_notice(n);
                self.schedule_ready();
            }
            if self.steps.iter().all(|s| s.phase == Phase::Done) {
                break;
            }
            if !self.engine.step() {
                break;
            }
        }
        for idx in 0..self.steps.len() {
            if self.steps[idx].phase != Phase::Done {
                self.finish(idx, Err(StepError::new("never completed", &[])));
            }
        }
    }

    fn schedule_ready(&mut self) {
        let now = self.engine.now();
        for idx in 0..self.steps.len() {
            if self.steps[idx].phase != Phase::Waiting {
                continue;
            }
            let spec = &self.scenario.steps[idx];
            let deps: Vec<usize> = spec
                .after
                .as_deref()
                .unwrap_or_default()
                .iter()
                .map(|l| {
                    self.scenario
                        .steps
                        .iter()
                        .position(|s| &s.label == l)
                        .expect("validated")
                })
                .collect();
            if deps.iter().any(|&d| self.steps[d].phase != Phase::Done) {
                continue;
            }
            if let Some(&d) = deps.iter().find(|&&d| !self.steps[d].passed) {
                let msg = format!("skipped: {} failed", self.scenario.steps[d].label);
                self.steps[idx].phase = Phase::Running;
                self.finish(idx, Err(StepError::new(msg, &[])));
                continue;
            }
            let base = deps
                .iter()
                .filter_map(|&d| self.steps[d].completed_at)
                .max()
                .unwrap_or(SimTime::ZERO);
            let mut start = base + secs(spec.delay);
            if let Some(at) = spec.at {
                start = start.max(SimTime::from_secs_f64(at));
            }
            if start <= now {
                self.start(idx);
            } else {
                self.steps[idx].phase = Phase::Scheduled;
                self.engine
                    .schedule_timer(start, token(idx, 0, TIMER_START));
            }
        }
    }

    fn on_notice(&mut self, n: Notice) {
        match n {
            Notice::Timer { token: t, .. } => {
                let (idx, generation, kind) = untoken(t);
                let Some(step) = self.steps.get(idx) else {
                    return;
                };
                match kind {
                    TIMER_START if step.phase == Phase::Scheduled => self.start(idx),
                    TIMER_POLL if step.phase == Phase::Running => self.send_call(idx),
                    TIMER_TIMEOUT
                        if step.phase == Phase::Running && step.generation == generation =>
                    {
                        let t = self.spec(idx).timeout;
                        self.finish(
                            idx,
                            Err(StepError::new(
                                format!("timed out after {t}s"),
                                &["Timeout"],
                            )),
                        );
                    }
                    _ => {}
                }
            }
            Notice::Rx { conn, .. } => {
                while let Some(body) = self.engine.take_rx(conn) {
                    match self.owners.get(&conn).copied() {
                        Some(idx) if self.steps[idx].phase == Phase::Running => {
                            self.on_reply(idx, conn, body)
                        }
                        _ => log::debug!("dropping unsolicited message on conn{conn}"),
                    }
                }
            }
            Notice::BulkDone { conn, .. } => {
                if let Some(idx) = self.owners.get(&conn).copied() {
                    if self.steps[idx].phase == Phase::Running {
                        let bytes = self.spec(idx).bytes;
                        self.engine.close(conn);
                        self.finish(idx, Ok(json!({ "bytes": bytes })));
                    }
                }
            }
            // the error reply that preceded the close is still in flight
            Notice::Closed { .. } => {}
        }
    }

    fn start(&mut self, idx: usize) {
        let now = self.engine.now();
        let spec = &self.scenario.steps[idx];
        self.steps[idx].phase = Phase::Running;
        self.steps[idx].issued_at = Some(now);
        self.engine.note(
            spec.actor.clone(),
            "step-start",
            format!("{} {:?}", spec.label, spec.action).to_lowercase(),
        );
        if let Err(e) = self.begin(idx) {
            self.finish(idx, Err(e));
        }
    }

    fn connect(&mut self, idx: usize, host: &str, port: u16) -> Result<ConnId, StepError> {
        let spec = &self.scenario.steps[idx];
        let dst = self.engine.resolve(host)?;
        let conn = self
            .engine
            .connect(&spec.actor, spec.via.as_deref(), dst, port)?;
        Ok(conn)
    }

    fn begin(&mut self, idx: usize) -> Result<(), StepError> {
        let spec = &self.scenario.steps[idx];
        match spec.action {
            ActionKind::Invoke | ActionKind::Poll => {
                let uri = ObjectUri::parse(spec.uri.as_deref().expect("validated"))
                    .map_err(|e| StepError::new(e.to_string(), &["MalformedUri"]))?;
                let conn = self.connect(idx, uri.host(), uri.port())?;
                self.owners.insert(conn, idx);
                self.steps[idx].conn = Some(conn);
                self.send_call(idx);
                Ok(())
            }
            ActionKind::Mount => {
                let (host, port) = split_endpoint(spec.endpoint.as_deref().expect("validated"));
                let conn = self.connect(idx, host, port)?;
                let key = (spec.actor.clone(), spec.mount.clone());
                if let Some(old) = self.mounts.insert(
                    key,
                    Mount {
                        conn,
                        listing: Vec::new(),
                    },
                ) {
                    self.engine.close(old.conn);
                }
                self.finish(idx, Ok(Value::Null));
                Ok(())
            }
            ActionKind::List => {
                let conn = self.mount_conn(idx)?;
                self.send_share(idx, conn, ShareRequest::List);
                Ok(())
            }
            ActionKind::Fetch => {
                let conn = self.mount_conn(idx)?;
                let key = (spec.actor.clone(), spec.mount.clone());
                let path = match &spec.path {
                    Some(p) => p.clone(),
                    None => self.mounts[&key]
                        .listing
                        .last()
                        .map(|e| e.path.clone())
                        .ok_or_else(|| StepError::new("no path given and nothing listed", &[]))?,
                };
                let op = FetchOp::new(path, DEFAULT_CHUNK);
                let first = op.first_request();
                self.steps[idx].fetch = Some(op);
                self.send_share(idx, conn, first);
                Ok(())
            }
            ActionKind::Bulk => {
                let (host, port) = split_endpoint(spec.endpoint.as_deref().expect("validated"));
                let to_client = spec.direction == BulkDirection::Download;
                let bytes = spec.bytes;
                let conn = self.connect(idx, host, port)?;
                self.owners.insert(conn, idx);
                self.steps[idx].conn = Some(conn);
                if bytes == 0 {
                    self.engine.close(conn);
                    self.finish(idx, Ok(json!({ "bytes": 0 })));
                    return Ok(());
                }
                self.engine.send_bulk(conn, bytes, to_client)?;
                Ok(())
            }
        }
    }

    fn mount_conn(&mut self, idx: usize) -> Result<ConnId, StepError> {
        let spec = &self.scenario.steps[idx];
        let key = (spec.actor.clone(), spec.mount.clone());
        let conn = self.mounts.get(&key).map(|m| m.conn).ok_or_else(|| {
            StepError::new(
                format!("{} has no mount {:?}", spec.actor, spec.mount),
                &["StaleHandle"],
            )
        })?;
        if !self.engine.is_open(conn) {
            return Err(StepError::new("mount is closed", &["StaleHandle"]));
        }
        self.owners.insert(conn, idx);
        self.steps[idx].conn = Some(conn);
        Ok(conn)
    }

    fn arm_timeout(&mut self, idx: usize) {
        let step = &mut self.steps[idx];
        step.generation += 1;
        let at = self.engine.now() + secs(self.scenario.steps[idx].timeout);
        self.engine
            .schedule_timer(at, token(idx, step.generation, TIMER_TIMEOUT));
    }

    fn send_call(&mut self, idx: usize) {
        let spec = &self.scenario.steps[idx];
        let uri =
            ObjectUri::parse(spec.uri.as_deref().expect("validated")).expect("parsed at start");
        let id = self.next_id;
        self.next_id += 1;
        let req = Request {
            id,
            object: uri.objectid().to_string(),
            method: spec.method.clone().expect("validated"),
            args: spec.args.clone(),
        };
        let conn = self.steps[idx].conn.expect("connected");
        let sent = encode_body(&ControlMessage::Request(req), DEFAULT_MAX_BODY)
            .map_err(|e| StepError::new(e.to_string(), &["Protocol"]))
            .and_then(|body| self.engine.send(conn, body).map_err(StepError::from));
        match sent {
            Ok(()) => {
                self.steps[idx].req_id = id;
                self.steps[idx].polls += 1;
                self.arm_timeout(idx);
            }
            Err(e) => self.finish(idx, Err(e)),
        }
    }

    fn send_share(&mut self, idx: usize, conn: ConnId, req: ShareRequest) {
        self.steps[idx].share_op = req.opcode();
        match self.engine.send(conn, req.encode()) {
            Ok(()) => self.arm_timeout(idx),
            Err(e) => self.finish(idx, Err(e.into())),
        }
    }

    fn note_server_times(&mut self, idx: usize, conn: ConnId) {
        if let Some(info) = self.engine.conn_info(conn) {
            let step = &mut self.steps[idx];
            if step.served_first.is_none() {
                step.served_first = info.last_server_rx;
            }
            step.served_last = info.last_server_rx;
            step.replied_at = info.last_server_tx;
        }
    }

    fn on_reply(&mut self, idx: usize, conn: ConnId, body: Vec<u8>) {
        self.note_server_times(idx, conn);
        match self.spec(idx).action {
            ActionKind::Invoke | ActionKind::Poll => self.on_control_reply(idx, conn, &body),
            ActionKind::List | ActionKind::Fetch => self.on_share_reply(idx, conn, &body),
            ActionKind::Mount | ActionKind::Bulk => log::debug!("ignoring message on conn{conn}"),
        }
    }

    fn on_control_reply(&mut self, idx: usize, conn: ConnId, body: &[u8]) {
        let resp = match decode_body(body) {
            Ok(ControlMessage::Response(r)) => r,
            Ok(_) => return log::warn!("request arrived at a client on conn{conn}"),
            Err(e) => {
                self.engine.close(conn);
                return self.finish(idx, Err(StepError::new(e.to_string(), &["Protocol"])));
            }
        };
        if resp.id != self.steps[idx].req_id && resp.id != 0 {
            return log::warn!("stale response {} on conn{conn}", resp.id);
        }
        let outcome = resp.outcome.into_result().map_err(StepError::from);
        let spec = &self.scenario.steps[idx];
        let poll_again = match (&outcome, spec.action) {
            (Ok(v), ActionKind::Poll) => {
                let step = &mut self.steps[idx];
                if step.observed.last() != Some(v) {
                    step.observed.push(v.clone());
                }
                let until = spec.until.as_ref().expect("validated");
                !value_matches(until, v) && step.polls < spec.max_polls
            }
            _ => false,
        };
        if poll_again {
            let at = self.engine.now() + secs(spec.interval);
            self.engine.schedule_timer(at, token(idx, 0, TIMER_POLL));
            return;
        }
        let outcome = match outcome {
            Ok(v)
                if spec.action == ActionKind::Poll
                    && !value_matches(spec.until.as_ref().unwrap(), &v) =>
            {
                Err(StepError::new(
                    format!("gave up after {} polls", self.steps[idx].polls),
                    &["PollLimit"],
                ))
            }
            other => other,
        };
        self.engine.close(conn);
        self.finish(idx, outcome);
    }

    fn on_share_reply(&mut self, idx: usize, conn: ConnId, body: &[u8]) {
        let op = self.steps[idx].share_op;
        let resp = match ShareResponse::decode(body, op) {
            Ok(r) => r,
            Err(e) => return self.finish(idx, Err(e.into())),
        };
        if self.spec(idx).action == ActionKind::List {
            let outcome = match resp.into_error() {
                Ok(ShareResponse::Listing(entries)) => {
                    let v = serde_json::to_value(&entries).expect("entries serialize");
                    let spec = &self.scenario.steps[idx];
                    if let Some(m) = self
                        .mounts
                        .get_mut(&(spec.actor.clone(), spec.mount.clone()))
                    {
                        m.listing = entries;
                    }
                    Ok(v)
                }
                Ok(other) => Err(StepError::new(
                    format!("unexpected response {other:?}"),
                    &["Protocol"],
                )),
                Err(e) => Err(e.into()),
            };
            return self.finish(idx, outcome);
        }
        let mut fetch = self.steps[idx].fetch.take().expect("fetch in progress");
        match fetch.on_response(resp) {
            Ok(Some(next)) => {
                self.steps[idx].fetch = Some(fetch);
                self.send_share(idx, conn, next);
            }
            Ok(None) => {
                let outcome = fetch.finish().map_err(StepError::from).and_then(|rec| {
                    let h = rec.record.header;
                    let info = self.engine.conn_info(conn).expect("conn exists");
                    if self.spec(idx).verify {
                        let store = self
                            .served_stores
                            .get(&(info.server_host, info.port))
                            .ok_or_else(|| StepError::new("no store behind this share", &[]))?;
                        let local = store
                            .read_raw(&rec.record.path)
                            .map_err(|e| StepError::new(e.to_string(), &["Verify"]))?;
                        if local != rec.raw {
                            return Err(StepError::new(
                                "fetched bytes differ from the stored record",
                                &["Verify"],
                            ));
                        }
                    }
                    Ok(json!({
                        "path": rec.record.path,
                        "size": rec.raw.len(),
                        "checksum": rec.checksum,
                        "channel": h.channel,
                        "frame_index": h.frame_index,
                        "width": h.width,
                        "height": h.height,
                    }))
                });
                self.finish(idx, outcome);
            }
            Err(e) => self.finish(idx, Err(e.into())),
        }
    }

    fn finish(&mut self, idx: usize, outcome: Outcome) {
        let now = self.engine.now();
        let spec = &self.scenario.steps[idx];
        if let Some(conn) = self.steps[idx].conn.take() {
            self.owners.remove(&conn);
        }
        let step = &mut self.steps[idx];
        step.phase = Phase::Done;
        step.completed_at = Some(now);
        step.fetch = None;
        let (passed, message) = match (&outcome, &spec.expect_error) {
            (Err(e), Some(want)) if e.names.iter().any(|n| n == want) => {
                (true, format!("failed as expected: {}", e.message))
            }
            (Err(e), Some(want)) => (false, format!("expected {want}, got: {}", e.message)),
            (Ok(_), Some(want)) => (false, format!("expected {want}, but the step succeeded")),
            (Err(e), None) => (false, e.message.clone()),
            (Ok(v), None) => check_expectations(spec, v, &step.observed),
        };
        match outcome {
            Ok(v) => step.result = Some(summarize(&v)),
            Err(e) => {
                step.error_kind = e.names.first().cloned();
                step.error = Some(e.message);
            }
        }
        step.passed = passed;
        step.message = message;
        self.engine.note(
            spec.actor.clone(),
            "step-done",
            format!("{} {}", spec.label, if passed { "ok" } else { "failed" }),
        );
    }

    fn report(self, seed: u64, topology: String) -> ScenarioReport {
        let find = |label: &str| {
            self.scenario
                .steps
                .iter()
                .position(|s| s.label == label)
                .expect("validated")
        };
        let mut failures = Vec::new();
        let steps: Vec<StepReport> = self
            .steps
            .iter()
            .zip(&self.scenario.steps)
            .enumerate()
            .map(|(index, (run, spec))| {
                if !run.passed {
                    failures.push(Failure::StepFailure {
                        index,
                        label: spec.label.clone(),
                        message: run.message.clone(),
                    });
                }
                StepReport {
                    index,
                    label: spec.label.clone(),
                    actor: spec.actor.clone(),
                    action: spec.action,
                    passed: run.passed,
                    issued_at: run.issued_at,
                    completed_at: run.completed_at,
                    served_first: run.served_first,
                    served_last: run.served_last,
                    replied_at: run.replied_at,
                    result: run.result.clone(),
                    error: run.error.clone(),
                    error_kind: run.error_kind.clone(),
                    observed: run.observed.clone(),
                    message: run.message.clone(),
                }
            })
            .collect();
        let asserts: Vec<AssertReport> = self
            .scenario
            .asserts
            .iter()
            .enumerate()
            .map(|(index, a)| {
                let s = &steps[find(&a.step)];
                let o = a.of.as_deref().map(|l| &steps[find(l)]);
                let (passed, message) = check_assert(a.kind, s, o, a.seconds);
                if !passed {
                    failures.push(Failure::AssertFailure {
                        index,
                        message: message.clone(),
                    });
                }
                AssertReport {
                    index,
                    kind: a.kind,
                    step: a.step.clone(),
                    of: a.of.clone(),
                    passed,
                    message,
                }
            })
            .collect();
        let virtual_time = steps
            .iter()
            .filter_map(|s| s.completed_at)
            .max()
            .unwrap_or(SimTime::ZERO);
        let log = self.engine.log();
        ScenarioReport {
            scenario: self.scenario.name.clone(),
            topology,
            seed,
            passed: failures.is_empty(),
            virtual_time,
            events: log.len(),
            log_fingerprint: log.fingerprint(),
            steps,
            asserts,
            failures,
            log: log.export(),
        }
    }
}

fn check_expectations(spec: &StepSpec, v: &Value, observed: &[Value]) -> (bool, String) {
    if let Some(want) = &spec.expect {
        if !value_matches(want, v) {
            return (false, format!("expected {want}, got {}", summarize(v)));
        }
    }
    if let Some(n) = spec.expect_count {
        let got = v.as_array().map_or(0, Vec::len);
        if got != n {
            return (false, format!("expected {n} entries, got {got}"));
        }
    }
    if let Some(seen) = &spec.expect_seen {
        if !is_subsequence(seen, observed) {
            return (
                false,
                format!(
                    "expected to observe {} in order, observed {}",
                    Value::from(seen.clone()),
                    Value::from(observed.to_vec())
                ),
            );
        }
    }
    (true, String::new())
}

fn check_assert(
    kind: AssertKind,
    s: &StepReport,
    of: Option<&StepReport>,
    seconds: Option<f64>,
) -> (bool, String) {
    let missing = |what: &str, label: &str| (false, format!("{label} has no {what} time"));
    match kind {
        AssertKind::During | AssertKind::After | AssertKind::Before => {
            let o = of.expect("validated");
            let (Some(o_served), Some(o_replied)) = (o.served_first, o.replied_at) else {
                return missing("server", &o.label);
            };
            let (Some(first), Some(last)) = (s.served_first, s.served_last) else {
                return missing("server", &s.label);
            };
            match kind {
                AssertKind::During => (
                    o_served <= first && first <= o_replied,
                    format!(
                        "{} served at {first}, {} in progress {o_served}..{o_replied}",
                        s.label, o.label
                    ),
                ),
                AssertKind::After => (
                    last >= o_replied,
                    format!(
                        "{} last served at {last}, {} replied at {o_replied}",
                        s.label, o.label
                    ),
                ),
                _ => (
                    first < o_served,
                    format!(
                        "{} served at {first}, {} served at {o_served}",
                        s.label, o.label
                    ),
                ),
            }
        }
        AssertKind::ServerElapsed => {
            let want = SimTime::from_secs_f64(seconds.expect("validated"));
            let (Some(a), Some(b)) = (s.served_first, s.replied_at) else {
                return missing("server", &s.label);
            };
            let got = SimTime::from_nanos(b.as_nanos() - a.as_nanos());
            (got == want, format!("server-side {got}s, expected {want}s"))
        }
        AssertKind::CompletedWithin => {
            let limit = SimTime::from_secs_f64(seconds.expect("validated"));
            let (Some(a), Some(b)) = (s.issued_at, s.completed_at) else {
                return missing("completion", &s.label);
            };
            let got = SimTime::from_nanos(b.as_nanos() - a.as_nanos());
            (got <= limit, format!("completed in {got}s, limit {limit}s"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_roundtrip() {
        for (i, g, k) in [(0, 0, 0), (5, 77, 2), (1000, (1 << 38) - 1, 1)] {
            assert_eq!(untoken(token(i, g, k)), (i, g, k));
        }
    }

    #[test]
    fn endpoints() {
        assert_eq!(split_endpoint("nas:4450"), ("nas", 4450));
        assert_eq!(
            split_endpoint("10.1.156.37"),
            ("10.1.156.37", DEFAULT_SHARE_PORT)
        );
        assert_eq!(
            split_endpoint("eapm:data0"),
            ("eapm:data0", DEFAULT_SHARE_PORT)
        );
    }

    #[test]
    fn subsequences() {
        let v = |b: bool| Value::Bool(b);
        assert!(is_subsequence(
            &[v(true), v(false)],
            &[v(false), v(true), v(false)]
        ));
        assert!(!is_subsequence(&[v(true), v(false)], &[v(false), v(true)]));
    }
}
