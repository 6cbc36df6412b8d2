//! The instrument's task functions published as a remote object.

use std::sync::Arc;

use super::message::{RemoteError, Value};
use super::registry::{args, RemoteObject, Reply};
use crate::data::store::{MeasurementStore, SessionMetadata};
use crate::instrument::{Frame, Instrument, InstrumentError};

pub const DEFAULT_OBJECTID: &str = "swift_server";

pub const SCAN_STATUS: &str = "scan_status";
pub const SCAN_CHANNEL: &str = "scan_channel";
pub const PROBE_POSITION: &str = "probe_position";

impl From<InstrumentError> for RemoteError {
    fn from(e: InstrumentError) -> Self {
        RemoteError::application(e.code(), e.to_string())
    }
}

/// Session label used for stored frames: `s` + zero-padded scan session number.
pub fn session_label(session: u64) -> String {
    format!("s{session:06}")
}

/// `scan_status`, `scan_channel` and `probe_position` on one instrument.
///
/// When a store is attached, every completed `scan_channel` also writes its
/// frames there, so remote consumers find them on the data channel.
pub struct StemTaskObject {
    instrument: Arc<Instrument>,
    store: Option<Arc<MeasurementStore>>,
}

impl StemTaskObject {
    pub fn new(instrument: Arc<Instrument>) -> Self {
        Self {
            instrument,
            store: None,
        }
    }

    pub fn with_store(mut self, store: Arc<MeasurementStore>) -> Self {
        self.store = Some(store);
        self
    }

    pub fn instrument(&self) -> &Arc<Instrument> {
        &self.instrument
    }

    fn scan_channel(&self, a: &[Value]) -> Result<Reply, RemoteError> {
        args::expect_len(a, 2)?;
        let ch = args::int(a, 0, "ch")?;
        let n = args::int(a, 1, "num_frames")?;
        let ticket = self.instrument.begin_scan(ch, n)?;
        let instrument = self.instrument.clone();
        let store = self.store.clone();
        Ok(Reply::Deferred {
            delay: ticket.duration,
            finish: Box::new(move || {
                let frames = instrument.finish_scan(&ticket)?;
                if let Some(store) = store {
                    let meta = SessionMetadata {
                        session: session_label(ticket.session),
                        scan: Some(instrument.snapshot().scan_params),
                    };
                    store
                        .store_measurement(&frames, &meta)
                        .map_err(|e| RemoteError::application("StoreError", e.to_string()))?;
                }
                serde_json::to_value(&frames)
                    .map_err(|e| RemoteError::application("EncodeError", e.to_string()))
            }),
        })
    }
}

impl RemoteObject for StemTaskObject {
    fn methods(&self) -> &[&'static str] {
        &[SCAN_STATUS, SCAN_CHANNEL, PROBE_POSITION]
    }

    fn call(&self, method: &str, a: &[Value]) -> Reply {
        let r = match method {
            SCAN_STATUS => args::expect_len(a, 0).map(|_| Reply::ok(self.instrument.scan_status())),
            SCAN_CHANNEL => self.scan_channel(a),
            PROBE_POSITION => (|| {
                args::expect_len(a, 2)?;
                let x = args::real(a, 0, "x")?;
                let y = args::real(a, 1, "y")?;
                let report = self.instrument.probe_position(x, y)?;
                Ok(Reply::ok(
                    serde_json::to_value(report).expect("report serializes"),
                ))
            })(),
            _ => unreachable!("registry only dispatches advertised methods"),
        };
        r.unwrap_or_else(Reply::err)
    }
}

/// Decodes a `scan_channel` result.
pub fn frames_from_value(v: Value) -> Result<Vec<Frame>, serde_json::Error> {
    serde_json::from_value(v)
}
