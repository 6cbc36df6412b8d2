//! The twin's event log: one line per event, stable field order.

use std::fmt;

use sha2::{Digest, Sha256};

use crate::time::SimTime;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogRecord {
    pub time: SimTime,
    pub entity: String,
    pub kind: &'static str,
    pub detail: String,
    /// Short SHA-256 of the payload involved, if any.
    pub digest: Option<String>,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}",
            self.time,
            self.entity,
            self.kind,
            self.detail,
            self.digest.as_deref().unwrap_or("-")
        )
    }
}

/// First 16 hex digits of the payload's SHA-256.
pub fn payload_digest(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventLog {
    records: Vec<LogRecord>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, rec: LogRecord) {
        if let Some(last) = self.records.last() {
            assert!(rec.time >= last.time, "event log time went backwards");
        }
        log::trace!("{rec}");
        self.records.push(rec);
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Line-oriented text: `time  entity  kind  detail  digest`, tab-separated.
    pub fn export(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.to_string());
            out.push('\n');
        }
        out
    }

    /// SHA-256 of [`EventLog::export`].
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.export().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn export_layout() {
        let mut log = EventLog::new();
        log.push(LogRecord {
            time: SimTime::from_nanos(1_000),
            entity: "eapm".into(),
            kind: "send",
            detail: "conn=1 bytes=10".into(),
            digest: Some(payload_digest(b"x")),
        });
        let text = log.export();
        assert_eq!(text.lines().count(), 1);
        let cols: Vec<_> = text.trim_end().split('\t').collect();
        assert_eq!(cols[0], "0.000001000");
        assert_eq!(cols[2], "send");
        assert_eq!(cols[4].len(), 16);
    }

    #[test]
    #[should_panic(expected = "backwards")]
    fn time_is_nondecreasing() {
        let mut log = EventLog::new();
        for t in [5, 3] {
            log.push(LogRecord {
                time: SimTime::from_nanos(t),
                entity: "x".into(),
                kind: "k",
                detail: String::new(),
                digest: None,
            });
        }
    }
}
