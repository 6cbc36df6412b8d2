//! Instrument-side measurement store: one `STEMFRM1` file per frame plus an
//! append-only, tab-separated index (`path`, `size`, `sha256`).

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::format::{FormatError, FrameMetadata, MeasurementRecord};
use crate::instrument::{Frame, ScanParameters};

pub const INDEX_FILE: &str = "index.tsv";
pub const RECORD_EXTENSION: &str = "stemfrm";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage full")]
    StorageFull,
    #[error("record {0} already exists")]
    Duplicate(String),
    #[error("no record {0}")]
    NotFound(String),
    #[error("corrupt record {path}: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("corrupt index line {line}: {reason}")]
    BadIndex { line: usize, reason: String },
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for StoreError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::StorageFull {
            StoreError::StorageFull
        } else {
            StoreError::Io(e)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub path: String,
    pub size: u64,
    /// Lowercase hex SHA-256 of the whole file.
    pub checksum: String,
}

impl IndexEntry {
    fn to_line(&self) -> String {
        format!("{}\t{}\t{}\n", self.path, self.size, self.checksum)
    }

    fn parse(line: &str, lineno: usize) -> Result<Self, StoreError> {
        let bad = |reason: &str| StoreError::BadIndex {
            line: lineno,
            reason: reason.to_string(),
        };
        let mut cols = line.split('\t');
        let (Some(path), Some(size), Some(checksum), None) =
            (cols.next(), cols.next(), cols.next(), cols.next())
        else {
            return Err(bad("expected three tab-separated columns"));
        };
        Ok(Self {
            path: path.to_string(),
            size: size.parse().map_err(|_| bad("size is not an integer"))?,
            checksum: checksum.to_string(),
        })
    }
}

/// Session-level context attached to every frame of one store call.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionMetadata {
    pub session: String,
    pub scan: Option<ScanParameters>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A record name is a single plain file name.
pub fn valid_record_name(name: &str) -> bool {
    !name.is_empty()
        && name != INDEX_FILE
        && !name.starts_with('.')
        && !name.contains(['/', '\\', '\t', '\n', '\0'])
}

pub fn record_name(session: &str, channel: u32, frame_index: u64) -> String {
    format!("{session}_{channel}_{frame_index}.{RECORD_EXTENSION}")
}

#[derive(Debug)]
pub struct MeasurementStore {
    root: PathBuf,
    // Serializes record writes and index appends.
    write_lock: Mutex<()>,
}

impl MeasurementStore {
    /// Opens (creating if needed) a store rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let index = root.join(INDEX_FILE);
        if !index.exists() {
            File::create(&index)?;
        }
        Ok(Self {
            root,
            write_lock: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Writes one file per frame and appends each to the index.
    pub fn store_measurement(
        &self,
        frames: &[Frame],
        session: &SessionMetadata,
    ) -> Result<Vec<String>, StoreError> {
        if frames.is_empty() {
            return Ok(Vec::new());
        }
        let _guard = self.write_lock.lock().unwrap_or_else(|p| p.into_inner());
        let mut paths = Vec::with_capacity(frames.len());
        for frame in frames {
            let name = record_name(&session.session, frame.channel, frame.frame_index);
            if !valid_record_name(&name) {
                return Err(StoreError::Corrupt {
                    path: name,
                    reason: "session label produces an invalid file name".into(),
                });
            }
            let target = self.root.join(&name);
            if target.exists() {
                return Err(StoreError::Duplicate(name));
            }
            let meta = FrameMetadata {
                session: session.session.clone(),
                probe: frame.probe_at_acquisition,
                acquired_at_ns: frame.acquired_at.as_nanos(),
                scan: session.scan,
            };
            let bytes = MeasurementRecord::from_frame(&name, frame, meta).encode();
            let tmp = self.root.join(format!(".{name}.tmp"));
            {
                let mut f = File::create(&tmp)?;
                f.write_all(&bytes)?;
                f.sync_all()?;
            }
            fs::rename(&tmp, &target)?;
            let entry = IndexEntry {
                path: name.clone(),
                size: bytes.len() as u64,
                checksum: sha256_hex(&bytes),
            };
            let mut index = OpenOptions::new()
                .append(true)
                .open(self.root.join(INDEX_FILE))?;
            index.write_all(entry.to_line().as_bytes())?;
            index.sync_data()?;
            paths.push(name);
        }
        Ok(paths)
    }

    pub fn index(&self) -> Result<Vec<IndexEntry>, StoreError> {
        let f = File::open(self.root.join(INDEX_FILE))?;
        BufReader::new(f)
            .lines()
            .enumerate()
            .filter(|(_, l)| !matches!(l, Ok(s) if s.is_empty()))
            .map(|(i, l)| IndexEntry::parse(&l?, i + 1))
            .collect()
    }

    pub fn entry(&self, path: &str) -> Result<IndexEntry, StoreError> {
        self.index()?
            .into_iter()
            .find(|e| e.path == path)
            .ok_or_else(|| StoreError::NotFound(path.to_string()))
    }

    /// Raw file bytes of a listed record.
    pub fn read_raw(&self, path: &str) -> Result<Vec<u8>, StoreError> {
        if !valid_record_name(path) {
            return Err(StoreError::NotFound(path.to_string()));
        }
        self.entry(path)?;
        fs::read(self.root.join(path)).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => StoreError::NotFound(path.to_string()),
            _ => e.into(),
        })
    }

    pub fn load(&self, path: &str) -> Result<MeasurementRecord, StoreError> {
        let bytes = self.read_raw(path)?;
        MeasurementRecord::decode(path, &bytes).map_err(|e: FormatError| StoreError::Corrupt {
            path: path.to_string(),
            reason: e.to_string(),
        })
    }
}
