//! Read-only file-share protocol over length-prefixed binary frames.
//!
//! Every frame is a 4-byte big-endian length followed by the body. All
//! integers are big-endian.
//!
//! Request body: `opcode:u8` then
//! * `LIST (1)`: nothing
//! * `STAT (2)`: `path_len:u16 path`
//! * `READ (3)`: `path_len:u16 path offset:u64 length:u32`
//!
//! Response body: `status:u8 opcode:u8` then, for status `OK (0)`,
//! * `LIST`: `count:u32` and `count × (path_len:u16 path size:u64 sum_len:u16 sum)`
//! * `STAT`: `size:u64 sum_len:u16 sum`
//! * `READ`: `data_len:u32 data`
//!
//! and for any other status `msg_len:u16 msg`. Statuses: `NOT_FOUND (1)`,
//! `RANGE_ERROR (2)`, `BAD_REQUEST (3)`, `SERVER_ERROR (4)`.
//!
//! The client side is written sans-IO ([`FetchOp`]) so the same logic runs
//! over TCP and over the twin's virtual connections.

use std::fs::File;
use std::io::{self, Read, Seek, SeekFrom};
use std::net::{TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use super::format::MeasurementRecord;
use super::store::{sha256_hex, IndexEntry, MeasurementStore, StoreError};
use crate::control::codec::{read_frame, write_frame};
use crate::tcp::TcpServer;

pub const OP_LIST: u8 = 1;
pub const OP_STAT: u8 = 2;
pub const OP_READ: u8 = 3;

pub const STATUS_OK: u8 = 0;
pub const STATUS_NOT_FOUND: u8 = 1;
pub const STATUS_RANGE_ERROR: u8 = 2;
pub const STATUS_BAD_REQUEST: u8 = 3;
pub const STATUS_SERVER_ERROR: u8 = 4;

/// Largest READ a server will honour.
pub const MAX_READ: u32 = 16 * 1024 * 1024;
/// Largest frame either side accepts.
pub const MAX_SHARE_FRAME: usize = MAX_READ as usize + 1024;
/// Chunk size used by [`ShareHandle::fetch_measurement`].
pub const DEFAULT_CHUNK: u32 = 64 * 1024;
pub const DEFAULT_SHARE_PORT: u16 = 4450;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ShareError {
    #[error("connection refused: {0}")]
    ConnectionRefused(String),
    #[error("timed out")]
    Timeout,
    #[error("share handle is closed")]
    StaleHandle,
    #[error("not found: {0}")]
    NotFound(String),
    #[error("range error: {0}")]
    RangeError(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("server error: {0}")]
    Server(String),
    #[error("corrupt record: {0}")]
    CorruptRecord(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl ShareError {
    pub fn from_io(e: &io::Error) -> Self {
        match e.kind() {
            io::ErrorKind::ConnectionRefused => ShareError::ConnectionRefused(e.to_string()),
            io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock => ShareError::Timeout,
            _ => ShareError::Io(e.to_string()),
        }
    }

    /// True for failures to reach the server at all.
    pub fn is_connectivity(&self) -> bool {
        matches!(
            self,
            ShareError::ConnectionRefused(_) | ShareError::Timeout | ShareError::Io(_)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ShareRequest {
    List,
    Stat {
        path: String,
    },
    Read {
        path: String,
        offset: u64,
        length: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ShareResponse {
    Listing(Vec<IndexEntry>),
    Stat {
        size: u64,
        checksum: String,
    },
    Data(Vec<u8>),
    Error {
        status: u8,
        opcode: u8,
        message: String,
    },
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ShareError> {
        if self.buf.len() < n {
            return Err(ShareError::Protocol("body truncated".into()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8, ShareError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, ShareError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, ShareError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, ShareError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string16(&mut self) -> Result<String, ShareError> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| ShareError::Protocol("string is not UTF-8".into()))
    }
    fn finish(&self) -> Result<(), ShareError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(ShareError::Protocol("trailing bytes".into()))
        }
    }
}

fn put_string16(out: &mut Vec<u8>, s: &str) {
    let bytes = &s.as_bytes()[..s.len().min(u16::MAX as usize)];
    out.extend_from_slice(&(bytes.len() as u16).to_be_bytes());
    out.extend_from_slice(bytes);
}

impl ShareRequest {
    pub fn opcode(&self) -> u8 {
        match self {
            ShareRequest::List => OP_LIST,
            ShareRequest::Stat { .. } => OP_STAT,
            ShareRequest::Read { .. } => OP_READ,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![self.opcode()];
        match self {
            ShareRequest::List => {}
            ShareRequest::Stat { path } => put_string16(&mut out, path),
            ShareRequest::Read {
                path,
                offset,
                length,
            } => {
                put_string16(&mut out, path);
                out.extend_from_slice(&offset.to_be_bytes());
                out.extend_from_slice(&length.to_be_bytes());
            }
        }
        out
    }

    pub fn decode(body: &[u8]) -> Result<Self, ShareError> {
        let mut r = Reader { buf: body };
        let req = match r.u8()? {
            OP_LIST => ShareRequest::List,
            OP_STAT => ShareRequest::Stat {
                path: r.string16()?,
            },
            OP_READ => ShareRequest::Read {
                path: r.string16()?,
                offset: r.u64()?,
                length: r.u32()?,
            },
            op => return Err(ShareError::Protocol(format!("unknown opcode {op}"))),
        };
        r.finish()?;
        Ok(req)
    }
}

impl ShareResponse {
    pub fn encode(&self, opcode: u8) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            ShareResponse::Error {
                status, message, ..
            } => {
                out.push(*status);
                out.push(opcode);
                put_string16(&mut out, message);
                return out;
            }
            _ => {
                out.push(STATUS_OK);
                out.push(opcode);
            }
        }
        match self {
            ShareResponse::Listing(entries) => {
                out.extend_from_slice(&(entries.len() as u32).to_be_bytes());
                for e in entries {
                    put_string16(&mut out, &e.path);
                    out.extend_from_slice(&e.size.to_be_bytes());
                    put_string16(&mut out, &e.checksum);
                }
            }
            ShareResponse::Stat { size, checksum } => {
                out.extend_from_slice(&size.to_be_bytes());
                put_string16(&mut out, checksum);
            }
            ShareResponse::Data(data) => {
                out.extend_from_slice(&(data.len() as u32).to_be_bytes());
                out.extend_from_slice(data);
            }
            ShareResponse::Error { .. } => unreachable!(),
        }
        out
    }

    /// Decodes a response to a request with opcode `expected_op`.
    pub fn decode(body: &[u8], expected_op: u8) -> Result<Self, ShareError> {
        let mut r = Reader { buf: body };
        let status = r.u8()?;
        let opcode = r.u8()?;
        if opcode != expected_op {
            return Err(ShareError::Protocol(format!(
                "response opcode {opcode} does not answer request opcode {expected_op}"
            )));
        }
        if status != STATUS_OK {
            let message = r.string16()?;
            r.finish()?;
            return Ok(ShareResponse::Error {
                status,
                opcode,
                message,
            });
        }
        let resp = match opcode {
            OP_LIST => {
                let n = r.u32()? as usize;
                let mut entries = Vec::with_capacity(n.min(4096));
                for _ in 0..n {
                    entries.push(IndexEntry {
                        path: r.string16()?,
                        size: r.u64()?,
                        checksum: r.string16()?,
                    });
                }
                ShareResponse::Listing(entries)
            }
            OP_STAT => ShareResponse::Stat {
                size: r.u64()?,
                checksum: r.string16()?,
            },
            OP_READ => {
                let n = r.u32()? as usize;
                ShareResponse::Data(r.take(n)?.to_vec())
            }
            op => return Err(ShareError::Protocol(format!("unknown opcode {op}"))),
        };
        r.finish()?;
        Ok(resp)
    }

    /// Turns an error response into the matching [`ShareError`].
    pub fn into_error(self) -> Result<Self, ShareError> {
        match self {
            ShareResponse::Error {
                status, message, ..
            } => Err(match status {
                STATUS_NOT_FOUND => ShareError::NotFound(message),
                STATUS_RANGE_ERROR => ShareError::RangeError(message),
                STATUS_BAD_REQUEST => ShareError::BadRequest(message),
                _ => ShareError::Server(message),
            }),
            other => Ok(other),
        }
    }
}

/// Server side: answers request bodies from a store. Stateless and shareable.
#[derive(Debug, Clone)]
pub struct ShareService {
    store: Arc<MeasurementStore>,
}

impl ShareService {
    pub fn new(store: Arc<MeasurementStore>) -> Self {
        Self { store }
    }

    pub fn store(&self) -> &Arc<MeasurementStore> {
        &self.store
    }

    fn error(status: u8, message: impl Into<String>) -> ShareResponse {
        ShareResponse::Error {
            status,
            opcode: 0,
            message: message.into(),
        }
    }

    fn store_error(e: StoreError) -> ShareResponse {
        match e {
            StoreError::NotFound(p) => Self::error(STATUS_NOT_FOUND, p),
            other => Self::error(STATUS_SERVER_ERROR, other.to_string()),
        }
    }

    pub fn respond(&self, req: &ShareRequest) -> ShareResponse {
        match req {
            ShareRequest::List => match self.store.index() {
                Ok(entries) => ShareResponse::Listing(entries),
                Err(e) => Self::store_error(e),
            },
            ShareRequest::Stat { path } => match self.store.entry(path) {
                Ok(e) => ShareResponse::Stat {
                    size: e.size,
                    checksum: e.checksum,
                },
                Err(e) => Self::store_error(e),
            },
            ShareRequest::Read {
                path,
                offset,
                length,
            } => {
                let entry = match self.store.entry(path) {
                    Ok(e) => e,
                    Err(e) => return Self::store_error(e),
                };
                if *length > MAX_READ {
                    return Self::error(
                        STATUS_RANGE_ERROR,
                        format!("read of {length} bytes exceeds {MAX_READ}"),
                    );
                }
                match offset.checked_add(*length as u64) {
                    Some(end) if end <= entry.size => {}
                    _ => {
                        return Self::error(
                            STATUS_RANGE_ERROR,
                            format!(
                                "{offset}+{length} past end of {path} ({} bytes)",
                                entry.size
                            ),
                        )
                    }
                }
                match self.read_range(path, *offset, *length) {
                    Ok(data) => ShareResponse::Data(data),
                    Err(e) => Self::error(STATUS_SERVER_ERROR, e.to_string()),
                }
            }
        }
    }

    fn read_range(&self, path: &str, offset: u64, length: u32) -> io::Result<Vec<u8>> {
        let mut f = File::open(self.store.root().join(path))?;
        f.seek(SeekFrom::Start(offset))?;
        let mut buf = vec![0u8; length as usize];
        f.read_exact(&mut buf)?;
        Ok(buf)
    }

    /// Request body in, response body out. Malformed requests get `BAD_REQUEST`.
    pub fn handle(&self, body: &[u8]) -> Vec<u8> {
        let opcode = body.first().copied().unwrap_or(0);
        match ShareRequest::decode(body) {
            Ok(req) => self.respond(&req).encode(req.opcode()),
            Err(e) => Self::error(STATUS_BAD_REQUEST, e.to_string()).encode(opcode),
        }
    }
}

/// A running share server.
pub struct ShareServer {
    inner: TcpServer,
}

impl ShareServer {
    pub fn local_addr(&self) -> std::net::SocketAddr {
        self.inner.local_addr()
    }

    pub fn shutdown(&mut self) {
        self.inner.shutdown();
    }

    pub fn wait(self) {
        self.inner.wait();
    }
}

/// Serves `root` read-only on `bind`.
pub fn export_share<A: ToSocketAddrs>(
    root: impl Into<PathBuf>,
    bind: A,
) -> Result<ShareServer, StoreError> {
    let root = root.into();
    if !root.is_dir() {
        return Err(StoreError::NotFound(root.display().to_string()));
    }
    let service = ShareService::new(Arc::new(MeasurementStore::open(root)?));
    let handler = Arc::new(move |mut stream: TcpStream| loop {
        let body = match read_frame(&mut stream, MAX_SHARE_FRAME) {
            Ok(Some(b)) => b,
            Ok(None) => return,
            Err(e) => {
                log::debug!("share connection closed: {e}");
                return;
            }
        };
        let reply = service.handle(&body);
        if write_frame(&mut stream, &reply).is_err() {
            return;
        }
    });
    let inner = TcpServer::spawn(bind, handler).map_err(StoreError::Io)?;
    Ok(ShareServer { inner })
}

/// One request/response exchange of bodies over some connection.
pub trait ShareTransport {
    fn exchange(&mut self, body: &[u8]) -> Result<Vec<u8>, ShareError>;
}

pub struct TcpShareTransport {
    stream: TcpStream,
}

impl TcpShareTransport {
    pub fn connect(endpoint: &str, timeout: Duration) -> Result<Self, ShareError> {
        let addr = endpoint
            .to_socket_addrs()
            .map_err(|e| ShareError::Io(format!("{endpoint}: {e}")))?
            .next()
            .ok_or_else(|| ShareError::Io(format!("{endpoint}: no address")))?;
        let stream =
            TcpStream::connect_timeout(&addr, timeout).map_err(|e| ShareError::from_io(&e))?;
        stream
            .set_read_timeout(Some(timeout))
            .and_then(|_| stream.set_write_timeout(Some(timeout)))
            .map_err(|e| ShareError::from_io(&e))?;
        let _ = stream.set_nodelay(true);
        Ok(Self { stream })
    }
}

impl ShareTransport for TcpShareTransport {
    fn exchange(&mut self, body: &[u8]) -> Result<Vec<u8>, ShareError> {
        write_frame(&mut self.stream, body).map_err(|e| ShareError::from_io(&e))?;
        match read_frame(&mut self.stream, MAX_SHARE_FRAME) {
            Ok(Some(b)) => Ok(b),
            Ok(None) => Err(ShareError::Io("connection closed by server".into())),
            Err(crate::control::codec::CodecError::Io(e)) => Err(ShareError::from_io(&e)),
            Err(e) => Err(ShareError::Protocol(e.to_string())),
        }
    }
}

/// A fetched record together with the exact bytes that were transferred.
#[derive(Debug, Clone, PartialEq)]
pub struct FetchedRecord {
    pub record: MeasurementRecord,
    pub raw: Vec<u8>,
    pub checksum: String,
}

#[derive(Debug)]
enum FetchState {
    Stat,
    Reading {
        size: u64,
        checksum: String,
        buf: Vec<u8>,
    },
    Done(FetchedRecord),
}

/// STAT, then READ in chunks, then verify: the client half of a fetch, without I/O.
#[derive(Debug)]
pub struct FetchOp {
    path: String,
    chunk: u32,
    state: FetchState,
}

impl FetchOp {
    pub fn new(path: impl Into<String>, chunk: u32) -> Self {
        Self {
            path: path.into(),
            chunk: chunk.clamp(1, MAX_READ),
            state: FetchState::Stat,
        }
    }

    pub fn first_request(&self) -> ShareRequest {
        ShareRequest::Stat {
            path: self.path.clone(),
        }
    }

    fn next_read(&self, have: u64, size: u64) -> ShareRequest {
        ShareRequest::Read {
            path: self.path.clone(),
            offset: have,
            length: (size - have).min(self.chunk as u64) as u32,
        }
    }

    /// Feeds a response; returns the next request, or `None` once the record is complete.
    pub fn on_response(&mut self, resp: ShareResponse) -> Result<Option<ShareRequest>, ShareError> {
        let resp = resp.into_error()?;
        let state = std::mem::replace(&mut self.state, FetchState::Stat);
        match (state, resp) {
            (FetchState::Stat, ShareResponse::Stat { size, checksum }) => {
                self.state = FetchState::Reading {
                    size,
                    checksum,
                    buf: Vec::with_capacity(size.min(64 << 20) as usize),
                };
                self.advance()
            }
            (
                FetchState::Reading {
                    size,
                    checksum,
                    mut buf,
                },
                ShareResponse::Data(data),
            ) => {
                buf.extend_from_slice(&data);
                if buf.len() as u64 > size {
                    return Err(ShareError::Protocol(
                        "server sent more bytes than the file holds".into(),
                    ));
                }
                self.state = FetchState::Reading {
                    size,
                    checksum,
                    buf,
                };
                self.advance()
            }
            (_, other) => Err(ShareError::Protocol(format!(
                "unexpected response {other:?}"
            ))),
        }
    }

    fn advance(&mut self) -> Result<Option<ShareRequest>, ShareError> {
        let FetchState::Reading { size, buf, .. } = &self.state else {
            return Ok(None);
        };
        if (buf.len() as u64) < *size {
            return Ok(Some(self.next_read(buf.len() as u64, *size)));
        }
        let FetchState::Reading { checksum, buf, .. } =
            std::mem::replace(&mut self.state, FetchState::Stat)
        else {
            unreachable!()
        };
        let actual = sha256_hex(&buf);
        if actual != checksum {
            return Err(ShareError::CorruptRecord(format!(
                "{}: checksum {actual} does not match listed {checksum}",
                self.path
            )));
        }
        let record = MeasurementRecord::decode(&self.path, &buf)
            .map_err(|e| ShareError::CorruptRecord(format!("{}: {e}", self.path)))?;
        self.state = FetchState::Done(FetchedRecord {
            record,
            raw: buf,
            checksum,
        });
        Ok(None)
    }

    pub fn finish(self) -> Result<FetchedRecord, ShareError> {
        match self.state {
            FetchState::Done(r) => Ok(r),
            _ => Err(ShareError::Protocol("fetch not complete".into())),
        }
    }
}

static NEXT_SESSION: AtomicU64 = AtomicU64::new(1);

/// A mounted remote store.
pub struct ShareHandle<T: ShareTransport> {
    endpoint: String,
    export: String,
    session_id: u64,
    transport: Option<T>,
}

impl<T: ShareTransport> ShareHandle<T> {
    pub fn with_transport(
        endpoint: impl Into<String>,
        export: impl Into<String>,
        transport: T,
    ) -> Self {
        Self {
            endpoint: endpoint.into(),
            export: export.into(),
            session_id: NEXT_SESSION.fetch_add(1, Ordering::Relaxed),
            transport: Some(transport),
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn export(&self) -> &str {
        &self.export
    }

    pub fn session_id(&self) -> u64 {
        self.session_id
    }

    pub fn is_open(&self) -> bool {
        self.transport.is_some()
    }

    pub fn close(&mut self) {
        self.transport = None;
    }

    fn call(&mut self, req: &ShareRequest) -> Result<ShareResponse, ShareError> {
        let t = self.transport.as_mut().ok_or(ShareError::StaleHandle)?;
        let body = t.exchange(&req.encode())?;
        ShareResponse::decode(&body, req.opcode())
    }

    pub fn list_measurements(&mut self) -> Result<Vec<IndexEntry>, ShareError> {
        match self.call(&ShareRequest::List)?.into_error()? {
            ShareResponse::Listing(entries) => Ok(entries),
            other => Err(ShareError::Protocol(format!(
                "unexpected response {other:?}"
            ))),
        }
    }

    pub fn stat(&mut self, path: &str) -> Result<(u64, String), ShareError> {
        match self
            .call(&ShareRequest::Stat { path: path.into() })?
            .into_error()?
        {
            ShareResponse::Stat { size, checksum } => Ok((size, checksum)),
            other => Err(ShareError::Protocol(format!(
                "unexpected response {other:?}"
            ))),
        }
    }

    pub fn read(&mut self, path: &str, offset: u64, length: u32) -> Result<Vec<u8>, ShareError> {
        let req = ShareRequest::Read {
            path: path.into(),
            offset,
            length,
        };
        match self.call(&req)?.into_error()? {
            ShareResponse::Data(d) => Ok(d),
            other => Err(ShareError::Protocol(format!(
                "unexpected response {other:?}"
            ))),
        }
    }

    pub fn fetch_measurement(&mut self, path: &str) -> Result<FetchedRecord, ShareError> {
        self.fetch_with_chunk(path, DEFAULT_CHUNK)
    }

    pub fn fetch_with_chunk(
        &mut self,
        path: &str,
        chunk: u32,
    ) -> Result<FetchedRecord, ShareError> {
        let mut op = FetchOp::new(path, chunk);
        let mut next = Some(op.first_request());
        while let Some(req) = next {
            let resp = self.call(&req)?;
            next = op.on_response(resp)?;
        }
        op.finish()
    }
}

/// Mounts the share served at `endpoint` (`host:port`) over TCP.
pub fn mount_share(
    endpoint: &str,
    timeout: Duration,
) -> Result<ShareHandle<TcpShareTransport>, ShareError> {
    let t = TcpShareTransport::connect(endpoint, timeout)?;
    Ok(ShareHandle::with_transport(endpoint, "NION100", t))
}
