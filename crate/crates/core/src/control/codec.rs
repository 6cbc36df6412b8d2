//! Control-channel framing: a 4-byte big-endian length, then a UTF-8 JSON body.

use std::io::{self, Read, Write};

use thiserror::Error;

use super::message::ControlMessage;

/// Default cap on a message body: 16 MiB.
pub const DEFAULT_MAX_BODY: usize = 16 * 1024 * 1024;
pub const LENGTH_PREFIX: usize = 4;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("frame body of {size} bytes exceeds the {cap}-byte cap")]
    FrameTooLarge { size: usize, cap: usize },
    #[error("cannot decode control message: {0}")]
    Decode(String),
    #[error("frame truncated: expected {expected} body bytes, have {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn encode_body(msg: &ControlMessage, cap: usize) -> Result<Vec<u8>, CodecError> {
    let body = serde_json::to_vec(msg).map_err(|e| CodecError::Decode(e.to_string()))?;
    if body.len() > cap {
        return Err(CodecError::FrameTooLarge {
            size: body.len(),
            cap,
        });
    }
    Ok(body)
}

pub fn decode_body(body: &[u8]) -> Result<ControlMessage, CodecError> {
    let text = std::str::from_utf8(body).map_err(|e| CodecError::Decode(e.to_string()))?;
    serde_json::from_str(text).map_err(|e| CodecError::Decode(e.to_string()))
}

/// Length prefix plus body.
pub fn encode_message(msg: &ControlMessage, cap: usize) -> Result<Vec<u8>, CodecError> {
    let body = encode_body(msg, cap)?;
    let mut out = Vec::with_capacity(LENGTH_PREFIX + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

/// Decodes exactly one complete frame.
pub fn decode_message(frame: &[u8], cap: usize) -> Result<ControlMessage, CodecError> {
    if frame.len() < LENGTH_PREFIX {
        return Err(CodecError::Truncated {
            expected: LENGTH_PREFIX,
            actual: frame.len(),
        });
    }
    let len = u32::from_be_bytes(frame[..4].try_into().expect("4 bytes")) as usize;
    if len > cap {
        return Err(CodecError::FrameTooLarge { size: len, cap });
    }
    let body = &frame[LENGTH_PREFIX..];
    if body.len() != len {
        return Err(CodecError::Truncated {
            expected: len,
            actual: body.len(),
        });
    }
    decode_body(body)
}

/// Reads one length-prefixed body. Oversized frames are rejected before allocation.
/// Returns `Ok(None)` on a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R, cap: usize) -> Result<Option<Vec<u8>>, CodecError> {
    let mut len = [0u8; LENGTH_PREFIX];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > cap {
        return Err(CodecError::FrameTooLarge { size: len, cap });
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

pub fn write_frame<W: Write>(w: &mut W, body: &[u8]) -> io::Result<()> {
    w.write_all(&(body.len() as u32).to_be_bytes())?;
    w.write_all(body)?;
    w.flush()
}
