//! The `STEMFRM1` measurement file.
//!
//! All integers little-endian:
//!
//! | offset | size | field                                   |
//! |-------:|-----:|-----------------------------------------|
//! | 0      | 8    | magic `STEMFRM1`                        |
//! | 8      | 2    | format version (1)                      |
//! | 10     | 1    | element type (1 = 32-bit float, LE)     |
//! | 11     | 1    | reserved, 0                             |
//! | 12     | 4    | channel                                 |
//! | 16     | 8    | frame index                             |
//! | 24     | 4    | width                                   |
//! | 28     | 4    | height                                  |
//! | 32     | 4    | metadata length `m`                     |
//! | 36     | m    | metadata, UTF-8 JSON                    |
//! | 36+m   | 4·w·h| pixels, row-major                       |

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instrument::{Frame, ProbeCoordinates, ScanParameters};
use crate::time::SimTime;

pub const MAGIC: &[u8; 8] = b"STEMFRM1";
pub const FORMAT_VERSION: u16 = 1;
pub const ELEMENT_F32_LE: u8 = 1;
pub const FIXED_HEADER_LEN: usize = 36;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("unsupported element type {0}")]
    UnsupportedElementType(u8),
    #[error("record truncated")]
    Truncated,
    #[error("payload is {actual} bytes but the header describes {expected}")]
    LengthMismatch { expected: u64, actual: u64 },
    #[error("bad metadata: {0}")]
    BadMetadata(String),
}

/// Acquisition context stored alongside the pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetadata {
    pub session: String,
    pub probe: Option<ProbeCoordinates>,
    /// Nanoseconds on the acquiring instrument's clock.
    pub acquired_at_ns: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan: Option<ScanParameters>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecordHeader {
    pub version: u16,
    pub element_type: u8,
    pub channel: u32,
    pub frame_index: u64,
    pub width: u32,
    pub height: u32,
}

impl RecordHeader {
    pub fn payload_len(&self) -> u64 {
        self.width as u64 * self.height as u64 * 4
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementRecord {
    pub path: String,
    pub header: RecordHeader,
    pub metadata: FrameMetadata,
    pub payload: Vec<u8>,
}

impl MeasurementRecord {
    pub fn from_frame(path: impl Into<String>, frame: &Frame, metadata: FrameMetadata) -> Self {
        let payload = frame.pixels.iter().flat_map(|p| p.to_le_bytes()).collect();
        Self {
            path: path.into(),
            header: RecordHeader {
                version: FORMAT_VERSION,
                element_type: ELEMENT_F32_LE,
                channel: frame.channel,
                frame_index: frame.frame_index,
                width: frame.width,
                height: frame.height,
            },
            metadata,
            payload,
        }
    }

    pub fn pixels(&self) -> Vec<f32> {
        self.payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect()
    }

    pub fn to_frame(&self) -> Frame {
        Frame {
            channel: self.header.channel,
            frame_index: self.header.frame_index,
            width: self.header.width,
            height: self.header.height,
            pixels: self.pixels(),
            acquired_at: SimTime::from_nanos(self.metadata.acquired_at_ns),
            probe_at_acquisition: self.metadata.probe,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.metadata).expect("metadata always serializes");
        let h = &self.header;
        let mut out = Vec::with_capacity(FIXED_HEADER_LEN + meta.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&h.version.to_le_bytes());
        out.push(h.element_type);
        out.push(0);
        out.extend_from_slice(&h.channel.to_le_bytes());
        out.extend_from_slice(&h.frame_index.to_le_bytes());
        out.extend_from_slice(&h.width.to_le_bytes());
        out.extend_from_slice(&h.height.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(path: impl Into<String>, bytes: &[u8]) -> Result<Self, FormatError> {
        if bytes.len() < FIXED_HEADER_LEN {
            return Err(if bytes.len() >= 8 && &bytes[..8] != MAGIC {
                FormatError::BadMagic
            } else {
                FormatError::Truncated
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(FormatError::BadMagic);
        }
        let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap());
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u16_at(8);
        if version != FORMAT_VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let element_type = bytes[10];
        if element_type != ELEMENT_F32_LE {
            return Err(FormatError::UnsupportedElementType(element_type));
        }
        let header = RecordHeader {
            version,
            element_type,
            channel: u32_at(12),
            frame_index: u64_at(16),
            width: u32_at(24),
            height: u32_at(28),
        };
        let meta_len = u32_at(32) as usize;
        let meta_end = FIXED_HEADER_LEN
            .checked_add(meta_len)
            .filter(|&e| e <= bytes.len())
            .ok_or(FormatError::Truncated)?;
        let metadata: FrameMetadata = serde_json::from_slice(&bytes[FIXED_HEADER_LEN..meta_end])
            .map_err(|e| FormatError::BadMetadata(e.to_string()))?;
        let payload = &bytes[meta_end..];
        if payload.len() as u64 != header.payload_len() {
            return Err(FormatError::LengthMismatch {
                expected: header.payload_len(),
                actual: payload.len() as u64,
            });
        }
        Ok(Self {
            path: path.into(),
            header,
            metadata,
            payload: payload.to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(w: u32, h: u32) -> Frame {
        Frame {
            channel: 1,
            frame_index: 9,
            width: w,
            height: h,
            pixels: (0..w * h).map(|i| i as f32 * 0.5).collect(),
            acquired_at: SimTime::from_nanos(123),
            probe_at_acquisition: Some(ProbeCoordinates { x: 0.2, y: 0.8 }),
        }
    }

    fn meta() -> FrameMetadata {
        FrameMetadata {
            session: "s000001".into(),
            probe: Some(ProbeCoordinates { x: 0.2, y: 0.8 }),
            acquired_at_ns: 123,
            scan: None,
        }
    }

    #[test]
    fn fixed_header_layout() {
        let bytes = MeasurementRecord::from_frame("a", &frame(3, 2), meta()).encode();
        assert_eq!(&bytes[..8], b"STEMFRM1");
        assert_eq!(&bytes[8..12], &[1, 0, 1, 0]);
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(&bytes[16..24], &9u64.to_le_bytes());
        assert_eq!(&bytes[24..28], &3u32.to_le_bytes());
        assert_eq!(&bytes[28..32], &2u32.to_le_bytes());
        let m = u32::from_le_bytes(bytes[32..36].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 36 + m + 24);
        assert_eq!(&bytes[36 + m + 4..36 + m + 8], &0.5f32.to_le_bytes());
    }

    #[test]
    fn roundtrip_to_frame() {
        let f = frame(5, 4);
        let rec = MeasurementRecord::from_frame("a", &f, meta());
        let back = MeasurementRecord::decode("a", &rec.encode()).unwrap();
        assert_eq!(back, rec);
        assert_eq!(back.to_frame(), f);
    }

    #[test]
    fn large_frame_payload_size() {
        let rec = MeasurementRecord::from_frame("a", &frame(512, 512), meta());
        assert_eq!(rec.payload.len(), 1_048_576);
    }

    #[test]
    fn rejects_corruption() {
        let good = MeasurementRecord::from_frame("a", &frame(2, 2), meta()).encode();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(
            MeasurementRecord::decode("a", &bad),
            Err(FormatError::BadMagic)
        );
        let mut bad = good.clone();
        bad[8] = 2;
        assert_eq!(
            MeasurementRecord::decode("a", &bad),
            Err(FormatError::UnsupportedVersion(2))
        );
        let mut bad = good.clone();
        bad[10] = 7;
        assert_eq!(
            MeasurementRecord::decode("a", &bad),
            Err(FormatError::UnsupportedElementType(7))
        );
        assert!(matches!(
            MeasurementRecord::decode("a", &good[..good.len() - 1]),
            Err(FormatError::LengthMismatch {
                expected: 16,
                actual: 15
            })
        ));
        assert_eq!(
            MeasurementRecord::decode("a", &good[..20]),
            Err(FormatError::Truncated)
        );
        let mut bad = good.clone();
        bad[32..36].copy_from_slice(&u32::MAX.to_le_bytes());
        assert_eq!(
            MeasurementRecord::decode("a", &bad),
            Err(FormatError::Truncated)
        );
    }
}
