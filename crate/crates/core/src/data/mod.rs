//! Measurement persistence and the read-only share that exposes it.

pub mod format;
pub mod share;
pub mod store;

pub use format::{FormatError, FrameMetadata, MeasurementRecord};
pub use share::{
    export_share, mount_share, ShareError, ShareHandle, ShareServer, ShareService,
    DEFAULT_SHARE_PORT,
};
pub use store::{IndexEntry, MeasurementStore, SessionMetadata, StoreError};
