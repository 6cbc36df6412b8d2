//! The virtual STEM: scan status, channel scanning and probe positioning.
//!
//! All state lives behind one lock (the guardian). A scan is split into
//! [`Instrument::begin_scan`] and [`Instrument::finish_scan`] so the wait in
//! between can be served by whatever clock hosts the instrument: a real sleep
//! on a TCP server, or a timer event in the twin. [`Instrument::scan_channel`]
//! is the blocking composition of the two.

mod config;
mod synth;
mod types;

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::InstrumentConfig;
pub use synth::{noise_stream_seed, synthesize, FrameInputs};
pub use types::{
    calculate_frame_time, scan_duration, Frame, ProbeCoordinates, ScanParameters, SpecimenFeature,
    SpecimenModel,
};

use crate::time::{Clock, SimTime};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InstrumentError {
    #[error("channel {channel} out of range (instrument has {count} channels)")]
    InvalidChannel { channel: i64, count: u32 },
    #[error("{requested} frames requested but the frame buffer holds {capacity}")]
    BufferExceeded { requested: u64, capacity: usize },
    #[error("number of frames must be at least 1")]
    InvalidFrameCount,
    #[error("a scan is already in progress")]
    Busy,
    #[error("probe coordinates (x={x}, y={y}) outside the unit scan field")]
    OutOfRange { x: f64, y: f64 },
    #[error("invalid scan parameters {0:?}")]
    InvalidScanParameters(ScanParameters),
    #[error("no scan with session {0} is in progress")]
    NoSuchScan(u64),
    #[error("configuration: {0}")]
    Config(String),
}

impl InstrumentError {
    /// Stable short name used on the wire.
    pub fn code(&self) -> &'static str {
        match self {
            InstrumentError::InvalidChannel { .. } => "InvalidChannel",
            InstrumentError::BufferExceeded { .. } => "BufferExceeded",
            InstrumentError::InvalidFrameCount => "InvalidFrameCount",
            InstrumentError::Busy => "Busy",
            InstrumentError::OutOfRange { .. } => "OutOfRange",
            InstrumentError::InvalidScanParameters(_) => "InvalidScanParameters",
            InstrumentError::NoSuchScan(_) => "NoSuchScan",
            InstrumentError::Config(_) => "Config",
        }
    }
}

/// What the beam was doing when `probe_position` was called.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeState {
    Scanning,
    Parked,
    Blanked,
}

impl fmt::Display for ProbeState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProbeState::Scanning => "scanning",
            ProbeState::Parked => "parked",
            ProbeState::Blanked => "blanked",
        })
    }
}

/// Result of `probe_position`: the state and position before the move, and the new position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionReport {
    pub probe_state: ProbeState,
    pub previous: Option<ProbeCoordinates>,
    pub new: Option<ProbeCoordinates>,
}

/// Handle for a scan between `begin_scan` and `finish_scan`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanTicket {
    pub session: u64,
    pub channel: u32,
    pub num_frames: u32,
    pub started_at: SimTime,
    /// `frame_time × num_frames + settle`.
    pub duration: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstrumentState {
    pub probe: Option<ProbeCoordinates>,
    pub enabled_channels: BTreeSet<u32>,
    pub scanning: bool,
    pub scan_params: ScanParameters,
    pub frame_buffer: VecDeque<Frame>,
    pub buffer_capacity: usize,
    pub rng_seed: u64,
    pub specimen: SpecimenModel,
    /// Number of scans started so far; the current or last session id.
    pub session: u64,
}

impl InstrumentState {
    fn push_frame(&mut self, frame: Frame) {
        while self.frame_buffer.len() >= self.buffer_capacity {
            self.frame_buffer.pop_front();
        }
        self.frame_buffer.push_back(frame);
    }
}

pub struct Instrument {
    channel_count: u32,
    settle: Duration,
    clock: Arc<dyn Clock>,
    state: Mutex<InstrumentState>,
}

impl fmt::Debug for Instrument {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Instrument")
            .field("channel_count", &self.channel_count)
            .field("settle", &self.settle)
            .finish_non_exhaustive()
    }
}

impl Instrument {
    pub fn new(config: &InstrumentConfig, clock: Arc<dyn Clock>) -> Result<Self, InstrumentError> {
        config.validate()?;
        let state = InstrumentState {
            probe: config.initial_probe()?,
            enabled_channels: BTreeSet::from([0]),
            scanning: false,
            scan_params: config.scan,
            frame_buffer: VecDeque::with_capacity(config.buffer_capacity),
            buffer_capacity: config.buffer_capacity,
            rng_seed: config.rng_seed,
            specimen: config.specimen.clone(),
            session: 0,
        };
        Ok(Self {
            channel_count: config.channel_count,
            settle: config.settle_time(),
            clock,
            state: Mutex::new(state),
        })
    }

    fn lock(&self) -> MutexGuard<'_, InstrumentState> {
        // Mutations are applied only after validation; a poisoned lock still guards consistent state.
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn channel_count(&self) -> u32 {
        self.channel_count
    }

    pub fn settle_time(&self) -> Duration {
        self.settle
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn snapshot(&self) -> InstrumentState {
        self.lock().clone()
    }

    pub fn scan_status(&self) -> bool {
        self.lock().scanning
    }

    pub fn frame_time(&self) -> f64 {
        calculate_frame_time(&self.lock().scan_params)
    }

    pub fn set_scan_parameters(&self, params: ScanParameters) -> Result<(), InstrumentError> {
        params.validate()?;
        let mut st = self.lock();
        if st.scanning {
            return Err(InstrumentError::Busy);
        }
        st.scan_params = params;
        Ok(())
    }

    fn check_channel(&self, ch: i64) -> Result<u32, InstrumentError> {
        if ch < 0 || ch >= self.channel_count as i64 {
            return Err(InstrumentError::InvalidChannel {
                channel: ch,
                count: self.channel_count,
            });
        }
        Ok(ch as u32)
    }

    /// Enables exactly `ch` and starts scanning.
    pub fn begin_scan(&self, ch: i64, num_frames: i64) -> Result<ScanTicket, InstrumentError> {
        let channel = self.check_channel(ch)?;
        if num_frames < 1 {
            return Err(InstrumentError::InvalidFrameCount);
        }
        let mut st = self.lock();
        if num_frames as u64 > st.buffer_capacity as u64 {
            return Err(InstrumentError::BufferExceeded {
                requested: num_frames as u64,
                capacity: st.buffer_capacity,
            });
        }
        if st.scanning {
            return Err(InstrumentError::Busy);
        }
        let num_frames = num_frames as u32;
        st.enabled_channels = BTreeSet::from([channel]);
        st.scanning = true;
        st.session += 1;
        Ok(ScanTicket {
            session: st.session,
            channel,
            num_frames,
            started_at: self.clock.now(),
            duration: scan_duration(&st.scan_params, num_frames, self.settle),
        })
    }

    /// Fills the frame buffer with what the scan produced, stops scanning
    /// and returns the `num_frames` most recent frames, oldest first.
    pub fn finish_scan(&self, ticket: &ScanTicket) -> Result<Vec<Frame>, InstrumentError> {
        let mut st = self.lock();
        if !st.scanning || st.session != ticket.session {
            return Err(InstrumentError::NoSuchScan(ticket.session));
        }
        let params = st.scan_params;
        let frame_ns = params.width as f64 * params.height as f64 * params.dwell_time_us * 1e3;
        let produced = ((ticket.duration.as_nanos() as f64 / frame_ns).floor() as u64)
            .max(ticket.num_frames as u64);
        let kept = produced.min(st.buffer_capacity as u64);
        let probe = st.probe;
        for index in produced - kept..produced {
            let acquired_at = ticket.started_at
                + Duration::from_nanos((frame_ns * (index + 1) as f64).round() as u64);
            let frame = synthesize(FrameInputs {
                specimen: &st.specimen,
                params: &params,
                probe,
                rng_seed: st.rng_seed,
                channel: ticket.channel,
                frame_index: index,
                acquired_at,
            });
            st.push_frame(frame);
        }
        st.scanning = false;
        let n = ticket.num_frames as usize;
        let skip = st.frame_buffer.len() - n;
        Ok(st.frame_buffer.iter().skip(skip).cloned().collect())
    }

    /// Blocking scan: begin, wait `frame_time × num_frames + settle` on the clock, finish.
    pub fn scan_channel(&self, ch: i64, num_frames: i64) -> Result<Vec<Frame>, InstrumentError> {
        let ticket = self.begin_scan(ch, num_frames)?;
        self.clock.sleep(ticket.duration);
        self.finish_scan(&ticket)
    }

    /// Moves the probe; `(0.0, 0.0)` unsets it.
    pub fn probe_position(&self, x: f64, y: f64) -> Result<PositionReport, InstrumentError> {
        let new = if x == 0.0 && y == 0.0 {
            None
        } else {
            Some(ProbeCoordinates::new(x, y)?)
        };
        let mut st = self.lock();
        let probe_state = if st.scanning {
            ProbeState::Scanning
        } else if st.probe.is_some() {
            ProbeState::Parked
        } else {
            ProbeState::Blanked
        };
        let previous = std::mem::replace(&mut st.probe, new);
        log::info!("probe state: {probe_state}");
        log::info!("current position: {previous:?}");
        Ok(PositionReport {
            probe_state,
            previous,
            new,
        })
    }

    /// Frame for `(channel, frame_index)` under the current specimen, parameters and probe.
    pub fn synthesize_frame(
        &self,
        channel: i64,
        frame_index: u64,
    ) -> Result<Frame, InstrumentError> {
        let channel = self.check_channel(channel)?;
        let st = self.lock();
        Ok(synthesize(FrameInputs {
            specimen: &st.specimen,
            params: &st.scan_params,
            probe: st.probe,
            rng_seed: st.rng_seed,
            channel,
            frame_index,
            acquired_at: self.clock.now(),
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::ManualClock;

    fn instrument() -> (Instrument, ManualClock) {
        let clock = ManualClock::new();
        let cfg = InstrumentConfig {
            scan: ScanParameters::new(16, 16, 1.0).unwrap(),
            ..InstrumentConfig::default()
        };
        (
            Instrument::new(&cfg, Arc::new(clock.clone())).unwrap(),
            clock,
        )
    }

    #[test]
    fn fresh_instrument_is_idle() {
        let (inst, _) = instrument();
        assert!(!inst.scan_status());
        assert!(!inst.scan_status());
    }

    #[test]
    fn status_true_only_inside_scan() {
        let (inst, _) = instrument();
        let t = inst.begin_scan(0, 1).unwrap();
        assert!(inst.scan_status());
        inst.finish_scan(&t).unwrap();
        assert!(!inst.scan_status());
    }

    #[test]
    fn scan_channel_waits_frame_time_times_n_plus_settle() {
        let clock = ManualClock::new();
        // 500 × 500 pixels at 1 µs = 0.25 s per frame
        let cfg = InstrumentConfig {
            scan: ScanParameters::new(500, 500, 1.0).unwrap(),
            specimen: SpecimenModel::empty(),
            ..InstrumentConfig::default()
        };
        let inst = Instrument::new(&cfg, Arc::new(clock.clone())).unwrap();
        let frames = inst.scan_channel(0, 3).unwrap();
        assert_eq!(frames.len(), 3);
        assert_eq!(clock.now(), SimTime::from_nanos(1_750_000_000));
        assert!(frames
            .iter()
            .all(|f| f.channel == 0 && f.pixels.len() == 250_000));
        // frames are the most recent ones, oldest first
        let idx: Vec<_> = frames.iter().map(|f| f.frame_index).collect();
        assert_eq!(idx, vec![4, 5, 6]);
    }

    #[test]
    fn scan_channel_errors() {
        let (inst, _) = instrument();
        assert!(matches!(
            inst.scan_channel(99, 1),
            Err(InstrumentError::InvalidChannel { channel: 99, .. })
        ));
        assert!(matches!(
            inst.scan_channel(-1, 1),
            Err(InstrumentError::InvalidChannel { .. })
        ));
        assert_eq!(
            inst.scan_channel(0, 17),
            Err(InstrumentError::BufferExceeded {
                requested: 17,
                capacity: 16
            })
        );
        assert_eq!(
            inst.scan_channel(0, 0),
            Err(InstrumentError::InvalidFrameCount)
        );
        assert!(!inst.scan_status());
    }

    #[test]
    fn second_scan_is_busy() {
        let (inst, _) = instrument();
        let t = inst.begin_scan(1, 2).unwrap();
        assert_eq!(inst.begin_scan(0, 1), Err(InstrumentError::Busy));
        let frames = inst.finish_scan(&t).unwrap();
        assert!(frames.iter().all(|f| f.channel == 1));
        assert_eq!(inst.snapshot().enabled_channels, BTreeSet::from([1]));
        assert!(inst.finish_scan(&t).is_err());
    }

    #[test]
    fn buffer_is_bounded_oldest_first() {
        let (inst, _) = instrument();
        for _ in 0..3 {
            inst.scan_channel(0, 16).unwrap();
        }
        let st = inst.snapshot();
        assert_eq!(st.frame_buffer.len(), 16);
        assert_eq!(st.session, 3);
    }

    #[test]
    fn probe_move_reports_previous_and_new() {
        let (inst, _) = instrument();
        let r = inst.probe_position(0.2, 0.8).unwrap();
        assert_eq!(r.probe_state, ProbeState::Parked);
        assert_eq!(r.previous, Some(ProbeCoordinates { x: 0.5, y: 0.5 }));
        assert_eq!(r.new, Some(ProbeCoordinates { x: 0.2, y: 0.8 }));
        assert_eq!(
            inst.snapshot().probe,
            Some(ProbeCoordinates { x: 0.2, y: 0.8 })
        );
    }

    #[test]
    fn zero_zero_unsets_probe() {
        let (inst, _) = instrument();
        let r = inst.probe_position(0.0, 0.0).unwrap();
        assert_eq!(r.new, None);
        assert_eq!(inst.snapshot().probe, None);
        let r = inst.probe_position(0.3, 0.7).unwrap();
        assert_eq!(r.probe_state, ProbeState::Blanked);
        assert_eq!(r.previous, None);
    }

    #[test]
    fn out_of_range_leaves_state_alone() {
        let (inst, _) = instrument();
        assert!(matches!(
            inst.probe_position(1.5, 0.5),
            Err(InstrumentError::OutOfRange { .. })
        ));
        assert!(inst.probe_position(0.0, -0.2).is_err());
        assert!(inst.probe_position(f64::NAN, 0.2).is_err());
        assert_eq!(
            inst.snapshot().probe,
            Some(ProbeCoordinates { x: 0.5, y: 0.5 })
        );
    }

    #[test]
    fn probe_move_is_idempotent() {
        let (inst, _) = instrument();
        inst.probe_position(0.3, 0.7).unwrap();
        let once = inst.snapshot();
        inst.probe_position(0.3, 0.7).unwrap();
        assert_eq!(inst.snapshot(), once);
    }

    #[test]
    fn probe_during_scan_reports_scanning() {
        let (inst, _) = instrument();
        let t = inst.begin_scan(0, 1).unwrap();
        assert_eq!(
            inst.probe_position(0.1, 0.1).unwrap().probe_state,
            ProbeState::Scanning
        );
        let frames = inst.finish_scan(&t).unwrap();
        assert_eq!(
            frames[0].probe_at_acquisition,
            Some(ProbeCoordinates { x: 0.1, y: 0.1 })
        );
    }
}
