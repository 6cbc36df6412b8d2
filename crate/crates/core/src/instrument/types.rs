use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::InstrumentError;
use crate::time::SimTime;

/// Fractional position of the probe on the unit scan field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeCoordinates {
    pub x: f64,
    pub y: f64,
}

impl ProbeCoordinates {
    pub fn new(x: f64, y: f64) -> Result<Self, InstrumentError> {
        let ok = |v: f64| v.is_finite() && (0.0..=1.0).contains(&v);
        if ok(x) && ok(y) {
            Ok(Self { x, y })
        } else {
            Err(InstrumentError::OutOfRange { x, y })
        }
    }
}

impl fmt::Display for ProbeCoordinates {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(x={}, y={})", self.x, self.y)
    }
}

/// Raster geometry and per-pixel dwell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanParameters {
    pub width: u32,
    pub height: u32,
    /// Microseconds per pixel.
    pub dwell_time_us: f64,
}

impl ScanParameters {
    pub fn new(width: u32, height: u32, dwell_time_us: f64) -> Result<Self, InstrumentError> {
        let params = Self {
            width,
            height,
            dwell_time_us,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), InstrumentError> {
        if self.width == 0
            || self.height == 0
            || !self.dwell_time_us.is_finite()
            || self.dwell_time_us <= 0.0
        {
            return Err(InstrumentError::InvalidScanParameters(*self));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

impl Default for ScanParameters {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            dwell_time_us: 16.0,
        }
    }
}

/// Time to acquire one frame, in seconds: `width × height × dwell`.
pub fn calculate_frame_time(params: &ScanParameters) -> f64 {
    params.width as f64 * params.height as f64 * params.dwell_time_us * 1e-6
}

/// Scan wait used by `scan_channel`: `frame_time × num_frames + settle`.
///
/// Computed in nanoseconds so that dwell times that are whole nanoseconds
/// produce an exact integer duration.
pub fn scan_duration(params: &ScanParameters, num_frames: u32, settle: Duration) -> Duration {
    let frame_ns = params.width as f64 * params.height as f64 * params.dwell_time_us * 1e3;
    let total = frame_ns * num_frames as f64 + settle.as_nanos() as f64;
    Duration::from_nanos(total.round() as u64)
}

/// One Gaussian blob on the unit field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecimenFeature {
    pub x: f64,
    pub y: f64,
    pub amplitude: f64,
    pub width: f64,
}

/// Synthetic sample: a sum of Gaussian features plus additive noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecimenModel {
    #[serde(default)]
    pub features: Vec<SpecimenFeature>,
    #[serde(default)]
    pub noise_sigma: f64,
}

impl SpecimenModel {
    pub fn empty() -> Self {
        Self {
            features: Vec::new(),
            noise_sigma: 0.0,
        }
    }

    /// The bundled reference specimen used by the default configuration and the golden frame.
    pub fn reference() -> Self {
        let f = |x, y, amplitude, width| SpecimenFeature {
            x,
            y,
            amplitude,
            width,
        };
        Self {
            features: vec![
                f(0.25, 0.25, 1.0, 0.06),
                f(0.70, 0.30, 0.6, 0.10),
                f(0.40, 0.75, 0.8, 0.04),
                f(0.80, 0.80, 1.2, 0.08),
                f(0.50, 0.50, 0.3, 0.25),
            ],
            noise_sigma: 0.02,
        }
    }
}

impl Default for SpecimenModel {
    fn default() -> Self {
        Self::reference()
    }
}

/// One scanned image from one detector channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub channel: u32,
    pub frame_index: u64,
    pub width: u32,
    pub height: u32,
    /// Row-major intensities, `width × height` of them.
    pub pixels: Vec<f32>,
    pub acquired_at: SimTime,
    pub probe_at_acquisition: Option<ProbeCoordinates>,
}

impl Frame {
    /// Checks the shape and value invariants.
    pub fn is_well_formed(&self) -> bool {
        self.pixels.len() == self.width as usize * self.height as usize
            && self.pixels.iter().all(|p| p.is_finite() && *p >= 0.0)
    }
}
