use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::types::{ProbeCoordinates, ScanParameters, SpecimenModel};
use super::InstrumentError;

/// Instrument configuration file contents.
///
/// ```toml
/// channel_count = 2
/// settle_time_s = 1.0
/// buffer_capacity = 16
/// rng_seed = 42
/// initial_probe = [0.5, 0.5]
///
/// [scan]
/// width = 128
/// height = 128
/// dwell_time_us = 16.0
///
/// [specimen]
/// noise_sigma = 0.02
/// features = [{ x = 0.25, y = 0.25, amplitude = 1.0, width = 0.06 }]
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstrumentConfig {
    pub channel_count: u32,
    pub scan: ScanParameters,
    /// The constant added to every scan wait, in seconds.
    pub settle_time_s: f64,
    pub buffer_capacity: usize,
    pub rng_seed: u64,
    /// `None` starts with no focused probe.
    pub initial_probe: Option<[f64; 2]>,
    pub specimen: SpecimenModel,
}

impl Default for InstrumentConfig {
    fn default() -> Self {
        Self {
            channel_count: 2,
            scan: ScanParameters::default(),
            settle_time_s: 1.0,
            buffer_capacity: 16,
            rng_seed: 42,
            initial_probe: Some([0.5, 0.5]),
            specimen: SpecimenModel::reference(),
        }
    }
}

impl InstrumentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, InstrumentError> {
        let cfg: Self = toml::from_str(text).map_err(|e| InstrumentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, InstrumentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| InstrumentError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn settle_time(&self) -> Duration {
        Duration::from_secs_f64(self.settle_time_s)
    }

    pub fn initial_probe(&self) -> Result<Option<ProbeCoordinates>, InstrumentError> {
        self.initial_probe
            .map(|[x, y]| ProbeCoordinates::new(x, y))
            .transpose()
    }

    pub fn validate(&self) -> Result<(), InstrumentError> {
        let bad = |m: &str| Err(InstrumentError::Config(m.to_string()));
        if self.channel_count == 0 {
            return bad("channel_count must be at least 1");
        }
        if self.buffer_capacity == 0 {
            return bad("buffer_capacity must be at least 1");
        }
        if !self.settle_time_s.is_finite() || self.settle_time_s < 0.0 {
            return bad("settle_time_s must be a finite non-negative number");
        }
        if !self.specimen.noise_sigma.is_finite() || self.specimen.noise_sigma < 0.0 {
            return bad("specimen.noise_sigma must be finite and non-negative");
        }
        if self.specimen.features.iter().any(|f| {
            f.width.is_nan() || f.width <= 0.0 || !f.amplitude.is_finite() || f.amplitude < 0.0
        }) {
            return bad("specimen features need positive width and non-negative amplitude");
        }
        self.scan.validate()?;
        self.initial_probe()?;
        Ok(())
    }
}
