//! Server configuration: JSON file, environment overrides, validation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nv::NvEnvironment;
use crate::proto::DEFAULT_PORT;

pub const PORT_ENV: &str = "SPINDAQ_PORT";
pub const SEED_ENV: &str = "SPINDAQ_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bad config JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("environment variable {0} is not a valid number")]
    EnvVar(&'static str),
    #[error("{0}")]
    Invalid(String),
}

/// Which line set the optical channels see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OdmrTarget {
    /// Diamond ensemble: 8 field-split coarse dips with hyperfine structure.
    Ensemble,
    /// One isolated line far from the zero-field cluster.
    SingleNv,
}

/// What the emulated microwave generator does across a run. List programs
/// hold their entry for all repeats of a sequence point (list-mode dwell).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum MwProgram {
    /// Microwaves off; fluorescence sits at the baseline.
    Idle,
    /// Linear frequency list, one entry per sequence point.
    CwSweep { start_mhz: f64, stop_mhz: f64, points: u32, target: OdmrTarget },
    /// One MW pulse length per sequence point; readout level follows the
    /// damped Rabi oscillation.
    Rabi { durations_ns: Vec<f64> },
    /// Fixed carrier frequency-modulated by the on-board DDS output, read
    /// against the single-NV line.
    FixedFm { carrier_mhz: f64, deviation_mhz: f64 },
}

impl MwProgram {
    /// Frequency list for sweep programs, MHz per sequence point.
    pub fn frequency_list(&self) -> Option<Vec<f64>> {
        match self {
            MwProgram::CwSweep { start_mhz, stop_mhz, points, .. } => {
                let n = *points as usize;
                let step = (stop_mhz - start_mhz) / (n - 1).max(1) as f64;
                Some((0..n).map(|i| start_mhz + step * i as f64).collect())
            }
            _ => None,
        }
    }
}

/// The full physics program: sample environment, MW schedule, and the
/// emulated external trigger input. This is also the SET_ENV payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub env: NvEnvironment,
    pub program: MwProgram,
    /// Period of the emulated external trigger generator feeding the DI
    /// trigger input; 0 means nothing is plugged in.
    pub external_trigger_period_ns: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            env: NvEnvironment::default(),
            program: MwProgram::Idle,
            external_trigger_period_ns: 0,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.env.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        match &self.program {
            MwProgram::Idle => {}
            MwProgram::CwSweep { start_mhz, stop_mhz, points, .. } => {
                if *points < 2 {
                    return Err(ConfigError::Invalid(format!(
                        "sweep needs at least 2 points, got {points}"
                    )));
                }
                if !(start_mhz.is_finite() && stop_mhz.is_finite()) || stop_mhz <= start_mhz {
                    return Err(ConfigError::Invalid(format!(
                        "sweep range {start_mhz}..{stop_mhz} MHz is not ascending"
                    )));
                }
            }
            MwProgram::Rabi { durations_ns } => {
                if durations_ns.is_empty() {
                    return Err(ConfigError::Invalid("empty duration list".into()));
                }
                if durations_ns.iter().any(|d| !d.is_finite() || *d < 0.0) {
                    return Err(ConfigError::Invalid("durations must be finite and >= 0".into()));
                }
            }
            MwProgram::FixedFm { carrier_mhz, deviation_mhz } => {
                if !carrier_mhz.is_finite() || !deviation_mhz.is_finite() || *deviation_mhz < 0.0 {
                    return Err(ConfigError::Invalid(format!(
                        "bad FM program: carrier {carrier_mhz} MHz, deviation {deviation_mhz} MHz"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Stop-and-wait retry knobs, shared by the server batch streamer and the
/// client. The defaults suit a LAN; tests shrink them to tolerate heavy
/// injected loss without blowing their time budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReliabilityConfig {
    pub ack_timeout_ms: u64,
    pub max_attempts: u32,
}

impl Default for ReliabilityConfig {
    fn default() -> Self {
        ReliabilityConfig { ack_timeout_ms: 200, max_attempts: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub port: u16,
    pub seed: u64,
    pub scenario: Scenario,
    pub reliability: ReliabilityConfig,
    /// Sequence-mode packet store depth; a run larger than this is rejected
    /// at ARM.
    pub store_capacity: usize,
    /// A new client address takes over the session after this much
    /// control-plane silence from the current one.
    pub session_idle_timeout_ms: u64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            port: DEFAULT_PORT,
            seed: 0xDA51,
            scenario: Scenario::default(),
            reliability: ReliabilityConfig::default(),
            store_capacity: 1 << 20,
            session_idle_timeout_ms: 2000,
        }
    }
}

impl ServerConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let cfg: ServerConfig = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    /// SPINDAQ_PORT and SPINDAQ_SEED beat the file.
    pub fn apply_env_overrides(&mut self) -> Result<(), ConfigError> {
        if let Ok(v) = std::env::var(PORT_ENV) {
            self.port = v.trim().parse().map_err(|_| ConfigError::EnvVar(PORT_ENV))?;
        }
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| ConfigError::EnvVar(SEED_ENV))?;
        }
        Ok(())
    }

    /// File (or defaults), then environment, then validation.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => Self::from_file(p)?,
            None => ServerConfig::default(),
        };
        cfg.apply_env_overrides()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.scenario.validate()?;
        if self.reliability.ack_timeout_ms == 0 || self.reliability.max_attempts == 0 {
            return Err(ConfigError::Invalid("reliability knobs must be nonzero".into()));
        }
        if self.store_capacity == 0 {
            return Err(ConfigError::Invalid("store_capacity must be nonzero".into()));
        }
        Ok(())
    }
}
