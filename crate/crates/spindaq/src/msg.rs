//! Mixed-signal generator: DDS tone synthesis and PWM pulse trains.
//!
//! Both run on the 125 MHz DAC tick (8 ns). DDS phase lives in a 32-bit
//! accumulator: each tick adds the frequency tuning word, so the output
//! frequency is `word * 125 MHz / 2^32` and the resolution is about 29 mHz.
//! That is too coarse for sub-hertz modulation tones, so words below
//! [`SLOW_TONE_WORD_THRESHOLD`] switch to an auxiliary 64-bit accumulator.
//!
//! The analog chain behaves like a single-pole low-pass with its -3 dB point
//! at 49.57 MHz; amplitude is scaled by that gain before output.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// DAC/ADC sample rate.
pub const SAMPLE_RATE_HZ: f64 = 125e6;
/// One synthesis tick.
pub const TICK_NS: u64 = 8;
/// Nyquist limit of the DDS.
pub const NYQUIST_HZ: f64 = 62.5e6;
/// -3 dB frequency of the output chain.
pub const F_3DB_HZ: f64 = 49.57e6;
/// Words below this use the 64-bit slow-tone accumulator.
pub const SLOW_TONE_WORD_THRESHOLD: u32 = 1000;
/// Output load for power computations.
pub const LOAD_OHMS: f64 = 50.0;
/// Full output swing is 2 Vpp into the +/-1 V range.
pub const MAX_AMPLITUDE_VPP: f64 = 2.0;

#[derive(Debug, Error, PartialEq)]
pub enum MsgError {
    #[error("frequency {0} Hz outside 0..=62.5 MHz")]
    FrequencyOutOfRange(f64),
    #[error("frequency word {0} is at or above Nyquist")]
    WordAtNyquist(u32),
    #[error("amplitude {0} Vpp outside 0..=2 Vpp")]
    AmplitudeOutOfRange(f64),
    #[error("PWM period must be at least 2 ticks, got {0}")]
    PeriodTooShort(u64),
    #[error("duty cycle {0} outside 0..=1")]
    DutyOutOfRange(f64),
}

/// Tuning word for a target frequency: `round(f * 2^32 / 125 MHz)`.
pub fn compute_ftw(frequency_hz: f64) -> Result<u32, MsgError> {
    if !(0.0..=NYQUIST_HZ).contains(&frequency_hz) || frequency_hz.is_nan() {
        return Err(MsgError::FrequencyOutOfRange(frequency_hz));
    }
    Ok((frequency_hz * (1u64 << 32) as f64 / SAMPLE_RATE_HZ).round() as u32)
}

fn compute_slow_word(frequency_hz: f64) -> u64 {
    (frequency_hz * 2f64.powi(64) / SAMPLE_RATE_HZ).round() as u64
}

/// Single-pole low-pass gain of the output chain at a given frequency.
pub fn output_gain(frequency_hz: f64) -> f64 {
    1.0 / (1.0 + (frequency_hz / F_3DB_HZ).powi(2)).sqrt()
}

/// Delivered power into 50 ohm for a sine of the given setpoint amplitude,
/// after the output chain rolloff: `(gain*Vpp)^2 / (8 * 50)` expressed in dBm.
pub fn output_power_dbm(amplitude_vpp: f64, frequency_hz: f64) -> f64 {
    let vpp_out = amplitude_vpp * output_gain(frequency_hz);
    let watts = vpp_out * vpp_out / (8.0 * LOAD_OHMS);
    10.0 * (watts / 1e-3).log10()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Waveform {
    Sine,
    Square,
    Triangle,
    Sawtooth,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DdsConfig {
    pub frequency_word: u32,
    /// 64-bit accumulator word, present when `frequency_word` fell below the
    /// slow-tone threshold and would quantize the tone too coarsely.
    pub slow_word: Option<u64>,
    pub amplitude_vpp: f64,
    pub phase_offset_rad: f64,
    pub waveform: Waveform,
}

impl DdsConfig {
    pub fn for_frequency(
        frequency_hz: f64,
        amplitude_vpp: f64,
        phase_offset_rad: f64,
        waveform: Waveform,
    ) -> Result<Self, MsgError> {
        let word = compute_ftw(frequency_hz)?;
        if word >= 1 << 31 {
            return Err(MsgError::WordAtNyquist(word));
        }
        if !(0.0..=MAX_AMPLITUDE_VPP).contains(&amplitude_vpp) || amplitude_vpp.is_nan() {
            return Err(MsgError::AmplitudeOutOfRange(amplitude_vpp));
        }
        let slow_word =
            (word < SLOW_TONE_WORD_THRESHOLD).then(|| compute_slow_word(frequency_hz));
        Ok(DdsConfig { frequency_word: word, slow_word, amplitude_vpp, phase_offset_rad, waveform })
    }

    /// Actual synthesized frequency after word quantization.
    pub fn output_frequency_hz(&self) -> f64 {
        match self.slow_word {
            Some(w) => w as f64 * SAMPLE_RATE_HZ / 2f64.powi(64),
            None => self.frequency_word as f64 * SAMPLE_RATE_HZ / (1u64 << 32) as f64,
        }
    }

    /// Peak output voltage including the chain rolloff at this frequency.
    pub fn peak_volts(&self) -> f64 {
        self.amplitude_vpp / 2.0 * output_gain(self.output_frequency_hz())
    }
}

/// Accumulator phase at a tick, normalized to [0, 1).
pub fn dds_phase(cfg: &DdsConfig, tick: u64) -> f64 {
    let acc = match cfg.slow_word {
        // wrapping u64 multiply is exactly the accumulator running mod 2^64
        Some(w) => w.wrapping_mul(tick) as f64 / 2f64.powi(64),
        None => (cfg.frequency_word as u64).wrapping_mul(tick) as u32 as f64 / (1u64 << 32) as f64,
    };
    let p = acc + cfg.phase_offset_rad / std::f64::consts::TAU;
    p.rem_euclid(1.0)
}

fn shape(waveform: Waveform, p: f64) -> f64 {
    match waveform {
        Waveform::Sine => (std::f64::consts::TAU * p).sin(),
        Waveform::Square => {
            if p < 0.5 {
                1.0
            } else {
                -1.0
            }
        }
        Waveform::Triangle => {
            if p < 0.25 {
                4.0 * p
            } else if p < 0.75 {
                2.0 - 4.0 * p
            } else {
                4.0 * p - 4.0
            }
        }
        Waveform::Sawtooth => {
            if p < 0.5 {
                2.0 * p
            } else {
                2.0 * p - 2.0
            }
        }
    }
}

/// Waveform value in [-1, 1] at a tick, before amplitude and rolloff.
pub fn dds_normalized(cfg: &DdsConfig, tick: u64) -> f64 {
    shape(cfg.waveform, dds_phase(cfg, tick))
}

/// Output voltage at a tick.
pub fn dds_sample(cfg: &DdsConfig, tick: u64) -> f64 {
    dds_normalized(cfg, tick) * cfg.peak_volts()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PwmConfig {
    pub period_ticks: u64,
    pub duty: f64,
    /// Analog rendering only; the logical level switches instantaneously.
    pub rise_fall_ns: f64,
}

impl PwmConfig {
    pub fn new(period_ticks: u64, duty: f64, rise_fall_ns: f64) -> Result<Self, MsgError> {
        if period_ticks < 2 {
            return Err(MsgError::PeriodTooShort(period_ticks));
        }
        if !(0.0..=1.0).contains(&duty) || duty.is_nan() {
            return Err(MsgError::DutyOutOfRange(duty));
        }
        Ok(PwmConfig { period_ticks, duty, rise_fall_ns })
    }

    /// Ticks spent high per period; duty quantizes to the tick grid with
    /// half-away-from-zero rounding.
    pub fn high_ticks(&self) -> u64 {
        (self.duty * self.period_ticks as f64).round() as u64
    }
}

/// Logical PWM level at a tick.
pub fn pwm_level(cfg: &PwmConfig, tick: u64) -> bool {
    tick % cfg.period_ticks < cfg.high_ticks()
}

/// Analog rendering of the PWM output with linear ramps of `rise_fall_ns`
/// starting at each logical edge.
pub fn pwm_analog(cfg: &PwmConfig, t_ns: f64) -> f64 {
    let period_ns = (cfg.period_ticks * TICK_NS) as f64;
    let high_ns = (cfg.high_ticks() * TICK_NS) as f64;
    let rf = cfg.rise_fall_ns.max(0.0);
    let pos = t_ns.rem_euclid(period_ns);
    if high_ns == 0.0 {
        return 0.0;
    }
    if high_ns >= period_ns {
        return 1.0;
    }
    if pos < high_ns {
        if rf > 0.0 && pos < rf {
            pos / rf
        } else {
            1.0
        }
    } else if rf > 0.0 && pos < high_ns + rf {
        1.0 - (pos - high_ns) / rf
    } else {
        0.0
    }
}
