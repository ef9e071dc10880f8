//! ADC sample codec, thermal bias model and acquisition packet format.
//!
//! The front end digitizes +/-1 V into 14-bit offset binary where 0x0000 is
//! positive full scale. Firmware re-encodes every sample into a plain signed
//! code so downstream math can treat it as an integer: `signed = 8191 - raw`.
//! One code is 1/8192 V, so 1 mV corresponds to 8.192 codes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest raw ADC word (14 bits).
pub const RAW_MAX: u16 = 0x3FFF;
/// Signed code range is -8192..=8191.
pub const CODE_MIN: i16 = -8192;
pub const CODE_MAX: i16 = 8191;
/// Codes per millivolt: 8192 codes per volt.
pub const CODES_PER_MV: f64 = 8.192;
/// Timestamps travel as 48-bit nanosecond counters.
pub const TIMESTAMP_MAX: u64 = (1 << 48) - 1;
/// Wire size of one acquisition packet.
pub const PACKET_LEN: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("raw sample {0:#06x} exceeds 14 bits")]
    RawOutOfRange(u16),
    #[error("signed code {0} outside -8192..=8191")]
    CodeOutOfRange(i32),
    #[error("timestamp {0} exceeds 48 bits")]
    TimestampTooWide(u64),
    #[error("packet needs exactly {PACKET_LEN} bytes, got {0}")]
    PacketLength(usize),
    #[error("bias table must be non-empty with strictly increasing temperatures")]
    BadBiasTable,
}

/// Re-encode a raw offset-binary ADC word as a signed code.
///
/// 0x0000 (positive full scale) maps to +8191, 0x3FFF to -8192.
pub fn encode_raw_to_signed(raw: u16) -> Result<i16, CodecError> {
    if raw > RAW_MAX {
        return Err(CodecError::RawOutOfRange(raw));
    }
    Ok(8191 - raw as i16)
}

/// Inverse of [`encode_raw_to_signed`].
pub fn decode_signed_to_raw(code: i16) -> Result<u16, CodecError> {
    if !(CODE_MIN..=CODE_MAX).contains(&code) {
        return Err(CodecError::CodeOutOfRange(code as i32));
    }
    Ok((8191 - code as i32) as u16)
}

/// Signed code to volts; full negative scale is exactly -1.0 V.
pub fn signed_to_voltage(code: i16) -> f64 {
    code as f64 / 8192.0
}

/// Quantize a voltage the way the front end does: round half away from zero,
/// clip to the signed code range.
pub fn voltage_to_signed(volts: f64) -> i16 {
    let code = (volts * 8192.0).round();
    code.clamp(CODE_MIN as f64, CODE_MAX as f64) as i16
}

/// Temperature-dependent DC bias of the analog inputs, in millivolts.
///
/// Calibration is a table of (temperature C, bias mV) rows measured after the
/// one-time pre-correction done at `reference_temperature_c`. Between rows the
/// bias is interpolated linearly; outside the measured span it is extrapolated
/// with the least-squares slope over the whole table, which stays within a
/// code of the local slope for this front end.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BiasModel {
    pub table: Vec<(f64, f64)>,
    pub reference_temperature_c: f64,
}

impl Default for BiasModel {
    fn default() -> Self {
        BiasModel {
            table: vec![
                (30.0, 0.124),
                (35.0, 0.393),
                (40.0, 0.608),
                (45.0, 0.803),
                (50.0, 0.929),
                (55.0, 1.086),
                (60.0, 1.275),
            ],
            reference_temperature_c: 24.0,
        }
    }
}

impl BiasModel {
    pub fn new(table: Vec<(f64, f64)>, reference_temperature_c: f64) -> Result<Self, CodecError> {
        if table.is_empty() || table.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(CodecError::BadBiasTable);
        }
        Ok(BiasModel { table, reference_temperature_c })
    }

    /// Least-squares slope of bias vs temperature over all table rows, mV/C.
    pub fn fitted_slope_mv_per_c(&self) -> f64 {
        let n = self.table.len() as f64;
        if self.table.len() < 2 {
            return 0.0;
        }
        let tbar = self.table.iter().map(|r| r.0).sum::<f64>() / n;
        let bbar = self.table.iter().map(|r| r.1).sum::<f64>() / n;
        let num: f64 = self.table.iter().map(|r| (r.0 - tbar) * (r.1 - bbar)).sum();
        let den: f64 = self.table.iter().map(|r| (r.0 - tbar) * (r.0 - tbar)).sum();
        num / den
    }
}

/// Bias in millivolts at a given board temperature.
pub fn bias_at_temperature(model: &BiasModel, temperature_c: f64) -> f64 {
    let t = &model.table;
    let slope = model.fitted_slope_mv_per_c();
    let (t_lo, b_lo) = t[0];
    let (t_hi, b_hi) = t[t.len() - 1];
    if temperature_c <= t_lo {
        return b_lo + slope * (temperature_c - t_lo);
    }
    if temperature_c >= t_hi {
        return b_hi + slope * (temperature_c - t_hi);
    }
    let i = t.partition_point(|r| r.0 <= temperature_c) - 1;
    let (t0, b0) = t[i];
    let (t1, b1) = t[i + 1];
    if temperature_c == t0 {
        return b0;
    }
    b0 + (b1 - b0) * (temperature_c - t0) / (t1 - t0)
}

/// Subtract the modeled bias (converted to codes, rounded half away from
/// zero) from a sample, clipping at the code range.
pub fn apply_bias_correction(code: i16, model: &BiasModel, temperature_c: f64) -> i16 {
    let bias_codes = (bias_at_temperature(model, temperature_c) * CODES_PER_MV).round();
    let corrected = code as f64 - bias_codes;
    corrected.clamp(CODE_MIN as f64, CODE_MAX as f64) as i16
}

/// One acquisition result: a 16-byte record per window (sequence mode) or per
/// decimated span (continuous mode).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AcqPacket {
    /// Emulated nanoseconds at window/span start; 48 bits on the wire.
    pub timestamp_ns: u64,
    pub point_index: u16,
    pub ch1: i16,
    pub ch2: i16,
    /// Saturating count of digital rising edges in the window/span.
    pub photon_count: u32,
}

impl AcqPacket {
    /// Big-endian wire layout: timestamp(6) | point(2) | ch1(2) | ch2(2) | count(4).
    pub fn pack(&self) -> Result<[u8; PACKET_LEN], CodecError> {
        if self.timestamp_ns > TIMESTAMP_MAX {
            return Err(CodecError::TimestampTooWide(self.timestamp_ns));
        }
        let mut out = [0u8; PACKET_LEN];
        out[..6].copy_from_slice(&self.timestamp_ns.to_be_bytes()[2..8]);
        out[6..8].copy_from_slice(&self.point_index.to_be_bytes());
        out[8..10].copy_from_slice(&self.ch1.to_be_bytes());
        out[10..12].copy_from_slice(&self.ch2.to_be_bytes());
        out[12..16].copy_from_slice(&self.photon_count.to_be_bytes());
        Ok(out)
    }

    pub fn unpack(bytes: &[u8]) -> Result<AcqPacket, CodecError> {
        if bytes.len() != PACKET_LEN {
            return Err(CodecError::PacketLength(bytes.len()));
        }
        let mut ts = [0u8; 8];
        ts[2..8].copy_from_slice(&bytes[..6]);
        Ok(AcqPacket {
            timestamp_ns: u64::from_be_bytes(ts),
            point_index: u16::from_be_bytes([bytes[6], bytes[7]]),
            ch1: i16::from_be_bytes([bytes[8], bytes[9]]),
            ch2: i16::from_be_bytes([bytes[10], bytes[11]]),
            photon_count: u32::from_be_bytes([bytes[12], bytes[13], bytes[14], bytes[15]]),
        })
    }
}

/// Serialize a packet slice back to back; helper for logs and batch payloads.
pub fn pack_all(packets: &[AcqPacket]) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::with_capacity(packets.len() * PACKET_LEN);
    for p in packets {
        out.extend_from_slice(&p.pack()?);
    }
    Ok(out)
}
