//! Control protocol spoken over a single UDP endpoint.
//!
//! Every datagram is one frame:
//!
//! ```text
//! +-------+---------+--------+-------+-------------+---------+-------+
//! | magic | version | opcode |  seq  | payload_len | payload |  crc  |
//! |  u16  |   u8    |   u8   |  u16  |     u16     |  bytes  |  u16  |
//! +-------+---------+--------+-------+-------------+---------+-------+
//! ```
//!
//! All integers are big-endian. The CRC is CCITT (poly 0x1021, init 0xFFFF)
//! over every preceding byte. Frames never exceed 1472 bytes so they ride in
//! one unfragmented UDP datagram on a standard 1500-byte MTU.
//!
//! Commands flow client -> server; each gets exactly one response frame that
//! echoes opcode and seq and starts its payload with a status byte. READ
//! responses are DataBatch frames carrying up to [`MAX_BATCH_PACKETS`]
//! packets each; the client acknowledges each batch with ACK and the server
//! retransmits unacknowledged batches (stop-and-wait).

use thiserror::Error;

use crate::codec::{AcqPacket, PACKET_LEN};
use crate::msg::Waveform;
use crate::sap::{Pattern, SapConfig, TriggerSource};

pub const MAGIC: u16 = 0xDA51;
pub const VERSION: u8 = 0x01;
/// Header bytes before the payload.
pub const HEADER_LEN: usize = 8;
/// Header plus trailing CRC.
pub const FRAME_OVERHEAD: usize = HEADER_LEN + 2;
/// One unfragmented datagram on a 1500 MTU after IP/UDP headers.
pub const MAX_FRAME: usize = 1472;
pub const MAX_PAYLOAD: usize = MAX_FRAME - FRAME_OVERHEAD;
/// Status byte + batch index + total batches.
pub const BATCH_META_LEN: usize = 5;
/// Packets per DataBatch: floor((1472 - overhead - meta) / 16).
pub const MAX_BATCH_PACKETS: usize = (MAX_FRAME - FRAME_OVERHEAD - BATCH_META_LEN) / PACKET_LEN;
const _: () = assert!(FRAME_OVERHEAD + BATCH_META_LEN + MAX_BATCH_PACKETS * PACKET_LEN <= MAX_FRAME);

pub const IDENTITY: &str = "SPINDAQ-EMU/1";
pub const DEFAULT_PORT: u16 = 5025;

/// Capability bitmap advertised in the HELLO response.
pub mod caps {
    pub const SEQUENCE: u32 = 1 << 0;
    pub const CONTINUOUS: u32 = 1 << 1;
    pub const DDS: u32 = 1 << 2;
    pub const PWM: u32 = 1 << 3;
    pub const BIAS: u32 = 1 << 4;
    pub const ENV: u32 = 1 << 5;
    pub const ALL: u32 = SEQUENCE | CONTINUOUS | DDS | PWM | BIAS | ENV;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Opcode {
    Hello = 0x01,
    SetSap = 0x02,
    SetDds = 0x03,
    SetPwm = 0x04,
    SetBias = 0x05,
    SetEnv = 0x06,
    Arm = 0x07,
    SoftTrigger = 0x08,
    Stop = 0x09,
    Status = 0x0A,
    Read = 0x0B,
    Ack = 0x0C,
}

impl TryFrom<u8> for Opcode {
    type Error = u8;
    fn try_from(v: u8) -> Result<Self, u8> {
        Ok(match v {
            0x01 => Opcode::Hello,
            0x02 => Opcode::SetSap,
            0x03 => Opcode::SetDds,
            0x04 => Opcode::SetPwm,
            0x05 => Opcode::SetBias,
            0x06 => Opcode::SetEnv,
            0x07 => Opcode::Arm,
            0x08 => Opcode::SoftTrigger,
            0x09 => Opcode::Stop,
            0x0A => Opcode::Status,
            0x0B => Opcode::Read,
            0x0C => Opcode::Ack,
            other => return Err(other),
        })
    }
}

/// Response status byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Status {
    Ok = 0,
    ErrOpcode = 1,
    ErrState = 2,
    ErrParam = 3,
    ErrRange = 4,
    ErrLength = 5,
}

impl TryFrom<u8> for Status {
    type Error = u8;
    fn try_from(v: u8) -> Result<Self, u8> {
        Ok(match v {
            0 => Status::Ok,
            1 => Status::ErrOpcode,
            2 => Status::ErrState,
            3 => Status::ErrParam,
            4 => Status::ErrRange,
            5 => Status::ErrLength,
            other => return Err(other),
        })
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum FrameError {
    #[error("bad magic")]
    Magic,
    #[error("unsupported protocol version")]
    Version,
    #[error("frame length inconsistent")]
    Length,
    #[error("CRC mismatch")]
    Crc,
    #[error("payload exceeds {MAX_PAYLOAD} bytes")]
    PayloadTooLong,
}

#[derive(Debug, Error, PartialEq)]
pub enum PayloadError {
    #[error("payload truncated or trailing bytes")]
    Truncated,
    #[error("bad field value: {0}")]
    BadValue(&'static str),
}

/// CRC16-CCITT (poly 0x1021, init 0xFFFF, MSB first, no reflection).
pub fn crc16_ccitt(bytes: &[u8]) -> u16 {
    const TABLE: [u16; 256] = build_crc_table();
    let mut crc: u16 = 0xFFFF;
    for &b in bytes {
        let idx = ((crc >> 8) ^ b as u16) & 0xFF;
        crc = (crc << 8) ^ TABLE[idx as usize];
    }
    crc
}

const fn build_crc_table() -> [u16; 256] {
    let mut table = [0u16; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = (i as u16) << 8;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & 0x8000 != 0 { (crc << 1) ^ 0x1021 } else { crc << 1 };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

/// One protocol frame. The opcode stays a raw byte so unknown codes survive
/// decoding and can be answered with ERR_OPCODE.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub opcode: u8,
    pub seq: u16,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(opcode: Opcode, seq: u16, payload: Vec<u8>) -> Self {
        Frame { opcode: opcode as u8, seq, payload }
    }
}

pub fn encode_frame(f: &Frame) -> Result<Vec<u8>, FrameError> {
    if f.payload.len() > MAX_PAYLOAD {
        return Err(FrameError::PayloadTooLong);
    }
    let mut out = Vec::with_capacity(FRAME_OVERHEAD + f.payload.len());
    out.extend_from_slice(&MAGIC.to_be_bytes());
    out.push(VERSION);
    out.push(f.opcode);
    out.extend_from_slice(&f.seq.to_be_bytes());
    out.extend_from_slice(&(f.payload.len() as u16).to_be_bytes());
    out.extend_from_slice(&f.payload);
    let crc = crc16_ccitt(&out);
    out.extend_from_slice(&crc.to_be_bytes());
    Ok(out)
}

pub fn decode_frame(bytes: &[u8]) -> Result<Frame, FrameError> {
    if bytes.len() < FRAME_OVERHEAD {
        return Err(FrameError::Length);
    }
    if bytes[0..2] != MAGIC.to_be_bytes() {
        return Err(FrameError::Magic);
    }
    if bytes[2] != VERSION {
        return Err(FrameError::Version);
    }
    let payload_len = u16::from_be_bytes([bytes[6], bytes[7]]) as usize;
    if bytes.len() != FRAME_OVERHEAD + payload_len {
        return Err(FrameError::Length);
    }
    let crc_pos = bytes.len() - 2;
    let got = u16::from_be_bytes([bytes[crc_pos], bytes[crc_pos + 1]]);
    if crc16_ccitt(&bytes[..crc_pos]) != got {
        return Err(FrameError::Crc);
    }
    Ok(Frame {
        opcode: bytes[3],
        seq: u16::from_be_bytes([bytes[4], bytes[5]]),
        payload: bytes[8..crc_pos].to_vec(),
    })
}

// ---------------------------------------------------------------- payloads

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], PayloadError> {
        if self.pos + n > self.buf.len() {
            return Err(PayloadError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, PayloadError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, PayloadError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, PayloadError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, PayloadError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, PayloadError> {
        Ok(f64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn finish(self) -> Result<(), PayloadError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(PayloadError::Truncated)
        }
    }
}

fn waveform_code(w: Waveform) -> u8 {
    match w {
        Waveform::Sine => 0,
        Waveform::Square => 1,
        Waveform::Triangle => 2,
        Waveform::Sawtooth => 3,
    }
}

fn waveform_from(code: u8) -> Result<Waveform, PayloadError> {
    Ok(match code {
        0 => Waveform::Sine,
        1 => Waveform::Square,
        2 => Waveform::Triangle,
        3 => Waveform::Sawtooth,
        _ => return Err(PayloadError::BadValue("waveform")),
    })
}

pub fn pattern_code(p: Pattern) -> u8 {
    match p {
        Pattern::Sequence => 0,
        Pattern::Continuous => 1,
    }
}

pub fn trigger_source_code(t: TriggerSource) -> u8 {
    match t {
        TriggerSource::InternalPwm => 0,
        TriggerSource::ExternalDi => 1,
        TriggerSource::Software => 2,
    }
}

pub fn encode_sap_config(cfg: &SapConfig) -> Vec<u8> {
    let mut out = Vec::with_capacity(36);
    out.push(pattern_code(cfg.pattern));
    out.push(trigger_source_code(cfg.trigger_source));
    out.extend_from_slice(&cfg.delay_ns.to_be_bytes());
    out.extend_from_slice(&cfg.window_ns.to_be_bytes());
    out.extend_from_slice(&cfg.points.to_be_bytes());
    out.extend_from_slice(&cfg.point_repeats.to_be_bytes());
    out.extend_from_slice(&cfg.sweep_repeats.to_be_bytes());
    out.extend_from_slice(&cfg.continuous_read_max.to_be_bytes());
    out.extend_from_slice(&cfg.decimation.to_be_bytes());
    out
}

pub fn decode_sap_config(payload: &[u8]) -> Result<SapConfig, PayloadError> {
    let mut r = Reader::new(payload);
    let pattern = match r.u8()? {
        0 => Pattern::Sequence,
        1 => Pattern::Continuous,
        _ => return Err(PayloadError::BadValue("pattern")),
    };
    let trigger_source = match r.u8()? {
        0 => TriggerSource::InternalPwm,
        1 => TriggerSource::ExternalDi,
        2 => TriggerSource::Software,
        _ => return Err(PayloadError::BadValue("trigger source")),
    };
    let cfg = SapConfig {
        pattern,
        trigger_source,
        delay_ns: r.u64()?,
        window_ns: r.u64()?,
        points: r.u32()?,
        point_repeats: r.u32()?,
        sweep_repeats: r.u32()?,
        continuous_read_max: r.u16()?,
        decimation: r.u32()?,
    };
    r.finish()?;
    Ok(cfg)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SetDdsCmd {
    pub frequency_hz: f64,
    pub amplitude_vpp: f64,
    pub phase_offset_rad: f64,
    pub waveform: Waveform,
}

pub fn encode_set_dds(c: &SetDdsCmd) -> Vec<u8> {
    let mut out = Vec::with_capacity(25);
    out.extend_from_slice(&c.frequency_hz.to_be_bytes());
    out.extend_from_slice(&c.amplitude_vpp.to_be_bytes());
    out.extend_from_slice(&c.phase_offset_rad.to_be_bytes());
    out.push(waveform_code(c.waveform));
    out
}

pub fn decode_set_dds(payload: &[u8]) -> Result<SetDdsCmd, PayloadError> {
    let mut r = Reader::new(payload);
    let cmd = SetDdsCmd {
        frequency_hz: r.f64()?,
        amplitude_vpp: r.f64()?,
        phase_offset_rad: r.f64()?,
        waveform: waveform_from(r.u8()?)?,
    };
    r.finish()?;
    Ok(cmd)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SetPwmCmd {
    pub period_ticks: u64,
    pub duty: f64,
    pub rise_fall_ns: f64,
}

pub fn encode_set_pwm(c: &SetPwmCmd) -> Vec<u8> {
    let mut out = Vec::with_capacity(24);
    out.extend_from_slice(&c.period_ticks.to_be_bytes());
    out.extend_from_slice(&c.duty.to_be_bytes());
    out.extend_from_slice(&c.rise_fall_ns.to_be_bytes());
    out
}

pub fn decode_set_pwm(payload: &[u8]) -> Result<SetPwmCmd, PayloadError> {
    let mut r = Reader::new(payload);
    let cmd = SetPwmCmd { period_ticks: r.u64()?, duty: r.f64()?, rise_fall_ns: r.f64()? };
    r.finish()?;
    Ok(cmd)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetBiasCmd {
    pub enabled: bool,
    /// NaN means "track the emulated board temperature".
    pub temperature_c: f64,
    pub table: Vec<(f64, f64)>,
}

pub fn encode_set_bias(c: &SetBiasCmd) -> Vec<u8> {
    let mut out = Vec::with_capacity(11 + 16 * c.table.len());
    out.push(c.enabled as u8);
    out.extend_from_slice(&c.temperature_c.to_be_bytes());
    out.extend_from_slice(&(c.table.len() as u16).to_be_bytes());
    for (t, mv) in &c.table {
        out.extend_from_slice(&t.to_be_bytes());
        out.extend_from_slice(&mv.to_be_bytes());
    }
    out
}

pub fn decode_set_bias(payload: &[u8]) -> Result<SetBiasCmd, PayloadError> {
    let mut r = Reader::new(payload);
    let enabled = match r.u8()? {
        0 => false,
        1 => true,
        _ => return Err(PayloadError::BadValue("enabled flag")),
    };
    let temperature_c = r.f64()?;
    let n = r.u16()? as usize;
    let mut table = Vec::with_capacity(n);
    for _ in 0..n {
        table.push((r.f64()?, r.f64()?));
    }
    r.finish()?;
    Ok(SetBiasCmd { enabled, temperature_c, table })
}

/// SET_ENV ships JSON (possibly split across chunks, assembled in order).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SetEnvChunk {
    pub chunk_index: u16,
    pub total_chunks: u16,
    pub bytes: Vec<u8>,
}

pub const ENV_CHUNK_BYTES: usize = MAX_PAYLOAD - 4;

pub fn encode_set_env(c: &SetEnvChunk) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + c.bytes.len());
    out.extend_from_slice(&c.chunk_index.to_be_bytes());
    out.extend_from_slice(&c.total_chunks.to_be_bytes());
    out.extend_from_slice(&c.bytes);
    out
}

pub fn decode_set_env(payload: &[u8]) -> Result<SetEnvChunk, PayloadError> {
    let mut r = Reader::new(payload);
    let chunk_index = r.u16()?;
    let total_chunks = r.u16()?;
    let bytes = payload[4..].to_vec();
    if total_chunks == 0 || chunk_index >= total_chunks {
        return Err(PayloadError::BadValue("chunk indices"));
    }
    Ok(SetEnvChunk { chunk_index, total_chunks, bytes })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReadCmd {
    pub offset: u32,
    pub count: u16,
}

pub fn encode_read(c: &ReadCmd) -> Vec<u8> {
    let mut out = Vec::with_capacity(6);
    out.extend_from_slice(&c.offset.to_be_bytes());
    out.extend_from_slice(&c.count.to_be_bytes());
    out
}

pub fn decode_read(payload: &[u8]) -> Result<ReadCmd, PayloadError> {
    let mut r = Reader::new(payload);
    let cmd = ReadCmd { offset: r.u32()?, count: r.u16()? };
    r.finish()?;
    Ok(cmd)
}

pub fn encode_ack(batch_index: u16) -> Vec<u8> {
    batch_index.to_be_bytes().to_vec()
}

pub fn decode_ack(payload: &[u8]) -> Result<u16, PayloadError> {
    let mut r = Reader::new(payload);
    let idx = r.u16()?;
    r.finish()?;
    Ok(idx)
}

/// Payload of a READ/ACK response carrying packets. `batch_index ==
/// total_batches` with no packets marks stream completion.
#[derive(Debug, Clone, PartialEq)]
pub struct DataBatch {
    pub status: Status,
    pub batch_index: u16,
    pub total_batches: u16,
    pub packets: Vec<AcqPacket>,
}

pub fn encode_batch(b: &DataBatch) -> Vec<u8> {
    debug_assert!(b.packets.len() <= MAX_BATCH_PACKETS);
    let mut out = Vec::with_capacity(BATCH_META_LEN + PACKET_LEN * b.packets.len());
    out.push(b.status as u8);
    out.extend_from_slice(&b.batch_index.to_be_bytes());
    out.extend_from_slice(&b.total_batches.to_be_bytes());
    for p in &b.packets {
        // timestamps are masked to 48 bits upstream
        out.extend_from_slice(&p.pack().expect("timestamp fits 48 bits"));
    }
    out
}

pub fn decode_batch(payload: &[u8]) -> Result<DataBatch, PayloadError> {
    let mut r = Reader::new(payload);
    let status = Status::try_from(r.u8()?).map_err(|_| PayloadError::BadValue("status"))?;
    let batch_index = r.u16()?;
    let total_batches = r.u16()?;
    let rest = &payload[BATCH_META_LEN..];
    if !rest.len().is_multiple_of(PACKET_LEN) {
        return Err(PayloadError::Truncated);
    }
    let packets = rest
        .chunks_exact(PACKET_LEN)
        .map(|c| AcqPacket::unpack(c).expect("length checked"))
        .collect();
    Ok(DataBatch { status, batch_index, total_batches, packets })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HelloReply {
    pub identity: String,
    pub capabilities: u32,
}

pub fn encode_hello_reply(r: &HelloReply) -> Vec<u8> {
    let mut out = vec![Status::Ok as u8];
    out.extend_from_slice(&r.capabilities.to_be_bytes());
    out.extend_from_slice(r.identity.as_bytes());
    out
}

pub fn decode_hello_reply(payload: &[u8]) -> Result<HelloReply, PayloadError> {
    let mut r = Reader::new(payload);
    let status = r.u8()?;
    if status != Status::Ok as u8 {
        return Err(PayloadError::BadValue("hello failed"));
    }
    let capabilities = r.u32()?;
    let identity = String::from_utf8(payload[5..].to_vec())
        .map_err(|_| PayloadError::BadValue("identity utf8"))?;
    Ok(HelloReply { identity, capabilities })
}

/// Device state snapshot returned by STATUS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StatusReport {
    pub running: bool,
    pub pattern_continuous: bool,
    pub trigger_source: u8,
    pub packets_emitted: u64,
    pub dropped_triggers: u64,
    pub ring_available: u16,
    pub emu_time_ns: u64,
    pub malformed_datagrams: u32,
    pub pwm_period_ticks: u64,
    /// Duty in thousandths.
    pub pwm_duty_millis: u16,
    pub dds_frequency_word: u32,
    pub dds_amplitude_mvpp: u16,
    pub mw_cursor: u32,
}

pub fn encode_status_report(s: &StatusReport) -> Vec<u8> {
    let mut out = vec![Status::Ok as u8];
    out.push(s.running as u8);
    out.push(s.pattern_continuous as u8);
    out.push(s.trigger_source);
    out.extend_from_slice(&s.packets_emitted.to_be_bytes());
    out.extend_from_slice(&s.dropped_triggers.to_be_bytes());
    out.extend_from_slice(&s.ring_available.to_be_bytes());
    out.extend_from_slice(&s.emu_time_ns.to_be_bytes());
    out.extend_from_slice(&s.malformed_datagrams.to_be_bytes());
    out.extend_from_slice(&s.pwm_period_ticks.to_be_bytes());
    out.extend_from_slice(&s.pwm_duty_millis.to_be_bytes());
    out.extend_from_slice(&s.dds_frequency_word.to_be_bytes());
    out.extend_from_slice(&s.dds_amplitude_mvpp.to_be_bytes());
    out.extend_from_slice(&s.mw_cursor.to_be_bytes());
    out
}

pub fn decode_status_report(payload: &[u8]) -> Result<StatusReport, PayloadError> {
    let mut r = Reader::new(payload);
    let status = r.u8()?;
    if status != Status::Ok as u8 {
        return Err(PayloadError::BadValue("status response not ok"));
    }
    let report = StatusReport {
        running: r.u8()? != 0,
        pattern_continuous: r.u8()? != 0,
        trigger_source: r.u8()?,
        packets_emitted: r.u64()?,
        dropped_triggers: r.u64()?,
        ring_available: r.u16()?,
        emu_time_ns: r.u64()?,
        malformed_datagrams: r.u32()?,
        pwm_period_ticks: r.u64()?,
        pwm_duty_millis: r.u16()?,
        dds_frequency_word: r.u32()?,
        dds_amplitude_mvpp: r.u16()?,
        mw_cursor: r.u32()?,
    };
    r.finish()?;
    Ok(report)
}

/// Plain response: just a status byte.
pub fn encode_status_only(status: Status) -> Vec<u8> {
    vec![status as u8]
}

pub fn response_status(payload: &[u8]) -> Result<Status, PayloadError> {
    if payload.is_empty() {
        return Err(PayloadError::Truncated);
    }
    Status::try_from(payload[0]).map_err(|_| PayloadError::BadValue("status"))
}
