//! C ABI over the spindaq emulator and client SDK.
//!
//! Conventions:
//! - Every fallible call returns a [`SpindaqStatus`]; `SPINDAQ_STATUS_OK` is 0.
//! - On failure, a thread-local message is readable via `spindaq_last_error`
//!   until the next failing call on the same thread.
//! - `SpindaqServer` and `SpindaqClient` are opaque; create them with the
//!   `*_start`/`*_connect` constructors and release them with the matching
//!   `*_free`. Handles are not thread-safe; guard them externally if shared.
//! - Panics never cross the boundary; they are caught and reported as
//!   `SPINDAQ_STATUS_INTERNAL`.

use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Duration;

use spindaq::client::{Client, ClientError};
use spindaq::config::{ReliabilityConfig, Scenario, ServerConfig};
use spindaq::proto::{SetBiasCmd, SetDdsCmd, SetPwmCmd, StatusReport};
use spindaq::sap::{Pattern, SapConfig, TriggerSource};
use spindaq::server::Server;

/// Result code of every fallible C-ABI call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpindaqStatus {
    /// Success.
    SpindaqStatusOk = 0,
    /// A pointer was null, a string was not UTF-8, or a value was out of range.
    SpindaqStatusInvalidArgument = 1,
    /// Socket-level failure (bind, send, receive).
    SpindaqStatusIo = 2,
    /// The device did not answer within the retry budget.
    SpindaqStatusTimeout = 3,
    /// Malformed frame, payload, or sequencing violation.
    SpindaqStatusProtocol = 4,
    /// The device answered with an error status.
    SpindaqStatusDevice = 5,
    /// A caught panic; state may be inconsistent, free the handle.
    SpindaqStatusInternal = 6,
}

use SpindaqStatus::*;

/// One acquisition record: emulated timestamp, sweep point, both analog
/// channels as signed codes, and the photon count in the window.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpindaqPacket {
    pub timestamp_ns: u64,
    pub point_index: u16,
    pub ch1: i16,
    pub ch2: i16,
    pub photon_count: u32,
}

/// Acquisition-and-processing configuration (mirror of the SET_SAP command).
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SpindaqSapConfig {
    /// 0 = sequence pattern, nonzero = continuous pattern.
    pub pattern_continuous: u8,
    /// 0 = internal PWM edges, 1 = external trigger input, 2 = software.
    pub trigger_source: u8,
    /// Wait after each trigger before the window opens.
    pub delay_ns: u64,
    /// Acquisition window per trigger (sequence) or span (continuous).
    pub window_ns: u64,
    /// Sequence length N.
    pub points: u32,
    /// Consecutive triggers per point, R.
    pub point_repeats: u32,
    /// Full sweeps, S.
    pub sweep_repeats: u32,
    /// Largest single continuous-mode read, M.
    pub continuous_read_max: u16,
    /// K: continuous mode emits one packet per K ticks; sequence mode samples
    /// the window on a K-tick stride.
    pub decimation: u32,
}

/// Snapshot of the device state (mirror of the STATUS reply).
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SpindaqStatusReport {
    pub running: u8,
    pub pattern_continuous: u8,
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

/// Opaque in-process emulator instance.
pub struct SpindaqServer {
    inner: Server,
}

/// Opaque client session.
pub struct SpindaqClient {
    inner: Client,
}

thread_local! {
    static LAST_ERROR: std::cell::RefCell<CString> =
        std::cell::RefCell::new(CString::new("").unwrap());
}

fn fail(code: SpindaqStatus, message: impl AsRef<str>) -> SpindaqStatus {
    let sanitized = message.as_ref().replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap();
    });
    code
}

fn from_client_error(e: &ClientError) -> SpindaqStatus {
    match e {
        ClientError::Io(_) => SpindaqStatusIo,
        ClientError::Timeout { .. } => SpindaqStatusTimeout,
        ClientError::Device(_) => SpindaqStatusDevice,
        _ => SpindaqStatusProtocol,
    }
}

fn client_fail(e: ClientError) -> SpindaqStatus {
    fail(from_client_error(&e), e.to_string())
}

/// Run `f` with panics converted into `SPINDAQ_STATUS_INTERNAL`.
fn guarded(f: impl FnOnce() -> SpindaqStatus) -> SpindaqStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(code) => code,
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            fail(SpindaqStatusInternal, msg)
        }
    }
}

/// Message describing the most recent failure on this thread. Never null;
/// empty before any failure. Valid until the next failing call here.
#[no_mangle]
pub extern "C" fn spindaq_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Start an in-process emulator on `port` (0 picks an ephemeral port) with
/// the given RNG seed and the built-in default scenario.
///
/// # Safety
/// `out` must point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn spindaq_server_start(
    port: u16,
    seed: u64,
    out: *mut *mut SpindaqServer,
) -> SpindaqStatus {
    guarded(|| {
        if out.is_null() {
            return fail(SpindaqStatusInvalidArgument, "out pointer is null");
        }
        match Server::spawn(ServerConfig { port, seed, ..ServerConfig::default() }) {
            Ok(inner) => {
                unsafe { *out = Box::into_raw(Box::new(SpindaqServer { inner })) };
                SpindaqStatusOk
            }
            Err(e) => fail(SpindaqStatusIo, e.to_string()),
        }
    })
}

/// UDP port the emulator is listening on.
///
/// # Safety
/// `server` must be a live handle from `spindaq_server_start`.
#[no_mangle]
pub unsafe extern "C" fn spindaq_server_port(server: *const SpindaqServer) -> u16 {
    if server.is_null() {
        return 0;
    }
    unsafe { &*server }.inner.local_addr().port()
}

/// Shut the emulator down and release the handle. Null is a no-op.
///
/// # Safety
/// `server` must come from `spindaq_server_start` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn spindaq_server_free(server: *mut SpindaqServer) {
    if !server.is_null() {
        unsafe { Box::from_raw(server) }.inner.shutdown();
    }
}

/// Open a session to a device at `host:port` (HELLO handshake included).
///
/// # Safety
/// `host` must be a NUL-terminated string, `out` writable for one pointer.
#[no_mangle]
pub unsafe extern "C" fn spindaq_client_connect(
    host: *const c_char,
    port: u16,
    out: *mut *mut SpindaqClient,
) -> SpindaqStatus {
    guarded(|| {
        if host.is_null() || out.is_null() {
            return fail(SpindaqStatusInvalidArgument, "host or out pointer is null");
        }
        let Ok(host) = unsafe { CStr::from_ptr(host) }.to_str() else {
            return fail(SpindaqStatusInvalidArgument, "host is not UTF-8");
        };
        match Client::connect((host, port), ReliabilityConfig::default()) {
            Ok(inner) => {
                unsafe { *out = Box::into_raw(Box::new(SpindaqClient { inner })) };
                SpindaqStatusOk
            }
            Err(e) => client_fail(e),
        }
    })
}

/// Release a client session. Null is a no-op.
///
/// # Safety
/// `client` must come from `spindaq_client_connect`, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn spindaq_client_free(client: *mut SpindaqClient) {
    if !client.is_null() {
        drop(unsafe { Box::from_raw(client) });
    }
}

unsafe fn borrow<'a>(client: *mut SpindaqClient) -> Result<&'a mut Client, SpindaqStatus> {
    if client.is_null() {
        return Err(fail(SpindaqStatusInvalidArgument, "client handle is null"));
    }
    Ok(&mut unsafe { &mut *client }.inner)
}

fn done(r: Result<(), ClientError>) -> SpindaqStatus {
    match r {
        Ok(()) => SpindaqStatusOk,
        Err(e) => client_fail(e),
    }
}

/// Copy the device identity string (NUL-terminated) into `buf`.
///
/// # Safety
/// `buf` must be writable for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn spindaq_client_identity(
    client: *mut SpindaqClient,
    buf: *mut c_char,
    cap: usize,
) -> SpindaqStatus {
    guarded(|| {
        let c = match unsafe { borrow(client) } {
            Ok(c) => c,
            Err(code) => return code,
        };
        if buf.is_null() {
            return fail(SpindaqStatusInvalidArgument, "buf pointer is null");
        }
        let id = c.identity().as_bytes();
        if cap < id.len() + 1 {
            return fail(
                SpindaqStatusInvalidArgument,
                format!("identity needs {} bytes, buffer has {cap}", id.len() + 1),
            );
        }
        unsafe {
            std::ptr::copy_nonoverlapping(id.as_ptr(), buf.cast::<u8>(), id.len());
            *buf.add(id.len()) = 0;
        }
        SpindaqStatusOk
    })
}

/// Configure acquisition (SET_SAP).
///
/// # Safety
/// `client` must be live and `config` readable.
#[no_mangle]
pub unsafe extern "C" fn spindaq_client_set_sap(
    client: *mut SpindaqClient,
    config: *const SpindaqSapConfig,
) -> SpindaqStatus {
    guarded(|| {
        let c = match unsafe { borrow(client) } {
            Ok(c) => c,
            Err(code) => return code,
        };
        if config.is_null() {
            return fail(SpindaqStatusInvalidArgument, "config pointer is null");
        }
        let cfg = unsafe { *config };
        let trigger_source = match cfg.trigger_source {
            0 => TriggerSource::InternalPwm,
            1 => TriggerSource::ExternalDi,
            2 => TriggerSource::Software,
            other => {
                return fail(
                    SpindaqStatusInvalidArgument,
                    format!("trigger_source {other} is not 0, 1, or 2"),
                )
            }
        };
        let sap = SapConfig {
            pattern: if cfg.pattern_continuous != 0 {
                Pattern::Continuous
            } else {
                Pattern::Sequence
            },
            trigger_source,
            delay_ns: cfg.delay_ns,
            window_ns: cfg.window_ns,
            points: cfg.points,
            point_repeats: cfg.point_repeats,
            sweep_repeats: cfg.sweep_repeats,
            continuous_read_max: cfg.continuous_read_max,
            decimation: cfg.decimation,
        };
        done(c.set_sap(&sap))
    })
}

/// Program the DDS tone (SET_DDS). `waveform`: 0 sine, 1 square, 2 triangle,
/// 3 sawtooth.
///
/// # Safety
/// `client` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn spindaq_client_set_dds(
    client: *mut SpindaqClient,
    frequency_hz: f64,
    amplitude_vpp: f64,
    phase_offset_rad: f64,
    waveform: u8,
) -> SpindaqStatus {
    guarded(|| {
        let c = match unsafe { borrow(client) } {
            Ok(c) => c,
            Err(code) => return code,
        };
        let waveform = match waveform {
            0 => spindaq::msg::Waveform::Sine,
            1 => spindaq::msg::Waveform::Square,
            2 => spindaq::msg::Waveform::Triangle,
            3 => spindaq::msg::Waveform::Sawtooth,
            other => {
                return fail(
                    SpindaqStatusInvalidArgument,
                    format!("waveform {other} is not 0..=3"),
                )
            }
        };
        done(c.set_dds(&SetDdsCmd { frequency_hz, amplitude_vpp, phase_offset_rad, waveform }))
    })
}

/// Program the PWM channel (SET_PWM).
///
/// # Safety
/// `client` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn spindaq_client_set_pwm(
    client: *mut SpindaqClient,
    period_ticks: u64,
    duty: f64,
    rise_fall_ns: f64,
) -> SpindaqStatus {
    guarded(|| {
        let c = match unsafe { borrow(client) } {
            Ok(c) => c,
            Err(code) => return code,
        };
        done(c.set_pwm(&SetPwmCmd { period_ticks, duty, rise_fall_ns }))
    })
}

/// Enable or disable thermal-bias correction at the given board temperature
/// (SET_BIAS with the factory table). Pass NaN to keep the device's current
/// temperature estimate.
///
/// # Safety
/// `client` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn spindaq_client_set_bias(
    client: *mut SpindaqClient,
    enabled: u8,
    temperature_c: f64,
) -> SpindaqStatus {
    guarded(|| {
        let c = match unsafe { borrow(client) } {
            Ok(c) => c,
            Err(code) => return code,
        };
        done(c.set_bias(&SetBiasCmd {
            enabled: enabled != 0,
            temperature_c,
            table: Vec::new(),
        }))
    })
}

/// Replace the emulated physics scenario from a JSON document (SET_ENV).
/// The schema matches the server's configuration file `scenario` section.
///
/// # Safety
/// `json` must be a NUL-terminated string; `client` must be live.
#[no_mangle]
pub unsafe extern "C" fn spindaq_client_set_scenario_json(
    client: *mut SpindaqClient,
    json: *const c_char,
) -> SpindaqStatus {
    guarded(|| {
        let c = match unsafe { borrow(client) } {
            Ok(c) => c,
            Err(code) => return code,
        };
        if json.is_null() {
            return fail(SpindaqStatusInvalidArgument, "json pointer is null");
        }
        let Ok(json) = unsafe { CStr::from_ptr(json) }.to_str() else {
            return fail(SpindaqStatusInvalidArgument, "json is not UTF-8");
        };
        let scenario: Scenario = match serde_json::from_str(json) {
            Ok(s) => s,
            Err(e) => return fail(SpindaqStatusInvalidArgument, e.to_string()),
        };
        done(c.set_scenario(&scenario))
    })
}

/// Start acquisition (ARM).
///
/// # Safety
/// `client` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn spindaq_client_arm(client: *mut SpindaqClient) -> SpindaqStatus {
    guarded(|| match unsafe { borrow(client) } {
        Ok(c) => done(c.arm()),
        Err(code) => code,
    })
}

/// Abort acquisition (STOP).
///
/// # Safety
/// `client` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn spindaq_client_stop(client: *mut SpindaqClient) -> SpindaqStatus {
    guarded(|| match unsafe { borrow(client) } {
        Ok(c) => done(c.stop()),
        Err(code) => code,
    })
}

/// Inject one software trigger (SOFT_TRIGGER).
///
/// # Safety
/// `client` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn spindaq_client_soft_trigger(client: *mut SpindaqClient) -> SpindaqStatus {
    guarded(|| match unsafe { borrow(client) } {
        Ok(c) => done(c.soft_trigger()),
        Err(code) => code,
    })
}

fn convert_status(s: &StatusReport) -> SpindaqStatusReport {
    SpindaqStatusReport {
        running: s.running as u8,
        pattern_continuous: s.pattern_continuous as u8,
        trigger_source: s.trigger_source,
        packets_emitted: s.packets_emitted,
        dropped_triggers: s.dropped_triggers,
        ring_available: s.ring_available,
        emu_time_ns: s.emu_time_ns,
        malformed_datagrams: s.malformed_datagrams,
        pwm_period_ticks: s.pwm_period_ticks,
        pwm_duty_millis: s.pwm_duty_millis,
        dds_frequency_word: s.dds_frequency_word,
        dds_amplitude_mvpp: s.dds_amplitude_mvpp,
        mw_cursor: s.mw_cursor,
    }
}

/// Fetch the device status snapshot (STATUS).
///
/// # Safety
/// `client` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn spindaq_client_status(
    client: *mut SpindaqClient,
    out: *mut SpindaqStatusReport,
) -> SpindaqStatus {
    guarded(|| {
        let c = match unsafe { borrow(client) } {
            Ok(c) => c,
            Err(code) => return code,
        };
        if out.is_null() {
            return fail(SpindaqStatusInvalidArgument, "out pointer is null");
        }
        match c.status() {
            Ok(s) => {
                unsafe { *out = convert_status(&s) };
                SpindaqStatusOk
            }
            Err(e) => client_fail(e),
        }
    })
}

/// Poll STATUS until the device reports not-running, or fail with
/// `SPINDAQ_STATUS_PROTOCOL` after `budget_ms` milliseconds.
///
/// # Safety
/// `client` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn spindaq_client_wait_idle(
    client: *mut SpindaqClient,
    budget_ms: u64,
) -> SpindaqStatus {
    guarded(|| {
        let c = match unsafe { borrow(client) } {
            Ok(c) => c,
            Err(code) => return code,
        };
        match c.wait_idle(Duration::from_millis(budget_ms)) {
            Ok(_) => SpindaqStatusOk,
            Err(e) => client_fail(e),
        }
    })
}

/// Read up to `count` packets starting at `offset` (READ). Sequence mode
/// reads are positional in the finished store and repeatable; continuous
/// mode consumes the ring. Writes at most `count` packets into `out` and
/// stores the number written in `written`.
///
/// # Safety
/// `out` must be writable for `count` packets, `written` for one usize.
#[no_mangle]
pub unsafe extern "C" fn spindaq_client_read(
    client: *mut SpindaqClient,
    offset: u32,
    count: u16,
    out: *mut SpindaqPacket,
    written: *mut usize,
) -> SpindaqStatus {
    guarded(|| {
        let c = match unsafe { borrow(client) } {
            Ok(c) => c,
            Err(code) => return code,
        };
        if out.is_null() || written.is_null() {
            return fail(SpindaqStatusInvalidArgument, "out or written pointer is null");
        }
        match c.read(offset, count) {
            Ok(packets) => {
                for (i, p) in packets.iter().enumerate() {
                    unsafe {
                        *out.add(i) = SpindaqPacket {
                            timestamp_ns: p.timestamp_ns,
                            point_index: p.point_index,
                            ch1: p.ch1,
                            ch2: p.ch2,
                            photon_count: p.photon_count,
                        };
                    }
                }
                unsafe { *written = packets.len() };
                SpindaqStatusOk
            }
            Err(e) => client_fail(e),
        }
    })
}
