//! Software emulation of a ZYNQ-based mixed-signal data acquisition and
//! signal generation instrument, as used for optically detected magnetic
//! resonance (ODMR) on nitrogen-vacancy centers.
//!
//! The crate is split along the hardware/firmware boundaries of the original
//! instrument:
//!
//! * [`codec`] — ADC sample encoding, thermal bias model, acquisition packet
//!   wire format.
//! * [`msg`] — the mixed-signal generator: DDS tone synthesis and PWM pulse
//!   trains on a 125 MHz tick.
//! * [`sap`] — the sampling processor: trigger classification, windowed and
//!   continuous acquisition, ring buffering.
//! * [`nv`] — spin physics used to synthesize realistic detector signals.
//! * [`proto`] — the UDP control protocol (framing, CRC, command payloads).
//! * [`server`] — the emulated device: one UDP endpoint wired to an
//!   acquisition worker.
//! * [`client`] / [`experiments`] — host-side SDK: reliable reads plus the
//!   cw-ODMR, Rabi, pulsed-ODMR and lock-in measurement flows.
//! * [`lockin`], [`fit`] — analysis: software lock-in demodulation and
//!   weighted Levenberg-Marquardt fitting.

pub mod codec;
pub mod config;
pub mod csvio;
pub mod experiments;
pub mod fit;
pub mod lockin;
pub mod msg;
pub mod net;
pub mod nv;
pub mod plot;
pub mod proto;
pub mod sap;
pub mod server;

pub mod client;
