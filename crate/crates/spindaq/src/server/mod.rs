//! Device-side emulation: the acquisition engine and the UDP control server
//! wrapped around it.

pub mod engine;
pub mod udp;

pub use engine::{Engine, EngineError};
pub use udp::Server;
