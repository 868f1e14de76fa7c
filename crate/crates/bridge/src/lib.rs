//! Live steering and telemetry for the ESS haptic engine over WebSocket.

pub mod protocol;
pub mod server;

pub use protocol::{DecodeError, WireMessage, PROTOCOL_VERSION};
pub use server::{Server, ServerConfig, StatsSnapshot, DEFAULT_PORT, PORT_ENV};
