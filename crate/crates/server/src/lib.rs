//! Low-latency generation service.
//!
//! Control messages arrive as single-line JSON over UDP or over a WebSocket
//! bridge for browser clients. One worker thread runs generation; readers hand
//! it work through a single-slot mailbox, so a message still waiting when a
//! newer one arrives is answered `superseded` instead of queueing up latency.

mod latency;
mod mailbox;
mod protocol;
mod server;

pub use latency::{LatencyHistogram, LatencySummary};
pub use mailbox::Mailbox;
pub use protocol::{parse_message, ControlMessage, Reply, Status, MAX_MESSAGE_BYTES};
pub use server::{Generator, Server, ServerConfig, ServerError, DEFAULT_UDP_PORT, DEFAULT_WS_PORT};
