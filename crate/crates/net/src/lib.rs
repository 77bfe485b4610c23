//! QUIC binding for the moqdns daemons.
//!
//! [`Runtime`] owns a QUIC endpoint speaking ALPN `dnsmoqt-lite/1`, an
//! optional classic DNS service socket and a client UDP socket, and drives
//! one [`moqdns_core::transport::Node`] with the same events the simulator
//! produces. Keepalive is QUIC PING every [`NetConfig::keepalive`]; a peer
//! silent for three intervals hits the idle timeout and its session closes
//! with [`moqdns_core::transport::CloseReason::Timeout`].

mod runtime;
mod session;
pub mod tls;

pub use runtime::{Handle, NetConfig, Runtime};
pub use tls::{parse_fingerprint, Fingerprint, Identity, Verify};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: std::net::SocketAddr,
        source: std::io::Error,
    },
    #[error("tls: {0}")]
    Tls(String),
    #[error("quic: {0}")]
    Quic(String),
    #[error("runtime is not running")]
    NotRunning,
    #[error("node has a different type")]
    WrongNode,
}
