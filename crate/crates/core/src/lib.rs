//! Publish-subscribe DNS carried over a minimal Media-over-QUIC Transport
//! profile ("MoQT-lite").
//!
//! The crate is organised bottom-up:
//!
//! - [`wire`]: varints and the MoQT-lite control/object frames.
//! - [`dns`]: the RFC 1035 message subset used as object payloads and on the
//!   classic UDP path.
//! - [`track`]: mapping DNS questions to track identities and responses to
//!   objects.
//! - [`transport`]: the sans-IO [`transport::Transport`] interface every
//!   daemon is written against, plus the deterministic
//!   [`transport::sim::SimNetwork`].
//! - [`authoritative`], [`recursive`], [`forwarder`]: the three daemons.
//! - [`harness`]: scenarios, workloads, metrics and the cost model.
//!
//! All daemons are event-driven state machines. They never touch sockets
//! or clocks directly, so the same code runs under the simulator and under
//! the QUIC runtime in the `moqdns-net` crate.

pub mod authoritative;
pub mod dns;
pub mod forwarder;
pub mod harness;
pub mod history;
pub mod recursive;
pub mod time;
pub mod track;
pub mod transport;
pub mod wire;

pub use time::Time;
