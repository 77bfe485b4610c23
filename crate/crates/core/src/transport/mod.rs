//! The I/O interface daemons are written against.
//!
//! A daemon is a [`Node`]: it receives [`Event`]s and acts through a
//! [`Transport`]. The transport owns connection setup, including the
//! `ClientSetup`/`ServerSetup` exchange and keepalive, so nodes only ever
//! see established sessions and post-setup control messages.
//!
//! Two bindings exist: [`sim::SimNetwork`] (deterministic, logical clock)
//! and the QUIC runtime in the `moqdns-net` crate.

pub mod sim;

use std::any::Any;
use std::fmt;
use std::net::SocketAddr;
use std::time::Duration;

use bytes::Bytes;
use thiserror::Error;

use crate::track::TrackKey;
use crate::wire::{ControlMessage, ObjectMessage};
use crate::Time;

/// ALPN token of the MoQT-lite profile.
pub const ALPN: &[u8] = b"dnsmoqt-lite/1";
pub const DEFAULT_MOQT_PORT: u16 = 853;
pub const DEFAULT_DNS_PORT: u16 = 53;
pub const DEFAULT_KEEPALIVE: Duration = Duration::from_secs(30);
/// A session is declared dead after this many keepalive intervals without
/// hearing from the peer.
pub const KEEPALIVE_MISSES: u32 = 3;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SessionId(pub u64);

impl fmt::Debug for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Which end of a session a node is.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Client,
    Server,
}

/// The two UDP sockets a node may use: the service socket clients send
/// queries to, and the socket the node itself sends queries from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SocketKind {
    Service,
    Client,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ConnectError {
    #[error("connection refused")]
    Refused,
    #[error("peer does not speak the requested ALPN")]
    AlpnMismatch,
    #[error("handshake timed out")]
    Timeout,
    #[error("setup failed: {0}")]
    Setup(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CloseReason {
    /// Closed by this node.
    Local,
    /// The peer closed the session or went away cleanly.
    Remote,
    /// Keepalive or idle timeout.
    Timeout,
    /// Protocol violation or transport error.
    Error(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum SendError {
    #[error("session is closed")]
    SessionClosed,
    #[error("session is not established yet")]
    NotEstablished,
    #[error("encoding failed: {0}")]
    Encode(String),
}

#[derive(Clone, Debug)]
pub enum Event {
    /// Delivered once when the node is installed or restarted.
    Start,
    SessionUp {
        session: SessionId,
        peer: SocketAddr,
        role: Role,
    },
    /// An outbound `open_session` did not succeed.
    SessionFailed {
        session: SessionId,
        peer: SocketAddr,
        error: ConnectError,
    },
    SessionClosed {
        session: SessionId,
        reason: CloseReason,
    },
    Control {
        session: SessionId,
        msg: ControlMessage,
    },
    Object {
        session: SessionId,
        obj: ObjectMessage,
    },
    Udp {
        socket: SocketKind,
        from: SocketAddr,
        payload: Bytes,
    },
    Timer(u64),
}

/// Facts a node reports for measurement. Bindings without a metrics sink
/// drop them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Observation {
    /// The answer this node holds for `track` changed.
    Answer {
        track: TrackKey,
        group: u64,
        fingerprint: [u8; 32],
    },
    /// A client-side lookup completed.
    Lookup {
        track: TrackKey,
        started: Time,
        ok: bool,
    },
}

pub trait Transport {
    fn now(&self) -> Time;

    /// Starts connecting to `peer`. The outcome arrives later as
    /// `SessionUp` or `SessionFailed` carrying the returned id.
    fn open_session(&mut self, peer: SocketAddr, alpn: &[u8]) -> SessionId;

    fn send_control(&mut self, session: SessionId, msg: ControlMessage) -> Result<(), SendError>;

    /// Sends one object on a fresh unidirectional stream.
    fn send_object(&mut self, session: SessionId, obj: ObjectMessage) -> Result<(), SendError>;

    /// Closes the session. No `SessionClosed` event is delivered locally.
    fn close_session(&mut self, session: SessionId);

    fn is_live(&self, session: SessionId) -> bool;

    fn send_udp(&mut self, socket: SocketKind, to: SocketAddr, payload: Bytes);

    /// Schedules `Event::Timer(token)` at `at`. Timers cannot be
    /// cancelled; nodes ignore tokens they no longer expect.
    fn set_timer(&mut self, at: Time, token: u64);

    fn record(&mut self, _obs: Observation) {}
}

/// An event-driven daemon.
pub trait Node: Any {
    fn handle(&mut self, event: Event, io: &mut dyn Transport);

    /// Called before a clean stop. The node may still send messages.
    fn shutdown(&mut self, _io: &mut dyn Transport) {}
}

/// Hands out timer tokens and remembers what each one is for.
#[derive(Debug)]
pub struct Timers<K> {
    next: u64,
    pending: std::collections::BTreeMap<u64, K>,
}

impl<K> Default for Timers<K> {
    fn default() -> Self {
        Timers {
            next: 1,
            pending: std::collections::BTreeMap::new(),
        }
    }
}

impl<K> Timers<K> {
    pub fn set(&mut self, io: &mut dyn Transport, at: Time, kind: K) -> u64 {
        let token = self.next;
        self.next += 1;
        self.pending.insert(token, kind);
        io.set_timer(at, token);
        token
    }

    /// Removes and returns the purpose of a fired timer.
    pub fn fire(&mut self, token: u64) -> Option<K> {
        self.pending.remove(&token)
    }

    pub fn cancel(&mut self, token: u64) {
        self.pending.remove(&token);
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }
}
