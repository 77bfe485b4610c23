//! One QUIC connection carrying one MoQT-lite session.
//!
//! The client opens a bidirectional control stream and writes
//! `ClientSetup`; the server answers with `ServerSetup`. Control frames
//! after that are forwarded to the node in order. Every object arrives on
//! its own unidirectional stream, which is read to the end and decoded as
//! exactly one object.

use std::net::SocketAddr;
use std::time::Duration;

use moqdns_core::transport::{CloseReason, ConnectError, Event, Role, SessionId};
use moqdns_core::wire::{decode_control, decode_object, encode_control, ControlMessage, WireError, PROTOCOL_VERSION};
use quinn::{Connection, ConnectionError, RecvStream, SendStream, TransportErrorCode, VarInt};
use tokio::sync::mpsc;

use crate::runtime::{Link, Msg, Tx};

/// Upper bound on a buffered control frame.
const MAX_CONTROL_FRAME: usize = 64 * 1024;
/// Upper bound on one object stream.
pub(crate) const MAX_OBJECT: usize = 64 * 1024;
/// How long a local close waits for the peer to read queued control data.
const CLOSE_LINGER: Duration = Duration::from_secs(1);

/// TLS alert `no_application_protocol` as a QUIC crypto error.
const NO_APPLICATION_PROTOCOL: u8 = 0x78;

pub(crate) const CODE_CLOSED: u32 = 0;
pub(crate) const CODE_PROTOCOL: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub(crate) enum StreamError {
    #[error("read failed: {0}")]
    Read(#[from] quinn::ReadError),
    #[error("write failed: {0}")]
    Write(#[from] quinn::WriteError),
    #[error("bad frame: {0}")]
    Wire(#[from] WireError),
    #[error("control frame exceeds {MAX_CONTROL_FRAME} bytes")]
    TooLarge,
    #[error("stream ended inside a frame")]
    Truncated,
    #[error("unexpected {0}")]
    Unexpected(&'static str),
}

/// Reads control frames from one stream, keeping leftover bytes between
/// calls.
pub(crate) struct ControlReader {
    recv: RecvStream,
    buf: Vec<u8>,
}

impl ControlReader {
    pub(crate) fn new(recv: RecvStream) -> Self {
        ControlReader { recv, buf: Vec::new() }
    }

    /// Next frame, or `None` once the peer finished the stream cleanly.
    pub(crate) async fn next(&mut self) -> Result<Option<ControlMessage>, StreamError> {
        loop {
            match decode_control(&self.buf) {
                Ok((msg, used)) => {
                    self.buf.drain(..used);
                    return Ok(Some(msg));
                }
                Err(WireError::UnknownType { ty, frame_len }) => {
                    tracing::debug!(ty, "skipping unknown control frame");
                    self.buf.drain(..frame_len);
                    continue;
                }
                Err(e) if e.is_incomplete() => {}
                Err(e) => return Err(e.into()),
            }
            if self.buf.len() > MAX_CONTROL_FRAME {
                return Err(StreamError::TooLarge);
            }
            let mut chunk = [0u8; 4096];
            match self.recv.read(&mut chunk).await? {
                Some(n) => self.buf.extend_from_slice(&chunk[..n]),
                None if self.buf.is_empty() => return Ok(None),
                None => return Err(StreamError::Truncated),
            }
        }
    }
}

async fn write_frame(send: &mut SendStream, msg: &ControlMessage) -> Result<(), StreamError> {
    send.write_all(&encode_control(msg)?).await?;
    Ok(())
}

pub(crate) fn connect_error(e: ConnectionError) -> ConnectError {
    match e {
        ConnectionError::ConnectionClosed(c) if c.error_code == TransportErrorCode::crypto(NO_APPLICATION_PROTOCOL) => {
            ConnectError::AlpnMismatch
        }
        ConnectionError::TransportError(t) if t.code == TransportErrorCode::crypto(NO_APPLICATION_PROTOCOL) => {
            ConnectError::AlpnMismatch
        }
        ConnectionError::TimedOut => ConnectError::Timeout,
        ConnectionError::ConnectionClosed(_) | ConnectionError::ApplicationClosed(_) | ConnectionError::Reset => {
            ConnectError::Refused
        }
        other => ConnectError::Setup(other.to_string()),
    }
}

fn close_reason(e: &ConnectionError) -> CloseReason {
    match e {
        ConnectionError::LocallyClosed => CloseReason::Local,
        ConnectionError::TimedOut => CloseReason::Timeout,
        ConnectionError::ApplicationClosed(c) if c.error_code == VarInt::from_u32(CODE_CLOSED) => CloseReason::Remote,
        ConnectionError::Reset => CloseReason::Remote,
        other => CloseReason::Error(other.to_string()),
    }
}

/// Client half of the setup exchange on a fresh connection.
pub(crate) async fn client_setup(conn: &Connection) -> Result<(SendStream, ControlReader), ConnectError> {
    let setup_err = |e: StreamError| ConnectError::Setup(e.to_string());
    let (mut send, recv) = conn.open_bi().await.map_err(connect_error)?;
    write_frame(
        &mut send,
        &ControlMessage::ClientSetup {
            supported_version: PROTOCOL_VERSION,
        },
    )
    .await
    .map_err(setup_err)?;
    let mut reader = ControlReader::new(recv);
    match reader.next().await {
        Ok(Some(ControlMessage::ServerSetup { selected_version })) if selected_version == PROTOCOL_VERSION => {
            Ok((send, reader))
        }
        Ok(Some(ControlMessage::ServerSetup { selected_version })) => {
            Err(ConnectError::Setup(format!("server selected version {selected_version}")))
        }
        Ok(Some(other)) => Err(ConnectError::Setup(format!("expected server_setup, got {}", other.kind()))),
        Ok(None) => Err(ConnectError::Refused),
        Err(StreamError::Read(quinn::ReadError::ConnectionLost(e))) => Err(connect_error(e)),
        Err(e) => Err(setup_err(e)),
    }
}

/// Server half of the setup exchange.
pub(crate) async fn server_setup(conn: &Connection) -> Result<(SendStream, ControlReader), StreamError> {
    let (mut send, recv) = conn.accept_bi().await.map_err(quinn::ReadError::ConnectionLost)?;
    let mut reader = ControlReader::new(recv);
    match reader.next().await? {
        Some(ControlMessage::ClientSetup { supported_version }) if supported_version == PROTOCOL_VERSION => {}
        Some(ControlMessage::ClientSetup { .. }) => return Err(StreamError::Unexpected("protocol version")),
        Some(_) => return Err(StreamError::Unexpected("control frame before client_setup")),
        None => return Err(StreamError::Truncated),
    }
    write_frame(
        &mut send,
        &ControlMessage::ServerSetup {
            selected_version: PROTOCOL_VERSION,
        },
    )
    .await?;
    Ok((send, reader))
}

pub(crate) enum WriterCmd {
    Frame(Vec<u8>),
    /// Flush, finish the stream and close the connection.
    Close,
}

/// Announces the session to the event loop and starts its tasks.
pub(crate) fn established(
    id: SessionId,
    role: Role,
    conn: Connection,
    send: SendStream,
    reader: ControlReader,
    tx: Tx,
) {
    let peer: SocketAddr = conn.remote_address();
    let (ctl, ctl_rx) = mpsc::unbounded_channel();
    let link = Link { conn: conn.clone(), ctl };
    if tx.send(Msg::Up { id, peer, role, link }).is_err() {
        conn.close(VarInt::from_u32(CODE_CLOSED), b"shutdown");
        return;
    }
    tokio::spawn(write_control(conn.clone(), send, ctl_rx));
    tokio::spawn(read_control(id, conn.clone(), reader, tx.clone()));
    tokio::spawn(read_objects(id, conn.clone(), tx.clone()));
    tokio::spawn(async move {
        let reason = close_reason(&conn.closed().await);
        let _ = tx.send(Msg::Down { id, reason });
    });
}

fn violation(id: SessionId, conn: &Connection, tx: &Tx, why: String) {
    tracing::debug!(%id, %why, "closing session");
    let _ = tx.send(Msg::Down {
        id,
        reason: CloseReason::Error(why),
    });
    conn.close(VarInt::from_u32(CODE_PROTOCOL), b"protocol violation");
}

async fn write_control(conn: Connection, mut send: SendStream, mut rx: mpsc::UnboundedReceiver<WriterCmd>) {
    while let Some(cmd) = rx.recv().await {
        match cmd {
            WriterCmd::Frame(bytes) => {
                if let Err(e) = send.write_all(&bytes).await {
                    tracing::debug!(error = %e, "control write failed");
                    return;
                }
            }
            WriterCmd::Close => {
                let _ = send.finish();
                let _ = tokio::time::timeout(CLOSE_LINGER, send.stopped()).await;
                conn.close(VarInt::from_u32(CODE_CLOSED), b"closed");
                return;
            }
        }
    }
}

async fn read_control(id: SessionId, conn: Connection, mut reader: ControlReader, tx: Tx) {
    loop {
        match reader.next().await {
            Ok(Some(msg @ (ControlMessage::ClientSetup { .. } | ControlMessage::ServerSetup { .. }))) => {
                return violation(id, &conn, &tx, format!("repeated {}", msg.kind()));
            }
            Ok(Some(msg)) => {
                if tx.send(Msg::Event(Event::Control { session: id, msg })).is_err() {
                    return;
                }
            }
            Ok(None) => return,
            Err(StreamError::Read(quinn::ReadError::ConnectionLost(_))) => return,
            Err(e) => return violation(id, &conn, &tx, e.to_string()),
        }
    }
}

async fn read_objects(id: SessionId, conn: Connection, tx: Tx) {
    while let Ok(mut recv) = conn.accept_uni().await {
        let (conn, tx) = (conn.clone(), tx.clone());
        tokio::spawn(async move {
            let bytes = match recv.read_to_end(MAX_OBJECT).await {
                Ok(b) => b,
                // A reset stream delivers nothing.
                Err(e) => return tracing::debug!(error = %e, "object stream dropped"),
            };
            match decode_object(&bytes) {
                Ok((obj, used)) if used == bytes.len() => {
                    let _ = tx.send(Msg::Event(Event::Object { session: id, obj }));
                }
                Ok(_) => violation(id, &conn, &tx, "trailing bytes after object".into()),
                Err(e) => violation(id, &conn, &tx, e.to_string()),
            }
        });
    }
}
