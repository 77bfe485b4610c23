//! MoQT-lite wire format.
//!
//! Every message is framed as `[type varint][length varint][body]`. Control
//! messages travel on the session's single bidirectional stream; each object
//! travels alone on a unidirectional stream using the same framing. The
//! byte layout is documented with hex examples in `docs/wire.md`.

mod message;
mod varint;

pub use message::{
    decode_control, decode_object, encode_control, encode_object, ControlMessage, ErrorCode,
    FetchMode, ObjectMessage,
};
pub use varint::{decode_varint, encode_varint, VarInt, MAX_VARINT};

use thiserror::Error;

use crate::track::TrackError;

/// Version carried in `ClientSetup`/`ServerSetup`.
pub const PROTOCOL_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("value {0} exceeds the 62-bit varint range")]
    VarIntRange(u64),
    /// The buffer ends before the message does. Not a protocol violation:
    /// read more bytes and retry.
    #[error("need {needed} more byte(s)")]
    Incomplete { needed: usize },
    /// Unknown message type. `frame_len` is the full frame size so callers
    /// may skip it.
    #[error("unknown message type {ty:#x}")]
    UnknownType { ty: u64, frame_len: usize },
    #[error("frame body length does not match its contents")]
    LengthMismatch,
    #[error("malformed message: {0}")]
    Malformed(&'static str),
    #[error("object id must be 0, got {0}")]
    NonZeroObjectId(u64),
    #[error("invalid track: {0}")]
    Track(#[from] TrackError),
}

impl WireError {
    pub fn is_incomplete(&self) -> bool {
        matches!(self, WireError::Incomplete { .. })
    }
}

/// Cursor over a frame body. Running off the end of a body is a length
/// mismatch, since the frame header already promised the size.
pub(crate) struct BodyReader<'a> {
    buf: &'a [u8],
}

impl<'a> BodyReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf }
    }

    pub(crate) fn varint(&mut self) -> Result<u64, WireError> {
        match decode_varint(self.buf) {
            Ok((v, n)) => {
                self.buf = &self.buf[n..];
                Ok(v.get())
            }
            Err(WireError::Incomplete { .. }) => Err(WireError::LengthMismatch),
            Err(e) => Err(e),
        }
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(WireError::LengthMismatch);
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    /// A varint length prefix followed by that many bytes.
    pub(crate) fn prefixed(&mut self) -> Result<&'a [u8], WireError> {
        let len = self.varint()?;
        let len = usize::try_from(len).map_err(|_| WireError::LengthMismatch)?;
        self.bytes(len)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.bytes(1)?[0])
    }

    pub(crate) fn rest(&mut self) -> &'a [u8] {
        std::mem::take(&mut self.buf)
    }

    pub(crate) fn finish(self) -> Result<(), WireError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(WireError::LengthMismatch)
        }
    }
}

pub(crate) fn put_varint(out: &mut Vec<u8>, v: u64) -> Result<(), WireError> {
    VarInt::new(v)?.write(out);
    Ok(())
}

pub(crate) fn put_prefixed(out: &mut Vec<u8>, bytes: &[u8]) -> Result<(), WireError> {
    put_varint(out, bytes.len() as u64)?;
    out.extend_from_slice(bytes);
    Ok(())
}

/// Splits one `[type][length][body]` frame off the front of `buf`.
/// Returns `(type, body, total_frame_len)`.
pub(crate) fn split_frame(buf: &[u8]) -> Result<(u64, &[u8], usize), WireError> {
    let (ty, n1) = decode_varint(buf)?;
    let (len, n2) = decode_varint(&buf[n1..])?;
    let header = n1 + n2;
    let len = usize::try_from(len.get()).map_err(|_| WireError::Malformed("frame too large"))?;
    let total = header
        .checked_add(len)
        .ok_or(WireError::Malformed("frame too large"))?;
    if buf.len() < total {
        return Err(WireError::Incomplete {
            needed: total - buf.len(),
        });
    }
    Ok((ty.get(), &buf[header..total], total))
}

pub(crate) fn frame(ty: u64, body: &[u8]) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::with_capacity(body.len() + 4);
    put_varint(&mut out, ty)?;
    put_varint(&mut out, body.len() as u64)?;
    out.extend_from_slice(body);
    Ok(out)
}
