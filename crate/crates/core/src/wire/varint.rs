//! QUIC-style variable-length integers: the two most significant bits of the
//! first byte give the encoded length (1, 2, 4 or 8 bytes).

use std::fmt;

use super::WireError;

/// Largest value a varint can carry, `2^62 - 1`.
pub const MAX_VARINT: u64 = (1 << 62) - 1;

/// An integer known to fit the 62-bit varint range.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarInt(u64);

impl VarInt {
    pub const MAX: VarInt = VarInt(MAX_VARINT);

    pub fn new(value: u64) -> Result<Self, WireError> {
        if value > MAX_VARINT {
            Err(WireError::VarIntRange(value))
        } else {
            Ok(VarInt(value))
        }
    }

    pub const fn from_u32(value: u32) -> Self {
        VarInt(value as u64)
    }

    pub const fn get(self) -> u64 {
        self.0
    }

    /// Number of bytes the canonical encoding occupies.
    pub const fn encoded_len(self) -> usize {
        match self.0 {
            0..=0x3f => 1,
            0x40..=0x3fff => 2,
            0x4000..=0x3fff_ffff => 4,
            _ => 8,
        }
    }

    pub fn write(self, out: &mut Vec<u8>) {
        let v = self.0;
        match self.encoded_len() {
            1 => out.push(v as u8),
            2 => out.extend_from_slice(&((v as u16) | 0x4000).to_be_bytes()),
            4 => out.extend_from_slice(&((v as u32) | 0x8000_0000).to_be_bytes()),
            _ => out.extend_from_slice(&(v | 0xc000_0000_0000_0000).to_be_bytes()),
        }
    }
}

impl TryFrom<u64> for VarInt {
    type Error = WireError;

    fn try_from(value: u64) -> Result<Self, WireError> {
        VarInt::new(value)
    }
}

impl From<VarInt> for u64 {
    fn from(v: VarInt) -> u64 {
        v.0
    }
}

impl fmt::Display for VarInt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Canonical (minimal-length) encoding of `value`.
pub fn encode_varint(value: u64) -> Result<Vec<u8>, WireError> {
    let v = VarInt::new(value)?;
    let mut out = Vec::with_capacity(v.encoded_len());
    v.write(&mut out);
    Ok(out)
}

/// Decodes one varint from the front of `buf`, returning the value and the
/// number of bytes consumed. Non-minimal encodings are accepted.
pub fn decode_varint(buf: &[u8]) -> Result<(VarInt, usize), WireError> {
    let first = *buf.first().ok_or(WireError::Incomplete { needed: 1 })?;
    let len = 1usize << (first >> 6);
    if buf.len() < len {
        return Err(WireError::Incomplete {
            needed: len - buf.len(),
        });
    }
    let mut value = u64::from(first & 0x3f);
    for b in &buf[1..len] {
        value = (value << 8) | u64::from(*b);
    }
    Ok((VarInt(value), len))
}
