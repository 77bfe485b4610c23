//! Mapping between DNS questions and track identities, and between DNS
//! responses and object payloads.
//!
//! A track's namespace is three elements: one flag byte, QTYPE and QCLASS.
//! The flag byte holds OPCODE in bits 7-4, RD in bit 3 and CD in bit 2; bits
//! 1-0 are reserved and must be zero. The track name is the lowercase QNAME
//! in uncompressed wire form.

use std::fmt;

use bytes::Bytes;
use thiserror::Error;

use crate::dns::{self, DnsError, Message, Name, Question, RecordType};
use crate::wire::ObjectMessage;

/// Upper bound on namespace plus track name bytes.
pub const MAX_TRACK_IDENTITY: usize = 4096;
/// Fixed size of the three namespace elements.
pub const NAMESPACE_LEN: usize = 5;
pub const MAX_TRACKNAME_LEN: usize = MAX_TRACK_IDENTITY - NAMESPACE_LEN;

const ELEMENT_SIZES: [usize; 3] = [1, 2, 2];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TrackError {
    #[error("namespace has {0} elements, expected 3")]
    ElementCount(usize),
    #[error("namespace element {index} is {len} bytes, expected {expected}")]
    ElementSize {
        index: usize,
        len: usize,
        expected: usize,
    },
    #[error("reserved flag bits set in {0:#04x}")]
    ReservedBits(u8),
    #[error("opcode {0} does not fit in 4 bits")]
    Opcode(u8),
    #[error("track name of {0} bytes exceeds 4091")]
    TooLong(usize),
    #[error("track name is not lowercase")]
    NotCanonical,
    #[error("malformed track name: {0}")]
    Name(#[from] DnsError),
    #[error("message carries {0} questions, expected 1")]
    QuestionCount(usize),
    #[error("message is not a query")]
    NotQuery,
    #[error("message is not a response")]
    NotResponse,
}

/// Validated track identity. Equality and ordering are bytewise.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TrackKey {
    flags: [u8; 1],
    qtype: [u8; 2],
    qclass: [u8; 2],
    trackname: Vec<u8>,
}

impl TrackKey {
    /// Validates raw namespace elements and track name as received on the
    /// wire.
    pub fn from_parts<E: AsRef<[u8]>>(namespace: &[E], trackname: &[u8]) -> Result<Self, TrackError> {
        if namespace.len() != 3 {
            return Err(TrackError::ElementCount(namespace.len()));
        }
        for (index, (e, &expected)) in namespace.iter().zip(&ELEMENT_SIZES).enumerate() {
            let len = e.as_ref().len();
            if len != expected {
                return Err(TrackError::ElementSize { index, len, expected });
            }
        }
        let flags = namespace[0].as_ref()[0];
        if flags & 0b11 != 0 {
            return Err(TrackError::ReservedBits(flags));
        }
        if trackname.len() > MAX_TRACKNAME_LEN {
            return Err(TrackError::TooLong(trackname.len()));
        }
        let name = Name::from_wire(trackname)?;
        if name.canonical() != name {
            return Err(TrackError::NotCanonical);
        }
        let e2 = namespace[1].as_ref();
        let e3 = namespace[2].as_ref();
        Ok(TrackKey {
            flags: [flags],
            qtype: [e2[0], e2[1]],
            qclass: [e3[0], e3[1]],
            trackname: trackname.to_vec(),
        })
    }

    pub fn namespace(&self) -> [&[u8]; 3] {
        [&self.flags, &self.qtype, &self.qclass]
    }

    pub fn trackname(&self) -> &[u8] {
        &self.trackname
    }

    /// Namespace plus track name bytes.
    pub fn identity_len(&self) -> usize {
        NAMESPACE_LEN + self.trackname.len()
    }

    pub fn query(&self) -> TrackQuery {
        track_to_query(self)
    }

    /// Concatenated namespace elements and track name, used for hashing.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.identity_len());
        out.extend_from_slice(&self.flags);
        out.extend_from_slice(&self.qtype);
        out.extend_from_slice(&self.qclass);
        out.extend_from_slice(&self.trackname);
        out
    }

    /// Inverse of [`TrackKey::to_bytes`].
    pub fn from_bytes(b: &[u8]) -> Result<Self, TrackError> {
        if b.len() < NAMESPACE_LEN {
            return Err(TrackError::ElementSize {
                index: 0,
                len: b.len(),
                expected: NAMESPACE_LEN,
            });
        }
        TrackKey::from_parts(&[&b[0..1], &b[1..3], &b[3..5]], &b[5..])
    }
}

impl fmt::Debug for TrackKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TrackKey({self})")
    }
}

impl fmt::Display for TrackKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = self.query();
        write!(f, "{} {}", q.qname, RecordType::from_u16(q.qtype))?;
        if q.qclass != dns::CLASS_IN {
            write!(f, " CLASS{}", q.qclass)?;
        }
        if q.opcode != 0 {
            write!(f, " op{}", q.opcode)?;
        }
        if q.rd {
            f.write_str(" +rd")?;
        }
        if q.cd {
            f.write_str(" +cd")?;
        }
        Ok(())
    }
}

/// The question fields a track identity is built from.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TrackQuery {
    pub opcode: u8,
    pub rd: bool,
    pub cd: bool,
    pub qtype: u16,
    pub qclass: u16,
    pub qname: Name,
}

impl TrackQuery {
    pub fn new(qname: Name, qtype: RecordType, rd: bool) -> Self {
        TrackQuery {
            opcode: 0,
            rd,
            cd: false,
            qtype: qtype.to_u16(),
            qclass: dns::CLASS_IN,
            qname,
        }
    }

    pub fn track_key(&self) -> Result<TrackKey, TrackError> {
        if self.opcode > 15 {
            return Err(TrackError::Opcode(self.opcode));
        }
        let trackname = self.qname.canonical().to_wire();
        if trackname.len() > MAX_TRACKNAME_LEN {
            return Err(TrackError::TooLong(trackname.len()));
        }
        let flags = (self.opcode << 4) | (u8::from(self.rd) << 3) | (u8::from(self.cd) << 2);
        Ok(TrackKey {
            flags: [flags],
            qtype: self.qtype.to_be_bytes(),
            qclass: self.qclass.to_be_bytes(),
            trackname,
        })
    }

    pub fn question(&self) -> Question {
        Question {
            qname: self.qname.clone(),
            qtype: self.qtype,
            qclass: self.qclass,
        }
    }

    /// A query message for this question with the track's flags.
    pub fn to_message(&self, id: u16) -> Message {
        let mut m = Message::query(id, self.question());
        m.header.opcode = self.opcode;
        m.header.rd = self.rd;
        m.header.cd = self.cd;
        m
    }

    fn from_question(opcode: u8, rd: bool, cd: bool, q: &Question) -> Self {
        TrackQuery {
            opcode,
            rd,
            cd,
            qtype: q.qtype,
            qclass: q.qclass,
            qname: q.qname.canonical(),
        }
    }
}

/// Track identity for a single-question query.
pub fn query_to_track(q: &Message) -> Result<TrackKey, TrackError> {
    if q.header.qr {
        return Err(TrackError::NotQuery);
    }
    question_track(q)
}

/// Track identity for the question of any single-question message,
/// request or response.
pub fn question_track(m: &Message) -> Result<TrackKey, TrackError> {
    let [question] = m.questions.as_slice() else {
        return Err(TrackError::QuestionCount(m.questions.len()));
    };
    TrackQuery::from_question(m.header.opcode, m.header.rd, m.header.cd, question).track_key()
}

pub fn track_to_query(t: &TrackKey) -> TrackQuery {
    let flags = t.flags[0];
    TrackQuery {
        opcode: flags >> 4,
        rd: flags & 0x08 != 0,
        cd: flags & 0x04 != 0,
        qtype: u16::from_be_bytes(t.qtype),
        qclass: u16::from_be_bytes(t.qclass),
        // Validated at construction.
        qname: Name::from_wire(&t.trackname).expect("track name validated"),
    }
}

/// Encoded payload for a response: the message with its id zeroed.
pub fn response_payload(resp: &Message) -> Result<Bytes, TrackError> {
    if !resp.header.qr {
        return Err(TrackError::NotResponse);
    }
    let mut m = resp.clone();
    m.header.id = 0;
    Ok(Bytes::from(dns::encode_message(&m)?))
}

pub fn response_to_object(version: u64, request_id: u64, resp: &Message) -> Result<ObjectMessage, TrackError> {
    Ok(ObjectMessage::new(request_id, version, response_payload(resp)?))
}
