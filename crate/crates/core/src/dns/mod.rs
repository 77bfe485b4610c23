//! The subset of RFC 1035 this system needs: header, question and resource
//! record sections, with typed rdata for A, AAAA, NS, CNAME, TXT and opaque
//! HTTPS. Other types are carried verbatim.
//!
//! Encoding never emits compression pointers, so equal messages always
//! produce equal bytes. Decoding accepts compression for interop with
//! ordinary UDP responders.

mod codec;
mod name;
mod rdata;

use std::fmt;
use std::net::{Ipv4Addr, Ipv6Addr};

use sha2::{Digest, Sha256};
use thiserror::Error;

pub use codec::{decode_message, encode_message};
pub use name::{canonicalize_name, Name, MAX_LABEL_LEN, MAX_NAME_WIRE_LEN};
pub use rdata::resolve_name;

pub const CLASS_IN: u16 = 1;
pub const HEADER_LEN: usize = 12;

pub mod rcode {
    pub const NOERROR: u8 = 0;
    pub const FORMERR: u8 = 1;
    pub const SERVFAIL: u8 = 2;
    pub const NXDOMAIN: u8 = 3;
    pub const NOTIMP: u8 = 4;
    pub const REFUSED: u8 = 5;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DnsError {
    #[error("message truncated")]
    Truncated,
    #[error("label of {0} bytes exceeds 63")]
    LabelTooLong(usize),
    #[error("name of {0} wire bytes exceeds 255")]
    NameTooLong(usize),
    #[error("empty label inside a name")]
    EmptyLabel,
    #[error("non-ASCII label")]
    NonAsciiLabel,
    #[error("compression pointer loop")]
    PointerLoop,
    #[error("compression pointer to offset {0} points forward")]
    ForwardPointer(usize),
    #[error("unsupported label type {0:#04x}")]
    BadLabelType(u8),
    #[error("trailing bytes after the last section")]
    TrailingData,
    #[error("bad rdata length {len} for type {rtype}")]
    RdataLength { rtype: u16, len: usize },
    #[error("section holds more than 65535 entries")]
    SectionOverflow,
    #[error("{field} value {value} out of range")]
    FieldRange { field: &'static str, value: u8 },
    #[error("TXT string longer than 255 bytes")]
    TxtTooLong,
    #[error("invalid presentation data: {0}")]
    Presentation(String),
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RecordType {
    A,
    Ns,
    Cname,
    Txt,
    Aaaa,
    Https,
    Other(u16),
}

impl RecordType {
    pub const fn to_u16(self) -> u16 {
        match self {
            RecordType::A => 1,
            RecordType::Ns => 2,
            RecordType::Cname => 5,
            RecordType::Txt => 16,
            RecordType::Aaaa => 28,
            RecordType::Https => 65,
            RecordType::Other(v) => v,
        }
    }

    pub const fn from_u16(v: u16) -> Self {
        match v {
            1 => RecordType::A,
            2 => RecordType::Ns,
            5 => RecordType::Cname,
            16 => RecordType::Txt,
            28 => RecordType::Aaaa,
            65 => RecordType::Https,
            other => RecordType::Other(other),
        }
    }

    pub fn parse(s: &str) -> Result<Self, DnsError> {
        let upper = s.to_ascii_uppercase();
        Ok(match upper.as_str() {
            "A" => RecordType::A,
            "NS" => RecordType::Ns,
            "CNAME" => RecordType::Cname,
            "TXT" => RecordType::Txt,
            "AAAA" => RecordType::Aaaa,
            "HTTPS" => RecordType::Https,
            _ => match upper.strip_prefix("TYPE").and_then(|n| n.parse::<u16>().ok()) {
                Some(v) => RecordType::from_u16(v),
                None => return Err(DnsError::Presentation(format!("unknown type {s}"))),
            },
        })
    }
}

impl fmt::Display for RecordType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecordType::A => f.write_str("A"),
            RecordType::Ns => f.write_str("NS"),
            RecordType::Cname => f.write_str("CNAME"),
            RecordType::Txt => f.write_str("TXT"),
            RecordType::Aaaa => f.write_str("AAAA"),
            RecordType::Https => f.write_str("HTTPS"),
            RecordType::Other(v) => write!(f, "TYPE{v}"),
        }
    }
}

impl fmt::Debug for RecordType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RData {
    A(Ipv4Addr),
    Aaaa(Ipv6Addr),
    Ns(Name),
    Cname(Name),
    Txt(Vec<Vec<u8>>),
    /// HTTPS rdata, kept as raw bytes.
    Https(Vec<u8>),
    Unknown { rtype: u16, data: Vec<u8> },
}

impl RData {
    pub fn record_type(&self) -> RecordType {
        match self {
            RData::A(_) => RecordType::A,
            RData::Aaaa(_) => RecordType::Aaaa,
            RData::Ns(_) => RecordType::Ns,
            RData::Cname(_) => RecordType::Cname,
            RData::Txt(_) => RecordType::Txt,
            RData::Https(_) => RecordType::Https,
            RData::Unknown { rtype, .. } => RecordType::from_u16(*rtype),
        }
    }

    pub fn parse(rtype: RecordType, text: &str, origin: &Name) -> Result<RData, DnsError> {
        rdata::parse_presentation(rtype, text, origin)
    }

    /// Wire bytes of the rdata alone (names uncompressed).
    pub fn to_wire(&self) -> Result<Vec<u8>, DnsError> {
        let mut out = Vec::new();
        codec::write_rdata(self, &mut out)?;
        Ok(out)
    }
}

impl fmt::Display for RData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        rdata::fmt_presentation(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ResourceRecord {
    pub name: Name,
    pub class: u16,
    pub ttl: u32,
    pub data: RData,
}

impl ResourceRecord {
    pub fn new(name: Name, ttl: u32, data: RData) -> Self {
        Self {
            name,
            class: CLASS_IN,
            ttl,
            data,
        }
    }

    pub fn rtype(&self) -> RecordType {
        self.data.record_type()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Question {
    pub qname: Name,
    pub qtype: u16,
    pub qclass: u16,
}

impl Question {
    pub fn new(qname: Name, qtype: RecordType) -> Self {
        Self {
            qname,
            qtype: qtype.to_u16(),
            qclass: CLASS_IN,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Header {
    pub id: u16,
    pub qr: bool,
    pub opcode: u8,
    pub aa: bool,
    pub tc: bool,
    pub rd: bool,
    pub ra: bool,
    pub ad: bool,
    pub cd: bool,
    pub rcode: u8,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Message {
    pub header: Header,
    pub questions: Vec<Question>,
    pub answers: Vec<ResourceRecord>,
    pub authority: Vec<ResourceRecord>,
    pub additional: Vec<ResourceRecord>,
}

impl Message {
    /// A standard query with RD set and the given id.
    pub fn query(id: u16, question: Question) -> Self {
        Message {
            header: Header {
                id,
                rd: true,
                ..Header::default()
            },
            questions: vec![question],
            ..Message::default()
        }
    }

    /// An empty response echoing the request's id, opcode, RD/CD bits and
    /// question section.
    pub fn response_to(request: &Message) -> Self {
        Message {
            header: Header {
                id: request.header.id,
                qr: true,
                opcode: request.header.opcode,
                rd: request.header.rd,
                cd: request.header.cd,
                ..Header::default()
            },
            questions: request.questions.clone(),
            ..Message::default()
        }
    }

    pub fn is_referral(&self) -> bool {
        self.header.rcode == rcode::NOERROR
            && !self.header.aa
            && self.answers.is_empty()
            && self.authority.iter().any(|r| r.rtype() == RecordType::Ns)
    }

    /// Smallest TTL among the answer records, if any.
    pub fn min_answer_ttl(&self) -> Option<u32> {
        self.answers.iter().map(|r| r.ttl).min()
    }

    /// Digest of the answer content ignoring header, TTLs and record order.
    /// Two messages carrying the same data from different tiers or paths
    /// compare equal.
    pub fn answer_fingerprint(&self) -> [u8; 32] {
        let mut rows: Vec<Vec<u8>> = self
            .answers
            .iter()
            .map(|r| {
                let mut row = r.name.canonical().to_wire();
                row.extend_from_slice(&r.rtype().to_u16().to_be_bytes());
                row.extend_from_slice(&r.data.to_wire().unwrap_or_default());
                row
            })
            .collect();
        rows.sort();
        let mut h = Sha256::new();
        h.update([self.header.rcode]);
        for row in rows {
            h.update((row.len() as u32).to_be_bytes());
            h.update(&row);
        }
        h.finalize().into()
    }
}
