use std::fmt::{self, Write as _};

use super::{DnsError, Name, RData, RecordType};

fn bad(msg: impl Into<String>) -> DnsError {
    DnsError::Presentation(msg.into())
}

/// Resolves a presentation-form name against `origin`. `@` is the origin
/// itself; names without a trailing dot are relative.
pub fn resolve_name(text: &str, origin: &Name) -> Result<Name, DnsError> {
    let text = text.trim();
    if text == "@" {
        return Ok(origin.clone());
    }
    if text.ends_with('.') {
        return Name::parse(text);
    }
    let rel = Name::parse(text)?;
    let labels = rel.labels().iter().chain(origin.labels());
    Name::from_labels(labels)
}

pub(super) fn parse_presentation(rtype: RecordType, text: &str, origin: &Name) -> Result<RData, DnsError> {
    let text = text.trim();
    if let Some(generic) = text.strip_prefix("\\#") {
        let bytes = parse_generic(generic)?;
        return wire_to_rdata(rtype, bytes);
    }
    match rtype {
        RecordType::A => text
            .parse()
            .map(RData::A)
            .map_err(|_| bad(format!("bad IPv4 address {text:?}"))),
        RecordType::Aaaa => text
            .parse()
            .map(RData::Aaaa)
            .map_err(|_| bad(format!("bad IPv6 address {text:?}"))),
        RecordType::Ns => resolve_name(text, origin).map(RData::Ns),
        RecordType::Cname => resolve_name(text, origin).map(RData::Cname),
        RecordType::Txt => parse_txt(text).map(RData::Txt),
        RecordType::Https | RecordType::Other(_) => Err(bad(format!(
            "{rtype} rdata must use the generic \\# form"
        ))),
    }
}

fn wire_to_rdata(rtype: RecordType, bytes: Vec<u8>) -> Result<RData, DnsError> {
    let len_err = |len| DnsError::RdataLength {
        rtype: rtype.to_u16(),
        len,
    };
    Ok(match rtype {
        RecordType::A => {
            let len = bytes.len();
            let b: [u8; 4] = bytes.try_into().map_err(|_| len_err(len))?;
            RData::A(b.into())
        }
        RecordType::Aaaa => {
            let len = bytes.len();
            let b: [u8; 16] = bytes.try_into().map_err(|_| len_err(len))?;
            RData::Aaaa(b.into())
        }
        RecordType::Ns => RData::Ns(Name::from_wire(&bytes)?),
        RecordType::Cname => RData::Cname(Name::from_wire(&bytes)?),
        RecordType::Txt => {
            let mut strings = Vec::new();
            let mut at = 0;
            while at < bytes.len() {
                let n = usize::from(bytes[at]);
                let s = bytes.get(at + 1..at + 1 + n).ok_or(len_err(bytes.len()))?;
                strings.push(s.to_vec());
                at += 1 + n;
            }
            RData::Txt(strings)
        }
        RecordType::Https => RData::Https(bytes),
        RecordType::Other(t) => RData::Unknown { rtype: t, data: bytes },
    })
}

/// RFC 3597 generic rdata: `<len> <hex>...`, hex possibly split by spaces.
fn parse_generic(text: &str) -> Result<Vec<u8>, DnsError> {
    let mut parts = text.split_whitespace();
    let len: usize = parts
        .next()
        .and_then(|l| l.parse().ok())
        .ok_or_else(|| bad("generic rdata needs a length"))?;
    let hex: String = parts.collect();
    if !hex.len().is_multiple_of(2) {
        return Err(bad("odd number of hex digits"));
    }
    let bytes = (0..hex.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&hex[i..i + 2], 16))
        .collect::<Result<Vec<u8>, _>>()
        .map_err(|_| bad("invalid hex digit"))?;
    if bytes.len() != len {
        return Err(bad(format!("generic rdata length {len} but {} bytes given", bytes.len())));
    }
    Ok(bytes)
}

/// One or more character strings, each either quoted (with `\"` and `\\`
/// escapes) or a bare word.
fn parse_txt(text: &str) -> Result<Vec<Vec<u8>>, DnsError> {
    let mut out = Vec::new();
    let mut chars = text.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        let Some(&first) = chars.peek() else { break };
        let mut s = String::new();
        if first == '"' {
            chars.next();
            let mut closed = false;
            while let Some(c) = chars.next() {
                match c {
                    '\\' => s.push(chars.next().ok_or_else(|| bad("dangling escape"))?),
                    '"' => {
                        closed = true;
                        break;
                    }
                    c => s.push(c),
                }
            }
            if !closed {
                return Err(bad("unterminated TXT string"));
            }
        } else {
            while let Some(&c) = chars.peek() {
                if c.is_whitespace() {
                    break;
                }
                s.push(c);
                chars.next();
            }
        }
        if s.len() > 255 {
            return Err(DnsError::TxtTooLong);
        }
        out.push(s.into_bytes());
    }
    if out.is_empty() {
        out.push(Vec::new());
    }
    Ok(out)
}

pub(super) fn fmt_presentation(data: &RData, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    match data {
        RData::A(ip) => write!(f, "{ip}"),
        RData::Aaaa(ip) => write!(f, "{ip}"),
        RData::Ns(n) | RData::Cname(n) => write!(f, "{n}"),
        RData::Txt(strings) => {
            for (i, s) in strings.iter().enumerate() {
                if i > 0 {
                    f.write_char(' ')?;
                }
                f.write_char('"')?;
                for &b in s {
                    match b {
                        b'"' | b'\\' => write!(f, "\\{}", b as char)?,
                        0x20..=0x7e => f.write_char(b as char)?,
                        _ => write!(f, "\\{b:03}")?,
                    }
                }
                f.write_char('"')?;
            }
            Ok(())
        }
        RData::Https(bytes) | RData::Unknown { data: bytes, .. } => {
            write!(f, "\\# {}", bytes.len())?;
            if !bytes.is_empty() {
                f.write_char(' ')?;
                for b in bytes {
                    write!(f, "{b:02x}")?;
                }
            }
            Ok(())
        }
    }
}
