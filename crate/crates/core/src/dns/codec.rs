use std::net::{Ipv4Addr, Ipv6Addr};

use super::name::{check_label, MAX_NAME_WIRE_LEN};
use super::{DnsError, Header, Message, Name, Question, RData, RecordType, ResourceRecord, HEADER_LEN};

pub fn encode_message(msg: &Message) -> Result<Vec<u8>, DnsError> {
    let h = &msg.header;
    if h.opcode > 15 {
        return Err(DnsError::FieldRange {
            field: "opcode",
            value: h.opcode,
        });
    }
    if h.rcode > 15 {
        return Err(DnsError::FieldRange {
            field: "rcode",
            value: h.rcode,
        });
    }
    let count = |n: usize| u16::try_from(n).map_err(|_| DnsError::SectionOverflow);

    let mut out = Vec::with_capacity(512);
    out.extend_from_slice(&h.id.to_be_bytes());
    out.push(
        (u8::from(h.qr) << 7) | (h.opcode << 3) | (u8::from(h.aa) << 2) | (u8::from(h.tc) << 1) | u8::from(h.rd),
    );
    out.push((u8::from(h.ra) << 7) | (u8::from(h.ad) << 5) | (u8::from(h.cd) << 4) | h.rcode);
    for n in [
        msg.questions.len(),
        msg.answers.len(),
        msg.authority.len(),
        msg.additional.len(),
    ] {
        out.extend_from_slice(&count(n)?.to_be_bytes());
    }
    for q in &msg.questions {
        write_name(&q.qname, &mut out)?;
        out.extend_from_slice(&q.qtype.to_be_bytes());
        out.extend_from_slice(&q.qclass.to_be_bytes());
    }
    for rr in msg.answers.iter().chain(&msg.authority).chain(&msg.additional) {
        write_name(&rr.name, &mut out)?;
        out.extend_from_slice(&rr.rtype().to_u16().to_be_bytes());
        out.extend_from_slice(&rr.class.to_be_bytes());
        out.extend_from_slice(&rr.ttl.to_be_bytes());
        let len_at = out.len();
        out.extend_from_slice(&[0, 0]);
        write_rdata(&rr.data, &mut out)?;
        let rdlen = out.len() - len_at - 2;
        let rdlen16 = u16::try_from(rdlen).map_err(|_| DnsError::RdataLength {
            rtype: rr.rtype().to_u16(),
            len: rdlen,
        })?;
        out[len_at..len_at + 2].copy_from_slice(&rdlen16.to_be_bytes());
    }
    Ok(out)
}

fn write_name(name: &Name, out: &mut Vec<u8>) -> Result<(), DnsError> {
    let len = name.wire_len();
    if len > MAX_NAME_WIRE_LEN {
        return Err(DnsError::NameTooLong(len));
    }
    name.write_wire(out);
    Ok(())
}

pub(super) fn write_rdata(data: &RData, out: &mut Vec<u8>) -> Result<(), DnsError> {
    match data {
        RData::A(ip) => out.extend_from_slice(&ip.octets()),
        RData::Aaaa(ip) => out.extend_from_slice(&ip.octets()),
        RData::Ns(n) | RData::Cname(n) => write_name(n, out)?,
        RData::Txt(strings) => {
            for s in strings {
                let len = u8::try_from(s.len()).map_err(|_| DnsError::TxtTooLong)?;
                out.push(len);
                out.extend_from_slice(s);
            }
        }
        RData::Https(bytes) | RData::Unknown { data: bytes, .. } => out.extend_from_slice(bytes),
    }
    Ok(())
}

struct Reader<'a> {
    msg: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DnsError> {
        let end = self.pos.checked_add(n).ok_or(DnsError::Truncated)?;
        let s = self.msg.get(self.pos..end).ok_or(DnsError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, DnsError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, DnsError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn name(&mut self) -> Result<Name, DnsError> {
        let (name, next) = read_name(self.msg, self.pos)?;
        self.pos = next;
        Ok(name)
    }
}

/// Reads a possibly compressed name starting at `start`. Returns the name
/// and the offset just past its in-place encoding.
///
/// Pointers must point strictly backwards, and no offset may be visited
/// twice.
fn read_name(msg: &[u8], start: usize) -> Result<(Name, usize), DnsError> {
    let mut labels: Vec<&[u8]> = Vec::new();
    let mut pos = start;
    let mut resume: Option<usize> = None;
    let mut visited: Vec<usize> = Vec::new();
    let mut wire_len = 1usize;
    loop {
        let b = *msg.get(pos).ok_or(DnsError::Truncated)?;
        match b >> 6 {
            0b00 => {
                let len = usize::from(b);
                if len == 0 {
                    pos += 1;
                    break;
                }
                let label = msg.get(pos + 1..pos + 1 + len).ok_or(DnsError::Truncated)?;
                check_label(label)?;
                wire_len += len + 1;
                if wire_len > MAX_NAME_WIRE_LEN {
                    return Err(DnsError::NameTooLong(wire_len));
                }
                labels.push(label);
                pos += 1 + len;
            }
            0b11 => {
                let lo = *msg.get(pos + 1).ok_or(DnsError::Truncated)?;
                let target = (usize::from(b & 0x3f) << 8) | usize::from(lo);
                if target == pos || visited.contains(&pos) {
                    return Err(DnsError::PointerLoop);
                }
                if target > pos {
                    return Err(DnsError::ForwardPointer(target));
                }
                visited.push(pos);
                resume.get_or_insert(pos + 2);
                pos = target;
            }
            _ => return Err(DnsError::BadLabelType(b)),
        }
    }
    let name = Name::from_labels(labels)?;
    Ok((name, resume.unwrap_or(pos)))
}

fn read_rdata(r: &mut Reader<'_>, rtype: u16, rdlen: usize) -> Result<RData, DnsError> {
    let start = r.pos;
    let end = start.checked_add(rdlen).ok_or(DnsError::Truncated)?;
    if end > r.msg.len() {
        return Err(DnsError::Truncated);
    }
    let bad_len = || DnsError::RdataLength { rtype, len: rdlen };
    let data = match RecordType::from_u16(rtype) {
        RecordType::A => {
            let b: [u8; 4] = r.take(rdlen)?.try_into().map_err(|_| bad_len())?;
            RData::A(Ipv4Addr::from(b))
        }
        RecordType::Aaaa => {
            let b: [u8; 16] = r.take(rdlen)?.try_into().map_err(|_| bad_len())?;
            RData::Aaaa(Ipv6Addr::from(b))
        }
        RecordType::Ns | RecordType::Cname => {
            let n = r.name()?;
            if r.pos != end {
                return Err(bad_len());
            }
            if rtype == RecordType::Ns.to_u16() {
                RData::Ns(n)
            } else {
                RData::Cname(n)
            }
        }
        RecordType::Txt => {
            let raw = r.take(rdlen)?;
            let mut strings = Vec::new();
            let mut at = 0;
            while at < raw.len() {
                let len = usize::from(raw[at]);
                let s = raw.get(at + 1..at + 1 + len).ok_or_else(bad_len)?;
                strings.push(s.to_vec());
                at += 1 + len;
            }
            RData::Txt(strings)
        }
        RecordType::Https => RData::Https(r.take(rdlen)?.to_vec()),
        RecordType::Other(t) => RData::Unknown {
            rtype: t,
            data: r.take(rdlen)?.to_vec(),
        },
    };
    Ok(data)
}

pub fn decode_message(buf: &[u8]) -> Result<Message, DnsError> {
    if buf.len() < HEADER_LEN {
        return Err(DnsError::Truncated);
    }
    let mut r = Reader { msg: buf, pos: 0 };
    let id = r.u16()?;
    let f = r.take(2)?;
    let (f0, f1) = (f[0], f[1]);
    let header = Header {
        id,
        qr: f0 & 0x80 != 0,
        opcode: (f0 >> 3) & 0x0f,
        aa: f0 & 0x04 != 0,
        tc: f0 & 0x02 != 0,
        rd: f0 & 0x01 != 0,
        ra: f1 & 0x80 != 0,
        ad: f1 & 0x20 != 0,
        cd: f1 & 0x10 != 0,
        rcode: f1 & 0x0f,
    };
    let qd = r.u16()?;
    let an = r.u16()?;
    let ns = r.u16()?;
    let ar = r.u16()?;

    // Each question needs at least 5 bytes and each record at least 11, so
    // counts larger than the buffer allows are rejected before allocating.
    let remaining = buf.len() - HEADER_LEN;
    if usize::from(qd) * 5 + (usize::from(an) + usize::from(ns) + usize::from(ar)) * 11 > remaining {
        return Err(DnsError::Truncated);
    }

    let mut questions = Vec::with_capacity(usize::from(qd));
    for _ in 0..qd {
        let qname = r.name()?;
        let qtype = r.u16()?;
        let qclass = r.u16()?;
        questions.push(Question { qname, qtype, qclass });
    }
    let read_rrs = |n: u16, r: &mut Reader<'_>| -> Result<Vec<ResourceRecord>, DnsError> {
        let mut v = Vec::with_capacity(usize::from(n));
        for _ in 0..n {
            let name = r.name()?;
            let rtype = r.u16()?;
            let class = r.u16()?;
            let ttl = r.u32()?;
            let rdlen = usize::from(r.u16()?);
            let data = read_rdata(r, rtype, rdlen)?;
            v.push(ResourceRecord {
                name,
                class,
                ttl,
                data,
            });
        }
        Ok(v)
    };
    let answers = read_rrs(an, &mut r)?;
    let authority = read_rrs(ns, &mut r)?;
    let additional = read_rrs(ar, &mut r)?;
    if r.pos != buf.len() {
        return Err(DnsError::TrailingData);
    }
    Ok(Message {
        header,
        questions,
        answers,
        authority,
        additional,
    })
}
