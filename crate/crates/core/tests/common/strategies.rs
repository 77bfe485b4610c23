//! Proptest generators for wire, DNS and track values.

use std::net::{Ipv4Addr, Ipv6Addr};

use bytes::Bytes;
use proptest::collection::vec;
use proptest::prelude::*;

use moqdns_core::dns::{Header, Message, Name, Question, RData, RecordType, ResourceRecord};
use moqdns_core::track::{TrackKey, TrackQuery};
use moqdns_core::wire::{ControlMessage, ErrorCode, FetchMode, ObjectMessage, MAX_VARINT};

const KNOWN_TYPES: [u16; 6] = [1, 2, 5, 16, 28, 65];

pub fn varint() -> impl Strategy<Value = u64> {
    prop_oneof![0..64u64, 0..16_384u64, 0..(1u64 << 30), 0..=MAX_VARINT]
}

const LABEL_CHARS: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789-";

fn label() -> impl Strategy<Value = Vec<u8>> {
    vec(0..LABEL_CHARS.len(), 1..16).prop_map(|ix| ix.into_iter().map(|i| LABEL_CHARS[i]).collect())
}

pub fn name() -> impl Strategy<Value = Name> {
    vec(label(), 0..5).prop_map(|labels| Name::from_labels(labels).expect("labels are short"))
}

pub fn track_query() -> impl Strategy<Value = TrackQuery> {
    (0..16u8, any::<bool>(), any::<bool>(), any::<u16>(), any::<u16>(), name()).prop_map(
        |(opcode, rd, cd, qtype, qclass, qname)| TrackQuery {
            opcode,
            rd,
            cd,
            qtype,
            qclass,
            qname,
        },
    )
}

pub fn track_key() -> impl Strategy<Value = TrackKey> {
    track_query().prop_map(|q| q.track_key().expect("short names fit"))
}

fn code() -> impl Strategy<Value = ErrorCode> {
    varint().prop_map(ErrorCode::from)
}

pub fn control() -> impl Strategy<Value = ControlMessage> {
    let reason = || vec(any::<u8>(), 0..32);
    prop_oneof![
        varint().prop_map(|v| ControlMessage::ClientSetup { supported_version: v }),
        varint().prop_map(|v| ControlMessage::ServerSetup { selected_version: v }),
        (varint(), track_key()).prop_map(|(request_id, track)| ControlMessage::Subscribe { request_id, track }),
        (varint(), varint(), any::<bool>()).prop_map(|(request_id, largest_group, exists)| ControlMessage::SubscribeOk {
            request_id,
            largest_group,
            exists
        }),
        (varint(), code(), reason()).prop_map(|(request_id, code, reason)| ControlMessage::SubscribeError {
            request_id,
            code,
            reason
        }),
        (varint(), track_key(), varint(), varint()).prop_map(|(request_id, track, a, b)| ControlMessage::Fetch {
            request_id,
            track,
            mode: FetchMode::Standalone {
                start_group: a.min(b),
                end_group: a.max(b)
            }
        }),
        (varint(), track_key(), varint(), varint()).prop_map(|(request_id, track, j, offset)| ControlMessage::Fetch {
            request_id,
            track,
            mode: FetchMode::Joining {
                joining_request_id: j,
                offset
            }
        }),
        (varint(), varint()).prop_map(|(request_id, largest_group)| ControlMessage::FetchOk { request_id, largest_group }),
        (varint(), code(), reason()).prop_map(|(request_id, code, reason)| ControlMessage::FetchError {
            request_id,
            code,
            reason
        }),
        varint().prop_map(|request_id| ControlMessage::Unsubscribe { request_id }),
    ]
}

pub fn object() -> impl Strategy<Value = ObjectMessage> {
    (varint(), varint(), vec(any::<u8>(), 0..600)).prop_map(|(r, g, p)| ObjectMessage::new(r, g, Bytes::from(p)))
}

fn rdata() -> impl Strategy<Value = RData> {
    prop_oneof![
        any::<u32>().prop_map(|v| RData::A(Ipv4Addr::from(v))),
        any::<u128>().prop_map(|v| RData::Aaaa(Ipv6Addr::from(v))),
        name().prop_map(RData::Ns),
        name().prop_map(RData::Cname),
        vec(vec(any::<u8>(), 0..=255), 1..3).prop_map(RData::Txt),
        vec(any::<u8>(), 0..40).prop_map(RData::Https),
        (any::<u16>().prop_filter("unknown type", |t| !KNOWN_TYPES.contains(t)), vec(any::<u8>(), 0..40))
            .prop_map(|(rtype, data)| RData::Unknown { rtype, data }),
    ]
}

fn record() -> impl Strategy<Value = ResourceRecord> {
    (name(), any::<u16>(), any::<u32>(), rdata()).prop_map(|(name, class, ttl, data)| ResourceRecord {
        name,
        class,
        ttl,
        data,
    })
}

fn header() -> impl Strategy<Value = Header> {
    (any::<u16>(), any::<[bool; 8]>(), 0..16u8, 0..16u8).prop_map(|(id, f, opcode, rcode)| Header {
        id,
        qr: f[0],
        opcode,
        aa: f[1],
        tc: f[2],
        rd: f[3],
        ra: f[4],
        ad: f[5],
        cd: f[6],
        rcode,
    })
}

pub fn message() -> impl Strategy<Value = Message> {
    (
        header(),
        vec((name(), any::<u16>(), any::<u16>()), 0..3),
        vec(record(), 0..5),
        vec(record(), 0..3),
        vec(record(), 0..3),
    )
        .prop_map(|(header, qs, answers, authority, additional)| Message {
            header,
            questions: qs
                .into_iter()
                .map(|(qname, qtype, qclass)| Question { qname, qtype, qclass })
                .collect(),
            answers,
            authority,
            additional,
        })
}

/// A response with one question and a few address records.
pub fn response() -> impl Strategy<Value = Message> {
    (name(), vec(any::<u32>(), 1..4), any::<u32>()).prop_map(|(qname, addrs, ttl)| {
        let mut m = Message::response_to(&Message::query(0, Question::new(qname.clone(), RecordType::A)));
        m.answers = addrs
            .into_iter()
            .map(|a| ResourceRecord::new(qname.clone(), ttl, RData::A(Ipv4Addr::from(a))))
            .collect();
        m
    })
}
