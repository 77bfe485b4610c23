use bytes::Bytes;

use super::{frame, put_prefixed, put_varint, split_frame, BodyReader, WireError};
use crate::track::TrackKey;

const CLIENT_SETUP: u64 = 0x20;
const SERVER_SETUP: u64 = 0x21;
const SUBSCRIBE: u64 = 0x03;
const SUBSCRIBE_OK: u64 = 0x04;
const SUBSCRIBE_ERROR: u64 = 0x05;
const UNSUBSCRIBE: u64 = 0x0a;
const FETCH: u64 = 0x16;
const FETCH_OK: u64 = 0x18;
const FETCH_ERROR: u64 = 0x19;

/// Frame type of an object on a unidirectional stream.
const OBJECT: u64 = 0x08;

const FETCH_STANDALONE: u64 = 0x1;
const FETCH_JOINING: u64 = 0x2;

/// Error codes carried by `SubscribeError`/`FetchError`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ErrorCode {
    Internal,
    TrackNotServed,
    /// Used to decline a subscription when no updates can be provided.
    /// Not an IETF-assigned value.
    SubscriptionsUnavailable,
    LimitExceeded,
    Other(u64),
}

impl ErrorCode {
    pub fn to_u64(self) -> u64 {
        match self {
            ErrorCode::Internal => 0x0,
            ErrorCode::TrackNotServed => 0x1,
            ErrorCode::SubscriptionsUnavailable => 0x2,
            ErrorCode::LimitExceeded => 0x3,
            ErrorCode::Other(v) => v,
        }
    }
}

impl From<u64> for ErrorCode {
    fn from(v: u64) -> Self {
        match v {
            0x0 => ErrorCode::Internal,
            0x1 => ErrorCode::TrackNotServed,
            0x2 => ErrorCode::SubscriptionsUnavailable,
            0x3 => ErrorCode::LimitExceeded,
            other => ErrorCode::Other(other),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FetchMode {
    /// Every retained group in `[start_group, end_group]`.
    Standalone { start_group: u64, end_group: u64 },
    /// Relative to the subscription `joining_request_id`; offset 1 is the
    /// latest group before the subscription started.
    Joining { joining_request_id: u64, offset: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ControlMessage {
    ClientSetup {
        supported_version: u64,
    },
    ServerSetup {
        selected_version: u64,
    },
    Subscribe {
        request_id: u64,
        track: TrackKey,
    },
    SubscribeOk {
        request_id: u64,
        largest_group: u64,
        exists: bool,
    },
    SubscribeError {
        request_id: u64,
        code: ErrorCode,
        reason: Vec<u8>,
    },
    Fetch {
        request_id: u64,
        track: TrackKey,
        mode: FetchMode,
    },
    FetchOk {
        request_id: u64,
        largest_group: u64,
    },
    FetchError {
        request_id: u64,
        code: ErrorCode,
        reason: Vec<u8>,
    },
    Unsubscribe {
        request_id: u64,
    },
}

impl ControlMessage {
    pub fn type_code(&self) -> u64 {
        match self {
            ControlMessage::ClientSetup { .. } => CLIENT_SETUP,
            ControlMessage::ServerSetup { .. } => SERVER_SETUP,
            ControlMessage::Subscribe { .. } => SUBSCRIBE,
            ControlMessage::SubscribeOk { .. } => SUBSCRIBE_OK,
            ControlMessage::SubscribeError { .. } => SUBSCRIBE_ERROR,
            ControlMessage::Fetch { .. } => FETCH,
            ControlMessage::FetchOk { .. } => FETCH_OK,
            ControlMessage::FetchError { .. } => FETCH_ERROR,
            ControlMessage::Unsubscribe { .. } => UNSUBSCRIBE,
        }
    }

    /// Short lowercase name, used as a metrics key.
    pub fn kind(&self) -> &'static str {
        match self {
            ControlMessage::ClientSetup { .. } => "client_setup",
            ControlMessage::ServerSetup { .. } => "server_setup",
            ControlMessage::Subscribe { .. } => "subscribe",
            ControlMessage::SubscribeOk { .. } => "subscribe_ok",
            ControlMessage::SubscribeError { .. } => "subscribe_error",
            ControlMessage::Fetch { .. } => "fetch",
            ControlMessage::FetchOk { .. } => "fetch_ok",
            ControlMessage::FetchError { .. } => "fetch_error",
            ControlMessage::Unsubscribe { .. } => "unsubscribe",
        }
    }

    pub fn request_id(&self) -> Option<u64> {
        match self {
            ControlMessage::ClientSetup { .. } | ControlMessage::ServerSetup { .. } => None,
            ControlMessage::Subscribe { request_id, .. }
            | ControlMessage::SubscribeOk { request_id, .. }
            | ControlMessage::SubscribeError { request_id, .. }
            | ControlMessage::Fetch { request_id, .. }
            | ControlMessage::FetchOk { request_id, .. }
            | ControlMessage::FetchError { request_id, .. }
            | ControlMessage::Unsubscribe { request_id } => Some(*request_id),
        }
    }
}

fn put_track(out: &mut Vec<u8>, track: &TrackKey) -> Result<(), WireError> {
    let ns = track.namespace();
    put_varint(out, ns.len() as u64)?;
    for element in ns {
        put_prefixed(out, element)?;
    }
    put_prefixed(out, track.trackname())
}

fn read_track(r: &mut BodyReader<'_>) -> Result<TrackKey, WireError> {
    let count = r.varint()?;
    // Bound the pre-allocation; TrackKey validation rejects the count anyway.
    let mut namespace = Vec::with_capacity(count.min(8) as usize);
    for _ in 0..count {
        namespace.push(r.prefixed()?.to_vec());
    }
    let trackname = r.prefixed()?.to_vec();
    Ok(TrackKey::from_parts(&namespace, &trackname)?)
}

pub fn encode_control(msg: &ControlMessage) -> Result<Vec<u8>, WireError> {
    let mut body = Vec::new();
    match msg {
        ControlMessage::ClientSetup { supported_version } => put_varint(&mut body, *supported_version)?,
        ControlMessage::ServerSetup { selected_version } => put_varint(&mut body, *selected_version)?,
        ControlMessage::Subscribe { request_id, track } => {
            put_varint(&mut body, *request_id)?;
            put_track(&mut body, track)?;
        }
        ControlMessage::SubscribeOk {
            request_id,
            largest_group,
            exists,
        } => {
            put_varint(&mut body, *request_id)?;
            put_varint(&mut body, *largest_group)?;
            body.push(u8::from(*exists));
        }
        ControlMessage::SubscribeError {
            request_id,
            code,
            reason,
        }
        | ControlMessage::FetchError {
            request_id,
            code,
            reason,
        } => {
            put_varint(&mut body, *request_id)?;
            put_varint(&mut body, code.to_u64())?;
            put_prefixed(&mut body, reason)?;
        }
        ControlMessage::Fetch {
            request_id,
            track,
            mode,
        } => {
            put_varint(&mut body, *request_id)?;
            put_track(&mut body, track)?;
            match mode {
                FetchMode::Standalone {
                    start_group,
                    end_group,
                } => {
                    put_varint(&mut body, FETCH_STANDALONE)?;
                    put_varint(&mut body, *start_group)?;
                    put_varint(&mut body, *end_group)?;
                }
                FetchMode::Joining {
                    joining_request_id,
                    offset,
                } => {
                    put_varint(&mut body, FETCH_JOINING)?;
                    put_varint(&mut body, *joining_request_id)?;
                    put_varint(&mut body, *offset)?;
                }
            }
        }
        ControlMessage::FetchOk {
            request_id,
            largest_group,
        } => {
            put_varint(&mut body, *request_id)?;
            put_varint(&mut body, *largest_group)?;
        }
        ControlMessage::Unsubscribe { request_id } => put_varint(&mut body, *request_id)?,
    }
    frame(msg.type_code(), &body)
}

/// Decodes one control frame from the front of `buf`, returning the message
/// and the number of bytes consumed.
pub fn decode_control(buf: &[u8]) -> Result<(ControlMessage, usize), WireError> {
    let (ty, body, total) = split_frame(buf)?;
    let mut r = BodyReader::new(body);
    let msg = match ty {
        CLIENT_SETUP => ControlMessage::ClientSetup {
            supported_version: r.varint()?,
        },
        SERVER_SETUP => ControlMessage::ServerSetup {
            selected_version: r.varint()?,
        },
        SUBSCRIBE => ControlMessage::Subscribe {
            request_id: r.varint()?,
            track: read_track(&mut r)?,
        },
        SUBSCRIBE_OK => ControlMessage::SubscribeOk {
            request_id: r.varint()?,
            largest_group: r.varint()?,
            exists: match r.u8()? {
                0 => false,
                1 => true,
                _ => return Err(WireError::Malformed("exists flag must be 0 or 1")),
            },
        },
        SUBSCRIBE_ERROR | FETCH_ERROR => {
            let request_id = r.varint()?;
            let code = ErrorCode::from(r.varint()?);
            let reason = r.prefixed()?.to_vec();
            if ty == SUBSCRIBE_ERROR {
                ControlMessage::SubscribeError {
                    request_id,
                    code,
                    reason,
                }
            } else {
                ControlMessage::FetchError {
                    request_id,
                    code,
                    reason,
                }
            }
        }
        FETCH => {
            let request_id = r.varint()?;
            let track = read_track(&mut r)?;
            let mode = match r.varint()? {
                FETCH_STANDALONE => FetchMode::Standalone {
                    start_group: r.varint()?,
                    end_group: r.varint()?,
                },
                FETCH_JOINING => FetchMode::Joining {
                    joining_request_id: r.varint()?,
                    offset: r.varint()?,
                },
                _ => return Err(WireError::Malformed("unknown fetch type")),
            };
            ControlMessage::Fetch {
                request_id,
                track,
                mode,
            }
        }
        FETCH_OK => ControlMessage::FetchOk {
            request_id: r.varint()?,
            largest_group: r.varint()?,
        },
        UNSUBSCRIBE => ControlMessage::Unsubscribe {
            request_id: r.varint()?,
        },
        other => {
            return Err(WireError::UnknownType {
                ty: other,
                frame_len: total,
            })
        }
    };
    r.finish()?;
    Ok((msg, total))
}

/// One object: a full DNS response delivered for a subscription or fetch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObjectMessage {
    /// The subscription or fetch this object answers.
    pub request_id: u64,
    pub group_id: u64,
    /// Always 0: every group holds exactly one object.
    pub object_id: u64,
    pub payload: Bytes,
}

impl ObjectMessage {
    pub fn new(request_id: u64, group_id: u64, payload: impl Into<Bytes>) -> Self {
        Self {
            request_id,
            group_id,
            object_id: 0,
            payload: payload.into(),
        }
    }
}

pub fn encode_object(obj: &ObjectMessage) -> Result<Vec<u8>, WireError> {
    if obj.object_id != 0 {
        return Err(WireError::NonZeroObjectId(obj.object_id));
    }
    let mut body = Vec::with_capacity(obj.payload.len() + 8);
    put_varint(&mut body, obj.request_id)?;
    put_varint(&mut body, obj.group_id)?;
    put_varint(&mut body, obj.object_id)?;
    body.extend_from_slice(&obj.payload);
    frame(OBJECT, &body)
}

pub fn decode_object(buf: &[u8]) -> Result<(ObjectMessage, usize), WireError> {
    let (ty, body, total) = split_frame(buf)?;
    if ty != OBJECT {
        return Err(WireError::UnknownType {
            ty,
            frame_len: total,
        });
    }
    let mut r = BodyReader::new(body);
    let request_id = r.varint()?;
    let group_id = r.varint()?;
    let object_id = r.varint()?;
    if object_id != 0 {
        return Err(WireError::NonZeroObjectId(object_id));
    }
    let payload = Bytes::copy_from_slice(r.rest());
    Ok((
        ObjectMessage {
            request_id,
            group_id,
            object_id,
            payload,
        },
        total,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dns::{Name, RecordType, CLASS_IN};
    use crate::track::TrackQuery;

    fn example_track() -> TrackKey {
        TrackQuery {
            opcode: 0,
            rd: true,
            cd: false,
            qtype: RecordType::A.to_u16(),
            qclass: CLASS_IN,
            qname: Name::parse("example.com.").unwrap(),
        }
        .track_key()
        .unwrap()
    }

    #[test]
    fn unsubscribe_is_smallest_frame() {
        let msg = ControlMessage::Unsubscribe { request_id: 7 };
        let bytes = encode_control(&msg).unwrap();
        assert_eq!(bytes, vec![0x0a, 0x01, 0x07]);
        assert_eq!(decode_control(&bytes).unwrap(), (msg, 3));
    }

    #[test]
    fn subscribe_carries_three_namespace_elements() {
        let msg = ControlMessage::Subscribe {
            request_id: 1,
            track: example_track(),
        };
        let bytes = encode_control(&msg).unwrap();
        // type, len, request id, count=3, [1][08], [2][00 01], [2][00 01], [13]qname
        assert_eq!(
            &bytes[2..13],
            &[0x01, 0x03, 0x01, 0x08, 0x02, 0x00, 0x01, 0x02, 0x00, 0x01, 0x0d]
        );
        let (decoded, used) = decode_control(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        match &decoded {
            ControlMessage::Subscribe { track, .. } => {
                let sizes: Vec<usize> = track.namespace().iter().map(|e| e.len()).collect();
                assert_eq!(sizes, vec![1, 2, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(decoded, msg);
    }

    #[test]
    fn joining_fetch_round_trips() {
        let msg = ControlMessage::Fetch {
            request_id: 5,
            track: example_track(),
            mode: FetchMode::Joining {
                joining_request_id: 4,
                offset: 1,
            },
        };
        let bytes = encode_control(&msg).unwrap();
        assert_eq!(decode_control(&bytes).unwrap().0, msg);
    }

    #[test]
    fn unknown_type_reports_frame_length() {
        let bytes = [0x3f, 0x02, 0xaa, 0xbb, 0x0a];
        assert_eq!(
            decode_control(&bytes),
            Err(WireError::UnknownType {
                ty: 0x3f,
                frame_len: 4
            })
        );
    }

    #[test]
    fn body_length_mismatch() {
        // Unsubscribe whose body claims 2 bytes but holds one varint + junk.
        assert_eq!(
            decode_control(&[0x0a, 0x02, 0x07, 0x00]),
            Err(WireError::LengthMismatch)
        );
        // Body too short for its fields.
        assert_eq!(
            decode_control(&[0x18, 0x01, 0x07]),
            Err(WireError::LengthMismatch)
        );
    }

    #[test]
    fn truncated_frame_is_incomplete() {
        let bytes = encode_control(&ControlMessage::FetchOk {
            request_id: 300,
            largest_group: 9,
        })
        .unwrap();
        for cut in 0..bytes.len() {
            assert!(decode_control(&bytes[..cut]).unwrap_err().is_incomplete());
        }
    }

    #[test]
    fn object_round_trip_and_group_varint() {
        let header = vec![0u8; 12];
        let obj = ObjectMessage::new(1, 6, header.clone());
        let bytes = encode_object(&obj).unwrap();
        assert_eq!(bytes, [&[0x08, 0x0f, 0x01, 0x06, 0x00][..], &header[..]].concat());
        assert_eq!(decode_object(&bytes).unwrap(), (obj, bytes.len()));

        let big = ObjectMessage::new(1, 300, header);
        let bytes = encode_object(&big).unwrap();
        assert_eq!(&bytes[3..5], &[0x41, 0x2c]);
    }

    #[test]
    fn object_id_must_be_zero() {
        let mut obj = ObjectMessage::new(1, 6, vec![0u8; 12]);
        obj.object_id = 1;
        assert_eq!(encode_object(&obj), Err(WireError::NonZeroObjectId(1)));
        assert_eq!(
            decode_object(&[0x08, 0x03, 0x01, 0x06, 0x01]),
            Err(WireError::NonZeroObjectId(1))
        );
    }

    #[test]
    fn truncated_object_is_incomplete() {
        let bytes = encode_object(&ObjectMessage::new(2, 9, vec![1, 2, 3])).unwrap();
        assert!(decode_object(&bytes[..bytes.len() - 1])
            .unwrap_err()
            .is_incomplete());
    }

    #[test]
    fn concatenated_frames_decode_in_sequence() {
        let msgs = vec![
            ControlMessage::ClientSetup {
                supported_version: 1,
            },
            ControlMessage::Subscribe {
                request_id: 0,
                track: example_track(),
            },
            ControlMessage::SubscribeError {
                request_id: 0,
                code: ErrorCode::SubscriptionsUnavailable,
                reason: b"no updates".to_vec(),
            },
            ControlMessage::Unsubscribe { request_id: 2 },
        ];
        let stream: Vec<u8> = msgs
            .iter()
            .flat_map(|m| encode_control(m).unwrap())
            .collect();
        let mut at = 0;
        let mut out = Vec::new();
        while at < stream.len() {
            let (m, n) = decode_control(&stream[at..]).unwrap();
            out.push(m);
            at += n;
        }
        assert_eq!(out, msgs);
    }
}
