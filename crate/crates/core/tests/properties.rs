mod common;

use bytes::Bytes;
use proptest::collection::vec;
use proptest::prelude::*;

use common::strategies::*;
use moqdns_core::dns::{decode_message, encode_message};
use moqdns_core::forwarder::ResumeStore;
use moqdns_core::history::TrackHistory;
use moqdns_core::track::{self, TrackKey, MAX_TRACK_IDENTITY};
use moqdns_core::wire::{decode_control, decode_object, decode_varint, encode_control, encode_object, encode_varint};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn control_messages_round_trip(msg in control()) {
        let bytes = encode_control(&msg).unwrap();
        let (back, used) = decode_control(&bytes).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert_eq!(encode_control(&back).unwrap(), bytes);
        prop_assert_eq!(back, msg);
    }

    #[test]
    fn objects_round_trip(obj in object()) {
        let bytes = encode_object(&obj).unwrap();
        let (back, used) = decode_object(&bytes).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert_eq!(back, obj);
    }

    #[test]
    fn truncated_control_is_incomplete(msg in control(), cut in any::<prop::sample::Index>()) {
        let bytes = encode_control(&msg).unwrap();
        let at = cut.index(bytes.len());
        let err = decode_control(&bytes[..at]).unwrap_err();
        prop_assert!(err.is_incomplete(), "{err}");
    }

    #[test]
    fn back_to_back_frames_split_cleanly(a in control(), b in object()) {
        let mut buf = encode_control(&a).unwrap();
        let split = buf.len();
        buf.extend(encode_object(&b).unwrap());
        let (first, used) = decode_control(&buf).unwrap();
        prop_assert_eq!(used, split);
        prop_assert_eq!(first, a);
        prop_assert_eq!(decode_object(&buf[used..]).unwrap().0, b);
    }

    #[test]
    fn varints_are_minimal(v in varint()) {
        let bytes = encode_varint(v).unwrap();
        let expected = match v {
            0..=63 => 1,
            64..=16_383 => 2,
            16_384..=1_073_741_823 => 4,
            _ => 8,
        };
        prop_assert_eq!(bytes.len(), expected);
        let (back, used) = decode_varint(&bytes).unwrap();
        prop_assert_eq!(used, expected);
        prop_assert_eq!(back.get(), v);
    }

    #[test]
    fn dns_messages_round_trip(msg in message()) {
        let bytes = encode_message(&msg).unwrap();
        let back = decode_message(&bytes).unwrap();
        prop_assert_eq!(encode_message(&back).unwrap(), bytes);
        prop_assert_eq!(back, msg);
    }

    #[test]
    fn tracks_round_trip(q in track_query()) {
        let key = q.track_key().unwrap();
        prop_assert!(key.identity_len() <= MAX_TRACK_IDENTITY);
        prop_assert_eq!(TrackKey::from_bytes(&key.to_bytes()).unwrap(), key.clone());
        prop_assert_eq!(track::track_to_query(&key), q.clone());
        prop_assert_eq!(track::query_to_track(&q.to_message(7)).unwrap(), key);
    }

    #[test]
    fn response_payloads_carry_id_zero(mut m in response(), id in any::<u16>()) {
        m.header.id = id;
        let payload = track::response_payload(&m).unwrap();
        let back = decode_message(&payload).unwrap();
        prop_assert_eq!(back.header.id, 0);
        prop_assert_eq!(track::question_track(&back).unwrap(), track::question_track(&m).unwrap());
    }

    #[test]
    fn fingerprint_ignores_ttl_and_order(m in response(), ttl in any::<u32>()) {
        let mut other = m.clone();
        other.answers.reverse();
        for r in &mut other.answers {
            r.ttl = ttl;
        }
        other.header.id ^= 0xffff;
        prop_assert_eq!(m.answer_fingerprint(), other.answer_fingerprint());
    }

    #[test]
    fn store_keeps_the_largest_group(tracks in vec(track_key(), 1..4), ops in vec((any::<prop::sample::Index>(), 0..50u64), 1..40)) {
        let mut store = ResumeStore::in_memory();
        let mut best = std::collections::BTreeMap::new();
        for (i, g) in ops {
            let t = &tracks[i.index(tracks.len())];
            let newer = best.get(t).is_none_or(|b| g > *b);
            prop_assert_eq!(store.record(t, g).unwrap(), newer);
            if newer {
                best.insert(t.clone(), g);
            }
            prop_assert_eq!(store.get(t), best.get(t).copied());
        }
    }

    #[test]
    fn history_keeps_the_newest_groups(retain in 1..8usize, groups in vec(0..100u64, 0..30)) {
        let mut h = TrackHistory::new(retain);
        let mut accepted: Vec<u64> = Vec::new();
        for g in groups {
            let ok = h.push(g, Bytes::from(g.to_string()));
            prop_assert_eq!(ok, accepted.last().is_none_or(|l| g > *l));
            if ok {
                accepted.push(g);
            }
        }
        let kept: Vec<u64> = h.joining(u64::MAX).into_iter().map(|(g, _)| g).collect();
        let tail = &accepted[accepted.len().saturating_sub(retain)..];
        prop_assert_eq!(kept.as_slice(), tail);
        prop_assert_eq!(h.joining(1).first().map(|(g, _)| *g), accepted.last().copied());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2048))]

    #[test]
    fn decoders_never_panic_on_noise(bytes in vec(any::<u8>(), 0..512)) {
        let _ = decode_control(&bytes);
        let _ = decode_object(&bytes);
        let _ = decode_message(&bytes);
        let _ = decode_varint(&bytes);
        let _ = TrackKey::from_bytes(&bytes);
    }

    #[test]
    fn decoders_never_panic_on_mutations(
        msg in control(),
        dns in message(),
        flips in vec((any::<prop::sample::Index>(), any::<u8>()), 1..8),
    ) {
        for mut bytes in [encode_control(&msg).unwrap(), encode_message(&dns).unwrap()] {
            for (i, v) in &flips {
                let at = i.index(bytes.len());
                bytes[at] = *v;
            }
            let _ = decode_control(&bytes);
            let _ = decode_message(&bytes);
        }
    }
}
