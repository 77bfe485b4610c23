//! Authoritative nameserver.
//!
//! Serves one zone over MoQT-lite and, optionally, classic UDP. Every
//! track that has been asked for keeps a short history of published
//! answers. A zone change recomputes the answer of every known track and
//! publishes to a track's subscribers only if the encoded answer changed.

mod zone;

use std::collections::{BTreeMap, BTreeSet};

use bytes::Bytes;
use serde::Serialize;
use tracing::{debug, warn};

pub use zone::{
    answer_question, load_zone, load_zone_file, load_zone_str, zone_document, RecordDocument, RrSetChange, Zone,
    ZoneChange, ZoneDocument, ZoneError, MAX_CNAME_CHAIN,
};

use crate::dns::{self, rcode, Message};
use crate::history::{TrackHistory, DEFAULT_RETENTION};
use crate::track::{self, TrackKey};
use crate::transport::{Event, Node, SessionId, SocketKind, Transport};
use crate::wire::{ControlMessage, ErrorCode, FetchMode, ObjectMessage};

#[derive(Clone, Debug)]
pub struct AuthConfig {
    /// Groups kept per track for fetches.
    pub retention: usize,
    pub max_subscriptions: usize,
    /// When false every Subscribe is declined with
    /// `SubscriptionsUnavailable`; fetches are still answered.
    pub accept_subscriptions: bool,
}

impl Default for AuthConfig {
    fn default() -> Self {
        AuthConfig {
            retention: DEFAULT_RETENTION,
            max_subscriptions: 100_000,
            accept_subscriptions: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AuthStats {
    pub subscribes: u64,
    pub fetches: u64,
    pub udp_queries: u64,
    /// Objects sent because of zone changes.
    pub pushed_objects: u64,
    /// Objects sent in reply to fetches.
    pub fetched_objects: u64,
    pub version_bumps: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct UpdateOutcome {
    pub version: u64,
    pub changed: bool,
    /// Objects sent to subscribers.
    pub published: usize,
}

type SubKey = (SessionId, u64);

#[derive(Default)]
struct TrackState {
    history: TrackHistory,
    subscribers: BTreeSet<SubKey>,
}

pub struct Authoritative {
    zone: Zone,
    cfg: AuthConfig,
    subs: BTreeMap<SubKey, TrackKey>,
    tracks: BTreeMap<TrackKey, TrackState>,
    stats: AuthStats,
}

impl Authoritative {
    pub fn new(zone: Zone, cfg: AuthConfig) -> Self {
        Authoritative {
            zone,
            cfg,
            subs: BTreeMap::new(),
            tracks: BTreeMap::new(),
            stats: AuthStats::default(),
        }
    }

    pub fn zone(&self) -> &Zone {
        &self.zone
    }

    pub fn stats(&self) -> AuthStats {
        self.stats
    }

    pub fn subscription_count(&self) -> usize {
        self.subs.len()
    }

    pub fn subscribers_of(&self, track: &TrackKey) -> usize {
        self.tracks.get(track).map_or(0, |t| t.subscribers.len())
    }

    pub fn history(&self, track: &TrackKey) -> Option<&TrackHistory> {
        self.tracks.get(track).map(|t| &t.history)
    }

    /// Applies a batch of changes as one version step and publishes.
    pub fn apply_updates(&mut self, changes: &[ZoneChange], io: &mut dyn Transport) -> Result<UpdateOutcome, ZoneError> {
        let changed = self.zone.apply(changes)?;
        Ok(self.after_change(changed, io))
    }

    /// Swaps in freshly loaded zone contents, as one version step if they
    /// differ.
    pub fn reload(&mut self, fresh: &Zone, io: &mut dyn Transport) -> UpdateOutcome {
        let changed = self.zone.replace_records(fresh);
        self.after_change(changed, io)
    }

    fn after_change(&mut self, changed: bool, io: &mut dyn Transport) -> UpdateOutcome {
        let version = self.zone.version();
        let mut out = UpdateOutcome {
            version,
            changed,
            published: 0,
        };
        if !changed {
            return out;
        }
        self.stats.version_bumps += 1;
        let mut dead = Vec::new();
        for (track, state) in &mut self.tracks {
            let payload = current_payload(&self.zone, track);
            if state.history.latest().is_some_and(|(_, p)| *p == payload) {
                continue;
            }
            state.history.push(version, payload.clone());
            for &(session, req) in &state.subscribers {
                match io.send_object(session, ObjectMessage::new(req, version, payload.clone())) {
                    Ok(()) => out.published += 1,
                    Err(e) => {
                        debug!(%session, "push failed: {e}");
                        dead.push((session, req));
                    }
                }
            }
        }
        self.stats.pushed_objects += out.published as u64;
        for key in dead {
            self.remove_sub(key);
        }
        out
    }

    /// Makes sure the history holds the current answer at the current
    /// version.
    fn observe(&mut self, track: &TrackKey) -> &mut TrackState {
        let version = self.zone.version();
        let state = self.tracks.entry(track.clone()).or_insert_with(|| TrackState {
            history: TrackHistory::new(self.cfg.retention),
            subscribers: BTreeSet::new(),
        });
        if state.history.latest_group().is_none_or(|g| g < version) {
            state.history.push(version, current_payload(&self.zone, track));
        }
        state
    }

    fn remove_sub(&mut self, key: SubKey) {
        if let Some(track) = self.subs.remove(&key) {
            if let Some(t) = self.tracks.get_mut(&track) {
                t.subscribers.remove(&key);
            }
        }
    }

    fn on_control(&mut self, session: SessionId, msg: ControlMessage, io: &mut dyn Transport) {
        let reply = |io: &mut dyn Transport, m: ControlMessage| {
            if let Err(e) = io.send_control(session, m) {
                debug!(%session, "reply dropped: {e}");
            }
        };
        match msg {
            ControlMessage::Subscribe { request_id, track } => {
                self.stats.subscribes += 1;
                let key = (session, request_id);
                let refuse = if !self.cfg.accept_subscriptions {
                    Some((ErrorCode::SubscriptionsUnavailable, "subscriptions not offered"))
                } else if self.subs.contains_key(&key) {
                    Some((ErrorCode::Internal, "duplicate request id"))
                } else if self.subs.len() >= self.cfg.max_subscriptions {
                    Some((ErrorCode::LimitExceeded, "too many subscriptions"))
                } else {
                    None
                };
                if let Some((code, reason)) = refuse {
                    reply(io, ControlMessage::SubscribeError {
                        request_id,
                        code,
                        reason: reason.as_bytes().to_vec(),
                    });
                    return;
                }
                self.observe(&track).subscribers.insert(key);
                self.subs.insert(key, track);
                reply(io, ControlMessage::SubscribeOk {
                    request_id,
                    largest_group: self.zone.version(),
                    exists: true,
                });
            }
            ControlMessage::Unsubscribe { request_id } => self.remove_sub((session, request_id)),
            ControlMessage::Fetch {
                request_id,
                track,
                mode,
            } => {
                self.stats.fetches += 1;
                let state = self.observe(&track);
                let objects = match mode {
                    FetchMode::Joining { offset, .. } => Ok(state.history.joining(offset)),
                    FetchMode::Standalone { start_group, end_group } if start_group > end_group => {
                        Err("empty range")
                    }
                    FetchMode::Standalone { start_group, end_group } => state
                        .history
                        .range(start_group, end_group)
                        .map_err(|_| "range no longer retained"),
                };
                match objects {
                    Ok(objects) => {
                        let largest_group = match (&mode, objects.last()) {
                            (_, Some((g, _))) => *g,
                            (FetchMode::Standalone { end_group, .. }, None) => {
                                state.history.latest_at_or_below(*end_group).unwrap_or(0)
                            }
                            (FetchMode::Joining { .. }, None) => state.history.latest_group().unwrap_or(0),
                        };
                        reply(io, ControlMessage::FetchOk {
                            request_id,
                            largest_group,
                        });
                        for (group, payload) in objects {
                            if io.send_object(session, ObjectMessage::new(request_id, group, payload)).is_ok() {
                                self.stats.fetched_objects += 1;
                            }
                        }
                    }
                    Err(reason) => reply(io, ControlMessage::FetchError {
                        request_id,
                        code: ErrorCode::TrackNotServed,
                        reason: reason.as_bytes().to_vec(),
                    }),
                }
            }
            other => warn!(%session, kind = other.kind(), "unexpected control message"),
        }
    }

    fn on_udp(&mut self, from: std::net::SocketAddr, payload: &[u8], io: &mut dyn Transport) {
        self.stats.udp_queries += 1;
        let Some(resp) = udp_response(&self.zone, payload) else {
            return;
        };
        match dns::encode_message(&resp) {
            Ok(bytes) => io.send_udp(SocketKind::Service, from, Bytes::from(bytes)),
            Err(e) => warn!("cannot encode response: {e}"),
        }
    }
}

/// Encoded answer for a track, header id 0.
fn current_payload(zone: &Zone, track: &TrackKey) -> Bytes {
    let resp = answer_question(zone, &track.query());
    track::response_payload(&resp).expect("authoritative answers encode")
}

/// Classic DNS handling of one datagram. Returns `None` for datagrams
/// that deserve no reply.
fn udp_response(zone: &Zone, payload: &[u8]) -> Option<Message> {
    let query = match dns::decode_message(payload) {
        Ok(q) => q,
        Err(_) if payload.len() >= dns::HEADER_LEN && payload[2] & 0x80 == 0 => {
            let mut m = Message::default();
            m.header.id = u16::from_be_bytes([payload[0], payload[1]]);
            m.header.qr = true;
            m.header.rcode = rcode::FORMERR;
            return Some(m);
        }
        Err(_) => return None,
    };
    if query.header.qr {
        return None;
    }
    let mut resp = match track::query_to_track(&query) {
        Ok(t) => answer_question(zone, &t.query()),
        Err(_) => {
            let mut m = Message::response_to(&query);
            m.header.rcode = rcode::FORMERR;
            return Some(m);
        }
    };
    resp.header.id = query.header.id;
    resp.questions = query.questions;
    Some(resp)
}

impl Node for Authoritative {
    fn handle(&mut self, event: Event, io: &mut dyn Transport) {
        match event {
            Event::Control { session, msg } => self.on_control(session, msg, io),
            Event::SessionClosed { session, .. } => {
                let keys: Vec<SubKey> = self
                    .subs
                    .range((session, 0)..=(session, u64::MAX))
                    .map(|(k, _)| *k)
                    .collect();
                for k in keys {
                    self.remove_sub(k);
                }
            }
            Event::Udp {
                socket: SocketKind::Service,
                from,
                payload,
            } => self.on_udp(from, &payload, io),
            Event::Object { session, .. } => warn!(%session, "unexpected object"),
            _ => {}
        }
    }
}
