//! Downstream service: subscriptions, fetches, UDP clients, fanout and
//! cache teardown.

use std::collections::BTreeSet;
use std::net::SocketAddr;

use bytes::Bytes;
use tracing::{debug, warn};

use super::{Answer, DownReq, Entry, MoqtState, Recursive, Source, UpstreamKey};
use crate::dns::{self, rcode, Message};
use crate::track::{self, TrackKey};
use crate::transport::{Observation, SessionId, SocketKind, Transport};
use crate::wire::{ControlMessage, ErrorCode, FetchMode, ObjectMessage};
use crate::Time;

enum Decision {
    Accept,
    Decline,
    Wait,
}

impl Recursive {
    pub(crate) fn entry_valid(&self, e: &Entry, now: Time) -> bool {
        e.view.is_some()
            && !e.stale
            && !e.links.is_empty()
            && e.links
                .iter()
                .all(|k| self.upstreams.get(k).is_some_and(|u| u.is_valid(now)))
    }

    pub(crate) fn has_subscribers(&self, track: &TrackKey) -> bool {
        self.entries.get(track).is_some_and(|e| !e.downstream.is_empty())
    }

    /// Someone downstream is subscribed to or waiting for `track`.
    pub(crate) fn has_interest(&self, track: &TrackKey) -> bool {
        self.entries
            .get(track)
            .is_some_and(|e| !e.downstream.is_empty() || !e.pending.is_empty() || !e.deciding.is_empty())
    }

    fn touch(&mut self, track: &TrackKey, now: Time) {
        let retention = self.cfg.retention;
        let e = self
            .entries
            .entry(track.clone())
            .or_insert_with(|| Entry::new(now, retention));
        e.last_accessed = now;
        for k in e.links.iter().chain(&e.referrals) {
            if let Some(up) = self.upstreams.get_mut(k) {
                up.last_used = now;
            }
        }
    }

    pub(super) fn on_downstream_control(&mut self, session: SessionId, msg: ControlMessage, io: &mut dyn Transport) {
        match msg {
            ControlMessage::Subscribe { request_id, track } => self.handle_subscribe(session, request_id, track, io),
            ControlMessage::Fetch {
                request_id,
                track,
                mode,
            } => {
                self.stats.downstream_fetches += 1;
                let now = io.now();
                self.touch(&track, now);
                let valid = self.entry_valid(&self.entries[&track], now);
                if valid {
                    self.answer_fetch(&track, session, request_id, &mode, io);
                } else {
                    self.entries.get_mut(&track).expect("touched").pending.push(DownReq::Fetch {
                        session,
                        req: request_id,
                        mode,
                    });
                    self.resolve_entry(&track, io);
                }
            }
            ControlMessage::Unsubscribe { request_id } => {
                if let Some(track) = self.downstream_subs.remove(&(session, request_id)) {
                    if let Some(e) = self.entries.get_mut(&track) {
                        e.downstream.remove(&(session, request_id));
                    }
                }
            }
            other => warn!(%session, kind = other.kind(), "unexpected control message from downstream"),
        }
    }

    fn handle_subscribe(&mut self, session: SessionId, req: u64, track: TrackKey, io: &mut dyn Transport) {
        self.stats.downstream_subscribes += 1;
        let refuse = if self.cfg.classic {
            Some((ErrorCode::SubscriptionsUnavailable, "subscriptions not offered"))
        } else if self.downstream_subs.contains_key(&(session, req)) {
            Some((ErrorCode::Internal, "duplicate request id"))
        } else {
            None
        };
        if let Some((code, reason)) = refuse {
            send_control(io, session, sub_error(req, code, reason));
            return;
        }
        let now = io.now();
        self.touch(&track, now);
        if !self.entry_valid(&self.entries[&track], now) {
            self.entries
                .get_mut(&track)
                .expect("touched")
                .pending
                .push(DownReq::Subscribe { session, req });
            self.resolve_entry(&track, io);
            return;
        }
        // A cached answer whose subscription was released: subscribe again.
        let links = self.entries[&track].links.clone();
        for k in &links {
            if !matches!(self.upstreams[k].moqt, MoqtState::Subscribed { .. }) {
                self.lookup(k, io);
            }
        }
        self.decide_subscribe(&track, session, req, io);
    }

    fn push_decision(&self, track: &TrackKey) -> Decision {
        let Some(e) = self.entries.get(track).filter(|e| e.view.is_some()) else {
            return Decision::Decline;
        };
        let mut all_pushed = true;
        let mut pending = false;
        for k in &e.links {
            let Some(up) = self.upstreams.get(k) else {
                all_pushed = false;
                continue;
            };
            match up.moqt {
                MoqtState::Subscribed { .. } if up.source == Source::Pushed => {}
                MoqtState::Connecting | MoqtState::Requested { .. } | MoqtState::Subscribed { .. } => {
                    all_pushed = false;
                    pending = true;
                }
                _ => all_pushed = false,
            }
        }
        if all_pushed || self.cfg.poll_fallback {
            Decision::Accept
        } else if pending {
            Decision::Wait
        } else {
            Decision::Decline
        }
    }

    fn decide_subscribe(&mut self, track: &TrackKey, session: SessionId, req: u64, io: &mut dyn Transport) {
        match self.push_decision(track) {
            Decision::Accept => {
                let e = self.entries.get_mut(track).expect("decided on an entry");
                let group = e.view.as_ref().map_or(0, |v| v.group);
                e.downstream.insert((session, req));
                self.downstream_subs.insert((session, req), track.clone());
                send_control(io, session, ControlMessage::SubscribeOk {
                    request_id: req,
                    largest_group: group,
                    exists: true,
                });
                let links = self.entries[track].links.clone();
                for k in &links {
                    self.ensure_poll(k, io);
                }
            }
            Decision::Decline => {
                self.stats.downstream_declines += 1;
                send_control(
                    io,
                    session,
                    sub_error(req, ErrorCode::SubscriptionsUnavailable, "no updates available upstream"),
                );
            }
            Decision::Wait => {
                self.entries
                    .get_mut(track)
                    .expect("decided on an entry")
                    .deciding
                    .push((session, req));
            }
        }
    }

    /// Answers subscribes that were waiting for the upstream MoQT outcome.
    pub(crate) fn decide_waiting(&mut self, track: &TrackKey, io: &mut dyn Transport) {
        let Some(e) = self.entries.get_mut(track) else { return };
        let waiting = std::mem::take(&mut e.deciding);
        for (session, req) in waiting {
            self.decide_subscribe(track, session, req, io);
        }
    }

    fn answer_fetch(&mut self, track: &TrackKey, session: SessionId, req: u64, mode: &FetchMode, io: &mut dyn Transport) {
        let e = &self.entries[track];
        let objects = match *mode {
            FetchMode::Joining { offset, .. } => Ok(e.history.joining(offset)),
            FetchMode::Standalone { start_group, end_group } if start_group > end_group => Err("empty range"),
            FetchMode::Standalone { start_group, end_group } => e
                .history
                .range(start_group, end_group)
                .map_err(|_| "range no longer retained"),
        };
        match objects {
            Ok(objects) => {
                let largest_group = match (mode, objects.last()) {
                    (_, Some((g, _))) => *g,
                    (FetchMode::Standalone { end_group, .. }, None) => e.history.latest_at_or_below(*end_group).unwrap_or(0),
                    (FetchMode::Joining { .. }, None) => e.history.latest_group().unwrap_or(0),
                };
                send_control(io, session, ControlMessage::FetchOk {
                    request_id: req,
                    largest_group,
                });
                for (group, payload) in objects {
                    if io.send_object(session, ObjectMessage::new(req, group, payload)).is_ok() {
                        self.stats.objects_forwarded += 1;
                    }
                }
            }
            Err(reason) => send_control(io, session, ControlMessage::FetchError {
                request_id: req,
                code: ErrorCode::TrackNotServed,
                reason: reason.as_bytes().to_vec(),
            }),
        }
    }

    pub(super) fn on_udp_query(&mut self, from: SocketAddr, payload: &[u8], io: &mut dyn Transport) {
        self.stats.downstream_udp_queries += 1;
        let query = match dns::decode_message(payload) {
            Ok(q) if !q.header.qr => q,
            Ok(_) => return,
            Err(_) => {
                if let Some(resp) = formerr_for(payload) {
                    send_udp(io, from, &resp);
                }
                return;
            }
        };
        let track = match track::query_to_track(&query) {
            Ok(t) => t,
            Err(_) => {
                let mut resp = Message::response_to(&query);
                resp.header.rcode = rcode::FORMERR;
                send_udp(io, from, &resp);
                return;
            }
        };
        let now = io.now();
        self.touch(&track, now);
        if self.entry_valid(&self.entries[&track], now) {
            self.stats.cache_hits += 1;
            self.reply_udp(&track, from, &query, io);
        } else {
            self.entries
                .get_mut(&track)
                .expect("touched")
                .pending
                .push(DownReq::Udp { from, query });
            self.resolve_entry(&track, io);
        }
    }

    fn reply_udp(&self, track: &TrackKey, from: SocketAddr, query: &Message, io: &mut dyn Transport) {
        let Some(view) = self.entries.get(track).and_then(|e| e.view.as_ref()) else {
            return;
        };
        let mut resp = view.msg.clone();
        resp.header.id = query.header.id;
        resp.header.ra = true;
        resp.questions = query.questions.clone();
        send_udp(io, from, &resp);
    }

    pub(crate) fn serve_pending(&mut self, track: &TrackKey, io: &mut dyn Transport) {
        let Some(e) = self.entries.get_mut(track) else { return };
        if e.view.is_none() {
            self.fail_pending(track, io);
            return;
        }
        let pending = std::mem::take(&mut e.pending);
        for p in pending {
            match p {
                DownReq::Subscribe { session, req } => self.decide_subscribe(track, session, req, io),
                DownReq::Fetch { session, req, mode } => self.answer_fetch(track, session, req, &mode, io),
                DownReq::Udp { from, query } => self.reply_udp(track, from, &query, io),
            }
        }
    }

    pub(crate) fn fail_pending(&mut self, track: &TrackKey, io: &mut dyn Transport) {
        let Some(e) = self.entries.get_mut(track) else { return };
        let pending = std::mem::take(&mut e.pending);
        for p in pending {
            match p {
                DownReq::Subscribe { session, req } => {
                    send_control(io, session, sub_error(req, ErrorCode::Internal, "resolution failed"))
                }
                DownReq::Fetch { session, req, .. } => send_control(io, session, ControlMessage::FetchError {
                    request_id: req,
                    code: ErrorCode::TrackNotServed,
                    reason: b"resolution failed".to_vec(),
                }),
                DownReq::Udp { from, query } => {
                    let mut resp = Message::response_to(&query);
                    resp.header.ra = true;
                    resp.header.rcode = rcode::SERVFAIL;
                    send_udp(io, from, &resp);
                }
            }
        }
    }

    pub(crate) fn upstream_changed(&mut self, track: &TrackKey, key: &UpstreamKey, changed: bool, io: &mut dyn Transport) {
        let Some(e) = self.entries.get(track) else { return };
        if e.links.contains(key) {
            self.recompute_entry(track, io);
        } else if changed && e.referrals.contains(key) && e.task.is_none() {
            // The delegation changed; keep serving until the new path is
            // known.
            self.resolve_entry(track, io);
        }
    }

    /// Rebuilds the downstream answer from the upstream answers and
    /// publishes it if it changed.
    pub(crate) fn recompute_entry(&mut self, track: &TrackKey, io: &mut dyn Transport) {
        let Some(e) = self.entries.get(track) else { return };
        if e.links.is_empty() {
            return;
        }
        let Some(answers) = e
            .links
            .iter()
            .map(|k| self.upstreams.get(k).and_then(|u| u.answer.clone()))
            .collect::<Option<Vec<Answer>>>()
        else {
            return;
        };
        let single = answers.len() == 1;
        let up_group = if single { answers[0].group } else { 0 };
        let Some((msg, payload)) = compose(track, &answers) else { return };
        let e = self.entries.get_mut(track).expect("checked above");
        let publish = match &mut e.view {
            None => {
                let group = if single { up_group } else { 0 };
                e.view = Some(Answer {
                    msg: msg.clone(),
                    payload: payload.clone(),
                    group,
                });
                Some(group)
            }
            Some(v) if v.payload == payload => {
                if single {
                    let target = up_group + e.offset;
                    if target > v.group {
                        // Same answer under a newer origin group.
                        v.group = target;
                        v.msg = msg.clone();
                        e.history.push(target, payload.clone());
                    } else if target < v.group {
                        e.offset = v.group - up_group;
                    }
                }
                None
            }
            Some(v) => {
                let group = if single && up_group + e.offset > v.group {
                    up_group + e.offset
                } else {
                    if single {
                        e.offset = v.group + 1 - up_group;
                    }
                    v.group + 1
                };
                *v = Answer {
                    msg: msg.clone(),
                    payload: payload.clone(),
                    group,
                };
                Some(group)
            }
        };
        let Some(group) = publish else { return };
        if !(single && group == up_group) {
            self.stats.synthesized_groups += 1;
        }
        e.history.push(group, payload.clone());
        io.record(Observation::Answer {
            track: track.clone(),
            group,
            fingerprint: msg.answer_fingerprint(),
        });
        let mut dead = Vec::new();
        for &(session, req) in &e.downstream {
            match io.send_object(session, ObjectMessage::new(req, group, payload.clone())) {
                Ok(()) => self.stats.objects_forwarded += 1,
                Err(err) => {
                    debug!(%session, "downstream push failed: {err}");
                    dead.push((session, req));
                }
            }
        }
        for k in dead {
            e.downstream.remove(&k);
            self.downstream_subs.remove(&k);
        }
    }

    /// The upstream subscription behind `key` is gone for good.
    pub(crate) fn lost_push(&mut self, key: &UpstreamKey, io: &mut dyn Transport) {
        if self.cfg.poll_fallback {
            return;
        }
        let Some(up) = self.upstreams.get(key) else { return };
        let dependents: Vec<_> = up.dependents.iter().cloned().collect();
        for t in dependents {
            if self.entries.get(&t).is_some_and(|e| e.links.contains(key)) {
                self.end_subscribers(&t, "upstream subscription ended", io);
            }
        }
    }

    /// Marks the entry unusable and ends its downstream subscriptions.
    pub(crate) fn entry_stale(&mut self, track: &TrackKey, reason: &str, io: &mut dyn Transport) {
        if let Some(e) = self.entries.get_mut(track) {
            e.stale = true;
        }
        self.end_subscribers(track, reason, io);
    }

    fn end_subscribers(&mut self, track: &TrackKey, reason: &str, io: &mut dyn Transport) {
        let Some(e) = self.entries.get_mut(track) else { return };
        let subs = std::mem::take(&mut e.downstream);
        let deciding = std::mem::take(&mut e.deciding);
        for (session, req) in subs {
            self.downstream_subs.remove(&(session, req));
            send_control(io, session, sub_error(req, ErrorCode::Internal, reason));
        }
        for (session, req) in deciding {
            send_control(io, session, sub_error(req, ErrorCode::SubscriptionsUnavailable, reason));
        }
    }

    pub(super) fn on_downstream_closed(&mut self, session: SessionId) {
        let subs: Vec<(SessionId, u64)> = self
            .downstream_subs
            .range((session, 0)..=(session, u64::MAX))
            .map(|(k, _)| *k)
            .collect();
        for k in subs {
            if let Some(track) = self.downstream_subs.remove(&k) {
                if let Some(e) = self.entries.get_mut(&track) {
                    e.downstream.remove(&k);
                }
            }
        }
        for e in self.entries.values_mut() {
            e.pending.retain(|p| match p {
                DownReq::Subscribe { session: s, .. } | DownReq::Fetch { session: s, .. } => *s != session,
                DownReq::Udp { .. } => true,
            });
            e.deciding.retain(|(s, _)| *s != session);
        }
    }

    /// Periodic cleanup of idle entries, subscriptions and sessions.
    pub(super) fn sweep(&mut self, io: &mut dyn Transport) {
        let now = io.now();
        let idle = self.cfg.idle_timeout;
        let idle_entries: Vec<TrackKey> = self
            .entries
            .iter()
            .filter(|(_, e)| {
                e.downstream.is_empty()
                    && e.pending.is_empty()
                    && e.deciding.is_empty()
                    && e.task.is_none()
                    && now.since(e.last_accessed) >= idle
            })
            .map(|(k, _)| k.clone())
            .collect();
        for t in idle_entries {
            let e = self.entries.remove(&t).expect("collected above");
            for k in e.links.iter().chain(&e.referrals) {
                if let Some(up) = self.upstreams.get_mut(k) {
                    up.dependents.remove(&t);
                }
            }
        }

        let unused: Vec<UpstreamKey> = self
            .upstreams
            .iter()
            .filter(|(_, u)| u.dependents.is_empty() && u.waiters.is_empty() && now.since(u.last_used) >= idle)
            .map(|(k, _)| k.clone())
            .collect();
        for k in unused {
            self.unsubscribe(&k, io);
            let up = &self.upstreams[&k];
            if !up.in_flight() && !up.is_valid(now) && up.poll_timer.is_none() {
                self.upstreams.remove(&k);
            }
        }

        let busy: BTreeSet<SessionId> = self.requests.keys().map(|(s, _)| *s).collect();
        let linger = self.cfg.session_linger;
        let mut close = Vec::new();
        for (ip, s) in &mut self.sessions {
            if busy.contains(&s.id) || !s.waiting.is_empty() || !s.up {
                s.idle_since = None;
                continue;
            }
            let since = *s.idle_since.get_or_insert(now);
            if now.since(since) >= linger {
                close.push(*ip);
            }
        }
        for ip in close {
            let s = self.sessions.remove(&ip).expect("collected above");
            self.session_ip.remove(&s.id);
            debug!(server = %ip, "closing idle upstream session");
            io.close_session(s.id);
        }

        self.delegations.retain(|_, d| d.expires > now);
        let cap_ttl = self.cfg.capability_ttl;
        self.caps.retain(|_, (_, learned)| now.since(*learned) < cap_ttl);
    }
}

/// Builds the downstream answer for `track`, concatenating the answers of a
/// CNAME chain that crosses zones. Header flags follow the downstream
/// question since upstream queries are sent without RD.
fn compose(track: &TrackKey, answers: &[Answer]) -> Option<(Message, Bytes)> {
    let q = track.query();
    let mut m = answers.first()?.msg.clone();
    m.header.id = 0;
    m.header.aa = false;
    m.header.ra = true;
    m.header.rd = q.rd;
    m.header.cd = q.cd;
    for a in &answers[1..] {
        m.answers.extend(a.msg.answers.iter().cloned());
    }
    let last = &answers.last()?.msg;
    m.header.rcode = last.header.rcode;
    m.authority = last.authority.clone();
    m.additional.clear();
    let bytes = dns::encode_message(&m).ok()?;
    Some((m, Bytes::from(bytes)))
}

fn sub_error(req: u64, code: ErrorCode, reason: &str) -> ControlMessage {
    ControlMessage::SubscribeError {
        request_id: req,
        code,
        reason: reason.as_bytes().to_vec(),
    }
}

fn send_control(io: &mut dyn Transport, session: SessionId, msg: ControlMessage) {
    if let Err(e) = io.send_control(session, msg) {
        debug!(%session, "downstream reply dropped: {e}");
    }
}

fn send_udp(io: &mut dyn Transport, to: SocketAddr, msg: &Message) {
    match dns::encode_message(msg) {
        Ok(bytes) => io.send_udp(SocketKind::Service, to, Bytes::from(bytes)),
        Err(e) => warn!("cannot encode response: {e}"),
    }
}

/// FORMERR for an undecodable query, if the header is readable.
pub(crate) fn formerr_for(payload: &[u8]) -> Option<Message> {
    if payload.len() < dns::HEADER_LEN || payload[2] & 0x80 != 0 {
        return None;
    }
    let mut m = Message::default();
    m.header.id = u16::from_be_bytes([payload[0], payload[1]]);
    m.header.qr = true;
    m.header.rcode = rcode::FORMERR;
    Some(m)
}
