//! Per-server lookups: MoQT subscriptions, UDP queries and polling.

use std::net::SocketAddr;
use std::time::Duration;

use bytes::Bytes;
use rand::Rng;
use tracing::{debug, warn};

use super::{Answer, Capability, MoqtState, Recursive, ReqKind, RTimer, Source, UdpQuery, UpSession, Upstream, UpstreamKey};
use crate::dns::{self, rcode, Message, RecordType};
use crate::track;
use crate::transport::{SessionId, SocketKind, Transport, ALPN};
use crate::wire::{ControlMessage, FetchMode, ObjectMessage};
use crate::Time;

/// How long an answer may be cached: the smallest answer TTL, else the NS
/// TTL of a referral, else the SOA TTL of a negative answer.
pub(crate) fn answer_ttl(msg: &Message, negative: Duration) -> Duration {
    if matches!(msg.header.rcode, rcode::SERVFAIL | rcode::REFUSED | rcode::NOTIMP | rcode::FORMERR) {
        return Duration::ZERO;
    }
    let secs = msg.min_answer_ttl().or_else(|| {
        let ns = msg.authority.iter().filter(|r| r.rtype() == RecordType::Ns).map(|r| r.ttl).min();
        ns.or_else(|| {
            msg.authority
                .iter()
                .filter(|r| r.rtype() == RecordType::Other(6))
                .map(|r| r.ttl)
                .min()
        })
    });
    secs.map_or(negative, |s| Duration::from_secs(u64::from(s)))
}

enum Via {
    Moqt(u64),
    Udp { poll: bool },
}

impl Recursive {
    pub(crate) fn set_capability(&mut self, server: std::net::IpAddr, cap: Capability, now: Time) {
        if !self.pinned_caps.contains_key(&server) {
            self.caps.insert(server, (cap, now));
        }
    }

    /// Makes sure an answer for `key` is available or on its way. Returns
    /// true if a usable answer is cached right now.
    pub(crate) fn lookup(&mut self, key: &UpstreamKey, io: &mut dyn Transport) -> bool {
        let now = io.now();
        let cap = self.capability(key.server, now);
        let up = self.upstreams.entry(key.clone()).or_insert_with(|| Upstream::new(now));
        up.last_used = now;
        let valid = up.is_valid(now);
        if !valid && !up.in_flight() {
            up.udp_exhausted = false;
        }
        let want_moqt = cap != Capability::No
            && matches!(up.moqt, MoqtState::Idle | MoqtState::Failed | MoqtState::Declined);
        let want_udp = !valid && up.udp.is_none() && !up.udp_exhausted && cap != Capability::Yes;
        if want_moqt {
            self.start_moqt(key, io);
        }
        if want_udp {
            self.udp_query(key, false, io);
        }
        valid
    }

    fn start_moqt(&mut self, key: &UpstreamKey, io: &mut dyn Transport) {
        let server = key.server;
        if let Some(s) = self.sessions.get_mut(&server) {
            if s.up {
                let id = s.id;
                self.send_moqt_requests(key, id, io);
                return;
            }
            s.waiting.insert(key.clone());
        } else {
            let id = io.open_session(SocketAddr::new(server, self.cfg.moqt_port), ALPN);
            self.session_ip.insert(id, server);
            self.sessions.insert(
                server,
                UpSession {
                    id,
                    up: false,
                    waiting: [key.clone()].into(),
                    idle_since: None,
                },
            );
        }
        if let Some(up) = self.upstreams.get_mut(key) {
            up.moqt = MoqtState::Connecting;
            up.fetch_done = false;
        }
    }

    fn send_moqt_requests(&mut self, key: &UpstreamKey, session: SessionId, io: &mut dyn Transport) {
        self.make_room(io);
        let sub = self.next_request_id();
        let fetch = self.next_request_id();
        let subscribe = ControlMessage::Subscribe {
            request_id: sub,
            track: key.track.clone(),
        };
        let joining = ControlMessage::Fetch {
            request_id: fetch,
            track: key.track.clone(),
            mode: FetchMode::Joining {
                joining_request_id: sub,
                offset: 1,
            },
        };
        if io.send_control(session, subscribe).is_err() || io.send_control(session, joining).is_err() {
            debug!(%session, "upstream session unusable");
            self.moqt_failed(key, io);
            return;
        }
        self.stats.upstream_subscribes += 1;
        self.stats.upstream_fetches += 1;
        self.requests.insert((session, sub), (key.clone(), ReqKind::Subscribe));
        self.requests.insert((session, fetch), (key.clone(), ReqKind::Fetch));
        if let Some(up) = self.upstreams.get_mut(key) {
            up.moqt = MoqtState::Requested { session, sub };
            up.fetch_done = false;
        }
    }

    /// Evicts the least recently used subscription nobody downstream needs
    /// if the subscription limit is reached.
    fn make_room(&mut self, io: &mut dyn Transport) {
        let active = self
            .upstreams
            .values()
            .filter(|u| matches!(u.moqt, MoqtState::Requested { .. } | MoqtState::Subscribed { .. }))
            .count();
        if active < self.cfg.max_subscriptions {
            return;
        }
        let victim = self
            .upstreams
            .iter()
            .filter(|(_, u)| matches!(u.moqt, MoqtState::Subscribed { .. }))
            .filter(|(_, u)| u.dependents.iter().all(|t| !self.has_interest(t)))
            .min_by_key(|(_, u)| u.last_used)
            .map(|(k, _)| k.clone());
        match victim {
            Some(k) => {
                self.stats.evictions += 1;
                self.unsubscribe(&k, io);
            }
            None => warn!(active, "subscription limit reached with every subscription in use"),
        }
    }

    /// Drops the upstream subscription; the cached answer stays valid for
    /// its TTL.
    pub(crate) fn unsubscribe(&mut self, key: &UpstreamKey, io: &mut dyn Transport) {
        let now = io.now();
        let negative = self.cfg.negative_ttl;
        let Some(up) = self.upstreams.get_mut(key) else { return };
        let (session, sub) = match up.moqt {
            MoqtState::Requested { session, sub } | MoqtState::Subscribed { session, sub } => (session, sub),
            _ => return,
        };
        up.moqt = MoqtState::Idle;
        if up.source == Source::Pushed {
            up.source = Source::Fetched;
            up.expires = up.answer.as_ref().map(|a| now + answer_ttl(&a.msg, negative));
        }
        self.requests.remove(&(session, sub));
        if io.send_control(session, ControlMessage::Unsubscribe { request_id: sub }).is_ok() {
            self.stats.upstream_unsubscribes += 1;
        }
    }

    pub(crate) fn udp_query(&mut self, key: &UpstreamKey, poll: bool, io: &mut dyn Transport) {
        let id = loop {
            let id: u16 = self.rng.random();
            if !self.udp.contains_key(&id) {
                break id;
            }
        };
        let at = io.now() + self.cfg.udp_timeout;
        let timer = self.timers.set(io, at, RTimer::UdpRetry(id));
        self.udp.insert(
            id,
            UdpQuery {
                key: key.clone(),
                attempt: 1,
                timer,
                sent_at: io.now(),
            },
        );
        if let Some(up) = self.upstreams.get_mut(key) {
            up.udp = Some(id);
            up.polling = poll;
        }
        self.send_udp_query(key, id, io);
    }

    fn send_udp_query(&mut self, key: &UpstreamKey, id: u16, io: &mut dyn Transport) {
        let msg = key.track.query().to_message(id);
        match dns::encode_message(&msg) {
            Ok(bytes) => {
                self.stats.upstream_udp_queries += 1;
                let to = SocketAddr::new(key.server, self.cfg.udp_port);
                io.send_udp(SocketKind::Client, to, Bytes::from(bytes));
            }
            Err(e) => warn!("cannot encode upstream query: {e}"),
        }
    }

    pub(super) fn on_udp_timeout(&mut self, id: u16, token: u64, io: &mut dyn Transport) {
        let Some(q) = self.udp.get_mut(&id) else { return };
        if q.timer != token {
            return;
        }
        if q.attempt < self.cfg.udp_attempts {
            q.attempt += 1;
            let key = q.key.clone();
            let at = io.now() + self.cfg.udp_timeout;
            q.timer = self.timers.set(io, at, RTimer::UdpRetry(id));
            self.send_udp_query(&key, id, io);
            return;
        }
        let q = self.udp.remove(&id).expect("checked above");
        let Some(up) = self.upstreams.get_mut(&q.key) else { return };
        up.udp = None;
        let poll = std::mem::take(&mut up.polling);
        if poll {
            self.poll_failed(&q.key, io);
            return;
        }
        up.udp_exhausted = true;
        let moqt_pending = up.in_flight();
        if !moqt_pending {
            self.upstream_unreachable(&q.key, io);
        }
    }

    pub(super) fn on_udp_response(&mut self, from: SocketAddr, payload: &[u8], io: &mut dyn Transport) {
        let Ok(mut msg) = dns::decode_message(payload) else {
            debug!(%from, "undecodable upstream response");
            return;
        };
        let id = msg.header.id;
        let Some(q) = self.udp.get(&id) else { return };
        if q.key.server != from.ip() || !msg.header.qr {
            return;
        }
        if track::question_track(&msg).ok().as_ref() != Some(&q.key.track) {
            debug!(%from, "upstream response for a different question");
            return;
        }
        let q = self.udp.remove(&id).expect("checked above");
        self.timers.cancel(q.timer);
        let Some(up) = self.upstreams.get_mut(&q.key) else { return };
        up.udp = None;
        let poll = std::mem::take(&mut up.polling);
        up.refreshed_at = q.sent_at;
        msg.header.id = 0;
        let Ok(bytes) = dns::encode_message(&msg) else { return };
        self.upstream_answer(&q.key, msg, Bytes::from(bytes), Via::Udp { poll }, io);
    }

    pub(super) fn on_upstream_up(&mut self, session: SessionId, io: &mut dyn Transport) {
        let Some(&server) = self.session_ip.get(&session) else {
            return;
        };
        self.set_capability(server, Capability::Yes, io.now());
        let Some(s) = self.sessions.get_mut(&server) else { return };
        s.up = true;
        let waiting = std::mem::take(&mut s.waiting);
        for key in waiting {
            if self.upstreams.contains_key(&key) {
                self.send_moqt_requests(&key, session, io);
            }
        }
    }

    pub(super) fn on_upstream_failed(&mut self, session: SessionId, io: &mut dyn Transport) {
        let Some(server) = self.session_ip.remove(&session) else {
            return;
        };
        self.set_capability(server, Capability::No, io.now());
        let Some(s) = self.sessions.remove(&server) else { return };
        for key in s.waiting {
            if let Some(up) = self.upstreams.get_mut(&key) {
                up.moqt = MoqtState::Failed;
            }
            self.moqt_failed(&key, io);
        }
    }

    pub(super) fn on_upstream_closed(&mut self, session: SessionId, io: &mut dyn Transport) {
        let Some(server) = self.session_ip.remove(&session) else {
            return;
        };
        self.sessions.remove(&server);
        let stale: Vec<(SessionId, u64)> = self
            .requests
            .range((session, 0)..=(session, u64::MAX))
            .map(|(k, _)| *k)
            .collect();
        for k in &stale {
            self.requests.remove(&(session, k.1));
        }
        let affected: Vec<UpstreamKey> = self
            .upstreams
            .iter()
            .filter(|(_, u)| {
                matches!(u.moqt, MoqtState::Requested { session: s, .. } | MoqtState::Subscribed { session: s, .. } if s == session)
            })
            .map(|(k, _)| k.clone())
            .collect();
        let now = io.now();
        for key in affected {
            let up = self.upstreams.get_mut(&key).expect("collected above");
            let was_fetching = !up.fetch_done;
            up.moqt = MoqtState::Idle;
            if up.source == Source::Pushed {
                // Pushed answers are not served again until revalidated.
                up.source = Source::Fetched;
                up.expires = Some(now);
            }
            let waiting = !up.waiters.is_empty();
            let interest = self.upstreams[&key].dependents.iter().any(|t| self.has_interest(t));
            if waiting && was_fetching {
                self.moqt_failed(&key, io);
            } else if interest {
                self.lookup(&key, io);
            }
        }
    }

    /// The MoQT path for `key` ended without an answer.
    fn moqt_failed(&mut self, key: &UpstreamKey, io: &mut dyn Transport) {
        let now = io.now();
        let Some(up) = self.upstreams.get_mut(key) else { return };
        if !matches!(up.moqt, MoqtState::Declined) {
            up.moqt = MoqtState::Failed;
        }
        up.fetch_done = true;
        if up.is_valid(now) {
            // Already answered over UDP; polling may need to take over.
            self.upstream_interest_changed(key, io);
            return;
        }
        if up.udp.is_some() {
            return;
        }
        if up.udp_exhausted {
            self.upstream_unreachable(key, io);
        } else {
            self.udp_query(key, false, io);
        }
    }

    /// Both paths to the server failed.
    fn upstream_unreachable(&mut self, key: &UpstreamKey, io: &mut dyn Transport) {
        let Some(up) = self.upstreams.get_mut(key) else { return };
        let waiters = std::mem::take(&mut up.waiters);
        let dependents: Vec<_> = up.dependents.iter().cloned().collect();
        debug!(server = %key.server, track = %key.track, "upstream unreachable");
        for task in waiters {
            self.task_server_failed(task, key, io);
        }
        for t in dependents {
            if self.has_interest(&t) {
                self.resolve_entry(&t, io);
            }
        }
    }

    pub(super) fn on_upstream_control(&mut self, session: SessionId, msg: ControlMessage, io: &mut dyn Transport) {
        let Some(req) = msg.request_id() else {
            warn!(%session, kind = msg.kind(), "unexpected control message from upstream");
            return;
        };
        let Some((key, kind)) = self.requests.get(&(session, req)).cloned() else {
            debug!(%session, req, kind = msg.kind(), "reply to unknown request");
            return;
        };
        let now = io.now();
        match (msg, kind) {
            (ControlMessage::SubscribeOk { .. }, ReqKind::Subscribe) => {
                let Some(up) = self.upstreams.get_mut(&key) else { return };
                up.moqt = MoqtState::Subscribed { session, sub: req };
                if up.origin_numbered {
                    up.source = Source::Pushed;
                }
                if let Some(t) = up.poll_timer.take() {
                    self.timers.cancel(t);
                }
                self.upstream_interest_changed(&key, io);
            }
            (ControlMessage::SubscribeError { code, .. }, ReqKind::Subscribe) => {
                self.requests.remove(&(session, req));
                let negative = self.cfg.negative_ttl;
                let Some(up) = self.upstreams.get_mut(&key) else { return };
                let established = matches!(up.moqt, MoqtState::Subscribed { .. });
                debug!(server = %key.server, ?code, established, "upstream subscription declined or ended");
                up.moqt = MoqtState::Declined;
                if up.source == Source::Pushed {
                    up.source = Source::Fetched;
                    up.expires = up.answer.as_ref().map(|a| now + answer_ttl(&a.msg, negative));
                }
                self.upstream_interest_changed(&key, io);
                self.lost_push(&key, io);
            }
            (ControlMessage::FetchOk { .. }, ReqKind::Fetch) => {}
            (ControlMessage::FetchError { .. }, ReqKind::Fetch) => {
                self.requests.remove(&(session, req));
                self.moqt_failed(&key, io);
            }
            (other, _) => warn!(%session, kind = other.kind(), "control message does not match request"),
        }
    }

    pub(super) fn on_upstream_object(&mut self, session: SessionId, obj: ObjectMessage, io: &mut dyn Transport) {
        let Some((key, kind)) = self.requests.get(&(session, obj.request_id)).cloned() else {
            warn!(%session, req = obj.request_id, "object for unknown request id, closing session");
            io.close_session(session);
            self.on_upstream_closed(session, io);
            return;
        };
        if kind == ReqKind::Fetch {
            self.requests.remove(&(session, obj.request_id));
        }
        let msg = match dns::decode_message(&obj.payload) {
            Ok(m) => m,
            Err(e) => {
                warn!(%session, "undecodable object payload: {e}");
                return;
            }
        };
        if track::question_track(&msg).ok().as_ref() != Some(&key.track) {
            warn!(%session, "object payload answers a different question");
            return;
        }
        if let Some(up) = self.upstreams.get_mut(&key) {
            up.fetch_done = true;
        }
        self.upstream_answer(&key, msg, obj.payload, Via::Moqt(obj.group_id), io);
    }

    fn upstream_answer(&mut self, key: &UpstreamKey, msg: Message, payload: Bytes, via: Via, io: &mut dyn Transport) {
        let now = io.now();
        let ttl = answer_ttl(&msg, self.cfg.negative_ttl);
        let Some(up) = self.upstreams.get_mut(key) else { return };
        let prev = up.answer.as_ref().map(|a| (a.group, a.payload.clone()));
        let group = match via {
            Via::Moqt(g) => {
                if up.origin_numbered && prev.as_ref().is_some_and(|(pg, _)| *pg >= g) {
                    debug!(server = %key.server, group = g, "stale object dropped");
                    return;
                }
                up.origin_numbered = true;
                up.refreshed_at = now;
                up.source = match up.moqt {
                    MoqtState::Subscribed { .. } | MoqtState::Requested { .. } => Source::Pushed,
                    _ => Source::Fetched,
                };
                g
            }
            Via::Udp { poll } => {
                if up.is_valid(now) && up.source == Source::Pushed {
                    return;
                }
                up.source = if poll { Source::Polled } else { Source::Udp };
                if poll {
                    up.poll_failures = 0;
                }
                match &prev {
                    Some((g, p)) if *p == payload => *g,
                    Some((g, _)) => g + 1,
                    None => 0,
                }
            }
        };
        up.expires = Some(now + ttl);
        up.stale = false;
        let changed = prev.as_ref().is_none_or(|(_, p)| *p != payload);
        up.answer = Some(Answer { msg, payload, group });
        let dependents: Vec<_> = up.dependents.iter().cloned().collect();
        let waiters = std::mem::take(&mut up.waiters);
        for t in dependents {
            self.upstream_changed(&t, key, changed, io);
        }
        for task in waiters {
            self.task_answer(task, key, io);
        }
        self.upstream_interest_changed(key, io);
    }

    /// Re-checks pending downstream decisions and polling after the state
    /// of `key` changed.
    fn upstream_interest_changed(&mut self, key: &UpstreamKey, io: &mut dyn Transport) {
        let Some(up) = self.upstreams.get(key) else { return };
        let dependents: Vec<_> = up.dependents.iter().cloned().collect();
        for t in &dependents {
            self.decide_waiting(t, io);
        }
        if dependents.iter().any(|t| self.has_subscribers(t)) {
            self.ensure_poll(key, io);
        }
    }

    pub(crate) fn poll_interval(&self, key: &UpstreamKey) -> Duration {
        let ttl = self.upstreams[key]
            .answer
            .as_ref()
            .map_or(Duration::ZERO, |a| answer_ttl(&a.msg, self.cfg.negative_ttl));
        ttl.max(self.cfg.poll_floor)
    }

    /// Starts polling `key` if downstream subscribers rely on it and no
    /// push is coming.
    pub(crate) fn ensure_poll(&mut self, key: &UpstreamKey, io: &mut dyn Transport) {
        if !self.cfg.poll_fallback {
            return;
        }
        let Some(up) = self.upstreams.get(key) else { return };
        if up.poll_timer.is_some()
            || up.answer.is_none()
            || matches!(up.moqt, MoqtState::Subscribed { .. } | MoqtState::Requested { .. } | MoqtState::Connecting)
        {
            return;
        }
        let at = up.refreshed_at + self.poll_interval(key);
        let at = at.max(io.now());
        let token = self.timers.set(io, at, RTimer::Poll(key.clone()));
        self.upstreams.get_mut(key).expect("checked above").poll_timer = Some(token);
    }

    pub(super) fn on_poll_timer(&mut self, key: UpstreamKey, token: u64, io: &mut dyn Transport) {
        let Some(up) = self.upstreams.get(&key) else { return };
        if up.poll_timer != Some(token) {
            return;
        }
        let pushed = matches!(up.moqt, MoqtState::Subscribed { .. });
        let busy = up.udp.is_some();
        let interest = up.dependents.iter().any(|t| self.has_subscribers(t));
        self.upstreams.get_mut(&key).expect("checked above").poll_timer = None;
        if pushed || !interest {
            return;
        }
        if !busy {
            self.stats.polls += 1;
            self.udp_query(&key, true, io);
        }
        // The next poll is due one interval after this one was sent.
        let up = self.upstreams.get_mut(&key).expect("checked above");
        up.refreshed_at = io.now();
        let at = io.now() + self.poll_interval(&key);
        let token = self.timers.set(io, at, RTimer::Poll(key.clone()));
        self.upstreams.get_mut(&key).expect("checked above").poll_timer = Some(token);
    }

    fn poll_failed(&mut self, key: &UpstreamKey, io: &mut dyn Transport) {
        self.stats.poll_failures += 1;
        let max = self.cfg.max_poll_failures;
        let Some(up) = self.upstreams.get_mut(key) else { return };
        up.poll_failures += 1;
        if up.poll_failures < max {
            return;
        }
        up.stale = true;
        if let Some(t) = up.poll_timer.take() {
            self.timers.cancel(t);
        }
        let dependents: Vec<_> = up.dependents.iter().cloned().collect();
        for t in dependents {
            self.entry_stale(&t, "upstream unreachable", io);
        }
    }
}
