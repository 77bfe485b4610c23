//! Stub-side forwarder.
//!
//! Local clients send classic DNS queries over UDP. Each question maps to
//! a track on the upstream recursive resolver, which the forwarder
//! subscribes to on first use (pipelining Subscribe with a joining fetch).
//! Answers are then served from the subscription cache. The last group
//! seen per track is persisted so that after a restart only the missed
//! groups are fetched.
//!
//! [`UpstreamMode::Udp`] turns the forwarder into a classic TTL-caching
//! stub resolver, used as the baseline in comparisons.

mod store;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::time::Duration;

use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tracing::{debug, warn};

pub use store::{track_hash, ResumeStore, StoreError};

use crate::dns::{self, rcode, Message};
use crate::recursive::answer_ttl;
use crate::track::{self, TrackKey};
use crate::transport::{Event, Node, Observation, Role, SessionId, SocketKind, Timers, Transport, ALPN};
use crate::wire::{ControlMessage, FetchMode, ObjectMessage};
use crate::Time;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpstreamMode {
    /// Subscriptions to a recursive resolver over MoQT-lite.
    Moqt,
    /// Classic UDP forwarding with TTL caching.
    Udp,
}

#[derive(Clone, Debug)]
pub struct ForwarderConfig {
    pub upstream: SocketAddr,
    pub mode: UpstreamMode,
    /// Tracks unused for this long are unsubscribed and forgotten.
    pub idle_timeout: Duration,
    /// A client query unanswered for this long gets SERVFAIL.
    pub client_timeout: Duration,
    pub reconnect_min: Duration,
    pub reconnect_max: Duration,
    pub udp_timeout: Duration,
    pub udp_attempts: u32,
    /// Cache lifetime for answers that carry no TTL.
    pub negative_ttl: Duration,
    pub sweep_interval: Duration,
    pub seed: u64,
}

impl ForwarderConfig {
    pub fn new(upstream: SocketAddr) -> Self {
        ForwarderConfig {
            upstream,
            mode: UpstreamMode::Moqt,
            idle_timeout: Duration::from_secs(3600),
            client_timeout: Duration::from_secs(5),
            reconnect_min: Duration::from_secs(1),
            reconnect_max: Duration::from_secs(60),
            udp_timeout: Duration::from_secs(2),
            udp_attempts: 3,
            negative_ttl: Duration::from_secs(300),
            sweep_interval: Duration::from_secs(30),
            seed: 0,
        }
    }

    pub fn udp(upstream: SocketAddr) -> Self {
        ForwarderConfig {
            mode: UpstreamMode::Udp,
            ..ForwarderConfig::new(upstream)
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ForwarderStats {
    pub client_queries: u64,
    pub cache_hits: u64,
    pub servfails: u64,
    pub subscribes: u64,
    pub joining_fetches: u64,
    pub range_fetches: u64,
    pub fetch_fallbacks: u64,
    pub objects: u64,
    pub stale_objects: u64,
    pub dropped_tracks: u64,
    pub upstream_udp_queries: u64,
    pub reconnects: u64,
}

/// Read-only view of one track.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrackState {
    pub group: Option<u64>,
    pub answer: Option<Message>,
    pub payload: Option<Bytes>,
    pub subscribed: bool,
    pub last_used: Time,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Sub {
    None,
    Requested(u64),
    Active(u64),
    Declined(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ReqKind {
    Subscribe,
    Joining,
    /// Standalone fetch up to this group.
    Range(u64),
}

struct Client {
    from: SocketAddr,
    query: Message,
    started: Time,
    timer: u64,
}

struct FTrack {
    group: Option<u64>,
    answer: Option<(Message, Bytes)>,
    sub: Sub,
    fetch: Option<u64>,
    /// Stored group to resume from once the subscription is confirmed.
    resume: Option<u64>,
    /// Set when the answer is not kept current by a subscription.
    expires: Option<Time>,
    last_used: Time,
    clients: Vec<Client>,
    udp: Option<u16>,
}

impl FTrack {
    fn new(now: Time) -> Self {
        FTrack {
            group: None,
            answer: None,
            sub: Sub::None,
            fetch: None,
            resume: None,
            expires: None,
            last_used: now,
            clients: Vec::new(),
            udp: None,
        }
    }

    fn live(&self, now: Time) -> bool {
        self.answer.is_some() && (matches!(self.sub, Sub::Active(_)) && self.expires.is_none() || self.expires.is_some_and(|e| now < e))
    }
}

#[derive(Debug)]
enum FTimer {
    ClientDeadline(TrackKey),
    Reconnect,
    UdpRetry(u16),
    Sweep,
}

pub struct Forwarder {
    cfg: ForwarderConfig,
    store: ResumeStore,
    timers: Timers<FTimer>,
    rng: ChaCha8Rng,
    session: Option<SessionId>,
    session_up: bool,
    backoff: Duration,
    reconnect_pending: bool,
    next_req: u64,
    requests: BTreeMap<u64, (TrackKey, ReqKind)>,
    tracks: BTreeMap<TrackKey, FTrack>,
    udp: BTreeMap<u16, (TrackKey, u32, u64)>,
    stats: ForwarderStats,
}

impl Forwarder {
    pub fn new(cfg: ForwarderConfig, store: ResumeStore) -> Self {
        Forwarder {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            backoff: cfg.reconnect_min,
            cfg,
            store,
            timers: Timers::default(),
            session: None,
            session_up: false,
            reconnect_pending: false,
            next_req: 0,
            requests: BTreeMap::new(),
            tracks: BTreeMap::new(),
            udp: BTreeMap::new(),
            stats: ForwarderStats::default(),
        }
    }

    pub fn config(&self) -> &ForwarderConfig {
        &self.cfg
    }

    pub fn stats(&self) -> ForwarderStats {
        self.stats
    }

    pub fn store(&self) -> &ResumeStore {
        &self.store
    }

    pub fn into_store(self) -> ResumeStore {
        self.store
    }

    pub fn is_connected(&self) -> bool {
        self.session_up
    }

    pub fn track(&self, track: &TrackKey) -> Option<TrackState> {
        let t = self.tracks.get(track)?;
        Some(TrackState {
            group: t.group,
            answer: t.answer.as_ref().map(|(m, _)| m.clone()),
            payload: t.answer.as_ref().map(|(_, p)| p.clone()),
            subscribed: matches!(t.sub, Sub::Active(_)),
            last_used: t.last_used,
        })
    }

    pub fn tracks(&self) -> impl Iterator<Item = (&TrackKey, TrackState)> + '_ {
        self.tracks
            .keys()
            .filter_map(|k| self.track(k).map(|s| (k, s)))
    }

    fn request_id(&mut self) -> u64 {
        let id = self.next_req;
        self.next_req += 1;
        id
    }

    fn connect(&mut self, io: &mut dyn Transport) {
        if self.session.is_none() {
            self.session = Some(io.open_session(self.cfg.upstream, ALPN));
            self.session_up = false;
        }
    }

    fn schedule_reconnect(&mut self, io: &mut dyn Transport) {
        if self.reconnect_pending {
            return;
        }
        let wanted = self
            .tracks
            .values()
            .any(|t| t.resume.is_some() || !t.clients.is_empty() || t.group.is_some());
        if !wanted {
            return;
        }
        self.reconnect_pending = true;
        let at = io.now() + self.backoff;
        self.timers.set(io, at, FTimer::Reconnect);
        self.backoff = (self.backoff * 2).min(self.cfg.reconnect_max);
    }

    fn send(&mut self, msg: ControlMessage, io: &mut dyn Transport) -> bool {
        let Some(s) = self.session.filter(|_| self.session_up) else {
            return false;
        };
        match io.send_control(s, msg) {
            Ok(()) => true,
            Err(e) => {
                debug!(session = %s, "upstream send failed: {e}");
                false
            }
        }
    }

    /// Asks upstream for whatever `track` is missing.
    fn request(&mut self, track: &TrackKey, io: &mut dyn Transport) {
        if !self.session_up {
            self.connect(io);
            return;
        }
        let Some(t) = self.tracks.get(track) else { return };
        let (sub, fetch, resume) = (t.sub, t.fetch, t.resume);
        let sub_id = match sub {
            Sub::None | Sub::Declined(_) => {
                let id = self.request_id();
                if !self.send(ControlMessage::Subscribe { request_id: id, track: track.clone() }, io) {
                    return;
                }
                self.stats.subscribes += 1;
                self.requests.insert(id, (track.clone(), ReqKind::Subscribe));
                self.tracks.get_mut(track).expect("checked above").sub = Sub::Requested(id);
                id
            }
            Sub::Requested(id) | Sub::Active(id) => id,
        };
        // A resuming track waits for SubscribeOk to learn the live edge.
        if fetch.is_none() && resume.is_none() {
            self.joining_fetch(track, sub_id, io);
        }
    }

    fn joining_fetch(&mut self, track: &TrackKey, sub_id: u64, io: &mut dyn Transport) {
        let id = self.request_id();
        let msg = ControlMessage::Fetch {
            request_id: id,
            track: track.clone(),
            mode: FetchMode::Joining {
                joining_request_id: sub_id,
                offset: 1,
            },
        };
        if self.send(msg, io) {
            self.stats.joining_fetches += 1;
            self.requests.insert(id, (track.clone(), ReqKind::Joining));
            if let Some(t) = self.tracks.get_mut(track) {
                t.fetch = Some(id);
            }
        }
    }

    fn range_fetch(&mut self, track: &TrackKey, start: u64, end: u64, io: &mut dyn Transport) {
        let id = self.request_id();
        let msg = ControlMessage::Fetch {
            request_id: id,
            track: track.clone(),
            mode: FetchMode::Standalone {
                start_group: start,
                end_group: end,
            },
        };
        if self.send(msg, io) {
            self.stats.range_fetches += 1;
            self.requests.insert(id, (track.clone(), ReqKind::Range(end)));
            if let Some(t) = self.tracks.get_mut(track) {
                t.fetch = Some(id);
            }
        }
    }

    fn on_client_query(&mut self, from: SocketAddr, payload: &[u8], io: &mut dyn Transport) {
        self.stats.client_queries += 1;
        let query = match dns::decode_message(payload) {
            Ok(q) if !q.header.qr => q,
            Ok(_) => return,
            Err(_) => {
                if let Some(resp) = crate::recursive::formerr_for(payload) {
                    reply(io, from, &resp);
                }
                return;
            }
        };
        let track = match track::query_to_track(&query) {
            Ok(t) => t,
            Err(_) => {
                let mut resp = Message::response_to(&query);
                resp.header.rcode = rcode::FORMERR;
                reply(io, from, &resp);
                return;
            }
        };
        let now = io.now();
        let t = self.tracks.entry(track.clone()).or_insert_with(|| FTrack::new(now));
        t.last_used = now;
        if t.live(now) {
            self.stats.cache_hits += 1;
            let (msg, _) = t.answer.as_ref().expect("live answers exist");
            reply(io, from, &rewrite(msg, &query));
            io.record(Observation::Lookup {
                track,
                started: now,
                ok: true,
            });
            return;
        }
        let timer = self
            .timers
            .set(io, now + self.cfg.client_timeout, FTimer::ClientDeadline(track.clone()));
        let t = self.tracks.get_mut(&track).expect("inserted above");
        t.clients.push(Client {
            from,
            query,
            started: now,
            timer,
        });
        match self.cfg.mode {
            UpstreamMode::Moqt => self.request(&track, io),
            UpstreamMode::Udp => {
                if t.udp.is_none() {
                    self.udp_query(&track, io);
                }
            }
        }
    }

    fn answer_clients(&mut self, track: &TrackKey, io: &mut dyn Transport) {
        let Some(t) = self.tracks.get_mut(track) else { return };
        let Some((msg, _)) = t.answer.as_ref() else { return };
        let clients = std::mem::take(&mut t.clients);
        for c in clients {
            self.timers.cancel(c.timer);
            reply(io, c.from, &rewrite(msg, &c.query));
            io.record(Observation::Lookup {
                track: track.clone(),
                started: c.started,
                ok: true,
            });
        }
    }

    fn fail_clients(&mut self, track: &TrackKey, io: &mut dyn Transport) {
        let Some(t) = self.tracks.get_mut(track) else { return };
        let clients = std::mem::take(&mut t.clients);
        for c in clients {
            self.timers.cancel(c.timer);
            self.stats.servfails += 1;
            reply(io, c.from, &servfail(&c.query));
            io.record(Observation::Lookup {
                track: track.clone(),
                started: c.started,
                ok: false,
            });
        }
    }

    fn drop_track(&mut self, track: &TrackKey, io: &mut dyn Transport) {
        debug!(%track, "dropping track");
        self.stats.dropped_tracks += 1;
        self.fail_clients(track, io);
        if let Some(t) = self.tracks.remove(track) {
            if let Sub::Requested(id) | Sub::Active(id) = t.sub {
                self.send(ControlMessage::Unsubscribe { request_id: id }, io);
            }
        }
        self.requests.retain(|_, (t, _)| t != track);
        if let Err(e) = self.store.remove(track) {
            warn!("resume store: {e}");
        }
    }

    fn on_session_up(&mut self, io: &mut dyn Transport) {
        self.session_up = true;
        self.backoff = self.cfg.reconnect_min;
        let wanted: Vec<TrackKey> = self
            .tracks
            .iter()
            .filter(|(_, t)| t.resume.is_some() || !t.clients.is_empty())
            .map(|(k, _)| k.clone())
            .collect();
        for track in wanted {
            self.request(&track, io);
        }
    }

    fn on_session_gone(&mut self, failed: bool, io: &mut dyn Transport) {
        self.session = None;
        self.session_up = false;
        self.requests.clear();
        let now = io.now();
        let idle = self.cfg.idle_timeout;
        let keys: Vec<TrackKey> = self.tracks.keys().cloned().collect();
        for k in keys {
            let t = self.tracks.get_mut(&k).expect("listed above");
            t.fetch = None;
            if matches!(t.sub, Sub::Active(_) | Sub::Requested(_)) {
                t.sub = Sub::None;
                // Serve nothing stale until the subscription is back.
                t.expires = Some(now);
                if now.since(t.last_used) < idle {
                    t.resume = t.resume.or(t.group);
                }
            }
            if failed {
                self.fail_clients(&k, io);
            }
        }
        self.schedule_reconnect(io);
    }

    fn on_control(&mut self, msg: ControlMessage, io: &mut dyn Transport) {
        let Some(req) = msg.request_id() else {
            warn!(kind = msg.kind(), "unexpected control message");
            return;
        };
        let Some((track, kind)) = self.requests.get(&req).cloned() else {
            debug!(req, kind = msg.kind(), "reply to unknown request");
            return;
        };
        let now = io.now();
        match msg {
            ControlMessage::SubscribeOk { largest_group, .. } => {
                let Some(t) = self.tracks.get_mut(&track) else { return };
                t.sub = Sub::Active(req);
                t.expires = None;
                match t.resume.take() {
                    Some(last) if largest_group > last => self.range_fetch(&track, last + 1, largest_group, io),
                    // Already current; fetch lazily once a client asks.
                    Some(_) if !t.clients.is_empty() && t.fetch.is_none() => self.joining_fetch(&track, req, io),
                    _ => {}
                }
            }
            ControlMessage::SubscribeError { .. } => {
                self.requests.remove(&req);
                let negative = self.cfg.negative_ttl;
                let Some(t) = self.tracks.get_mut(&track) else { return };
                t.sub = Sub::Declined(req);
                t.expires = Some(t.answer.as_ref().map_or(now, |(m, _)| now + answer_ttl(m, negative)));
                if t.resume.take().is_some() && t.fetch.is_none() {
                    self.stats.fetch_fallbacks += 1;
                    self.joining_fetch(&track, req, io);
                }
            }
            ControlMessage::FetchOk { largest_group, .. } => {
                let Some(t) = self.tracks.get_mut(&track) else { return };
                // Nothing more is coming if we already hold the largest group.
                if t.group.is_some_and(|g| g >= largest_group) && t.answer.is_some() {
                    t.fetch = None;
                    self.requests.remove(&req);
                    if let ReqKind::Range(_) = kind {
                        if !matches!(t.sub, Sub::Active(_)) {
                            let sub = match t.sub {
                                Sub::Declined(id) | Sub::Requested(id) => id,
                                _ => req,
                            };
                            self.joining_fetch(&track, sub, io);
                        }
                    }
                } else if let ReqKind::Range(_) = kind {
                    let start = t.group.map_or(0, |g| g + 1);
                    if largest_group < start {
                        // The range was empty; take the latest instead.
                        t.fetch = None;
                        self.requests.remove(&req);
                        let sub = match t.sub {
                            Sub::Active(id) | Sub::Declined(id) | Sub::Requested(id) => id,
                            Sub::None => req,
                        };
                        self.joining_fetch(&track, sub, io);
                    }
                }
            }
            ControlMessage::FetchError { .. } => {
                self.requests.remove(&req);
                let Some(t) = self.tracks.get_mut(&track) else { return };
                t.fetch = None;
                match kind {
                    ReqKind::Range(_) => {
                        self.stats.fetch_fallbacks += 1;
                        let sub = match t.sub {
                            Sub::Active(id) | Sub::Declined(id) | Sub::Requested(id) => id,
                            Sub::None => req,
                        };
                        self.joining_fetch(&track, sub, io);
                    }
                    _ => self.drop_track(&track, io),
                }
            }
            other => warn!(kind = other.kind(), "unexpected control message"),
        }
    }

    fn on_object(&mut self, session: SessionId, obj: ObjectMessage, io: &mut dyn Transport) {
        let Some((track, kind)) = self.requests.get(&obj.request_id).cloned() else {
            warn!(req = obj.request_id, "object for unknown request id, closing session");
            io.close_session(session);
            self.on_session_gone(false, io);
            return;
        };
        let msg = match dns::decode_message(&obj.payload) {
            Ok(m) => m,
            Err(e) => {
                warn!("undecodable object payload: {e}");
                return;
            }
        };
        self.stats.objects += 1;
        let now = io.now();
        let negative = self.cfg.negative_ttl;
        let Some(t) = self.tracks.get_mut(&track) else { return };
        match kind {
            ReqKind::Joining => {
                t.fetch = None;
                self.requests.remove(&obj.request_id);
            }
            ReqKind::Range(end) if obj.group_id >= end => {
                t.fetch = None;
                self.requests.remove(&obj.request_id);
            }
            _ => {}
        }
        let fresh = t.answer.is_none() || t.group.is_none_or(|g| obj.group_id > g);
        if !fresh {
            self.stats.stale_objects += 1;
            return;
        }
        t.expires = match t.sub {
            Sub::Active(_) => None,
            _ => Some(now + answer_ttl(&msg, negative)),
        };
        t.group = Some(obj.group_id);
        io.record(Observation::Answer {
            track: track.clone(),
            group: obj.group_id,
            fingerprint: msg.answer_fingerprint(),
        });
        t.answer = Some((msg, obj.payload));
        if let Err(e) = self.store.record(&track, obj.group_id) {
            warn!("resume store: {e}");
        }
        self.answer_clients(&track, io);
    }

    fn udp_query(&mut self, track: &TrackKey, io: &mut dyn Transport) {
        let id = loop {
            let id: u16 = self.rng.random();
            if !self.udp.contains_key(&id) {
                break id;
            }
        };
        let at = io.now() + self.cfg.udp_timeout;
        let timer = self.timers.set(io, at, FTimer::UdpRetry(id));
        self.udp.insert(id, (track.clone(), 1, timer));
        if let Some(t) = self.tracks.get_mut(track) {
            t.udp = Some(id);
        }
        self.send_udp_query(track, id, io);
    }

    fn send_udp_query(&mut self, track: &TrackKey, id: u16, io: &mut dyn Transport) {
        if let Ok(bytes) = dns::encode_message(&track.query().to_message(id)) {
            self.stats.upstream_udp_queries += 1;
            io.send_udp(SocketKind::Client, self.cfg.upstream, Bytes::from(bytes));
        }
    }

    fn on_udp_retry(&mut self, id: u16, token: u64, io: &mut dyn Transport) {
        let Some((track, attempt, timer)) = self.udp.get(&id).cloned() else { return };
        if timer != token {
            return;
        }
        if attempt < self.cfg.udp_attempts {
            let at = io.now() + self.cfg.udp_timeout;
            let timer = self.timers.set(io, at, FTimer::UdpRetry(id));
            self.udp.insert(id, (track.clone(), attempt + 1, timer));
            self.send_udp_query(&track, id, io);
            return;
        }
        self.udp.remove(&id);
        if let Some(t) = self.tracks.get_mut(&track) {
            t.udp = None;
        }
        self.fail_clients(&track, io);
    }

    fn on_udp_response(&mut self, from: SocketAddr, payload: &[u8], io: &mut dyn Transport) {
        let Ok(mut msg) = dns::decode_message(payload) else { return };
        let Some((track, _, timer)) = self.udp.get(&msg.header.id).cloned() else { return };
        if from != self.cfg.upstream || !msg.header.qr || track::question_track(&msg).ok().as_ref() != Some(&track) {
            return;
        }
        self.udp.remove(&msg.header.id);
        self.timers.cancel(timer);
        msg.header.id = 0;
        let now = io.now();
        let ttl = answer_ttl(&msg, self.cfg.negative_ttl);
        let Some(t) = self.tracks.get_mut(&track) else { return };
        t.udp = None;
        if msg.header.rcode == rcode::SERVFAIL {
            self.fail_clients(&track, io);
            return;
        }
        let fingerprint = msg.answer_fingerprint();
        let changed = t.answer.as_ref().is_none_or(|(m, _)| m.answer_fingerprint() != fingerprint);
        if changed {
            let group = t.group.map_or(0, |g| g + 1);
            t.group = Some(group);
            io.record(Observation::Answer {
                track: track.clone(),
                group,
                fingerprint,
            });
        }
        let bytes = Bytes::from(dns::encode_message(&msg).unwrap_or_default());
        t.answer = Some((msg, bytes));
        t.expires = Some(now + ttl);
        self.answer_clients(&track, io);
    }

    fn on_client_deadline(&mut self, track: TrackKey, token: u64, io: &mut dyn Transport) {
        let Some(t) = self.tracks.get_mut(&track) else { return };
        let Some(pos) = t.clients.iter().position(|c| c.timer == token) else {
            return;
        };
        let c = t.clients.remove(pos);
        self.stats.servfails += 1;
        reply(io, c.from, &servfail(&c.query));
        io.record(Observation::Lookup {
            track,
            started: c.started,
            ok: false,
        });
    }

    fn sweep(&mut self, io: &mut dyn Transport) {
        let now = io.now();
        let idle = self.cfg.idle_timeout;
        let stale: Vec<TrackKey> = self
            .tracks
            .iter()
            .filter(|(_, t)| t.clients.is_empty() && t.resume.is_none() && now.since(t.last_used) >= idle)
            .map(|(k, _)| k.clone())
            .collect();
        for k in stale {
            let t = self.tracks.remove(&k).expect("listed above");
            if let Sub::Requested(id) | Sub::Active(id) = t.sub {
                self.send(ControlMessage::Unsubscribe { request_id: id }, io);
            }
            self.requests.retain(|_, (tk, _)| *tk != k);
            if let Err(e) = self.store.remove(&k) {
                warn!("resume store: {e}");
            }
        }
    }
}

fn rewrite(msg: &Message, query: &Message) -> Message {
    let mut resp = msg.clone();
    resp.header.id = query.header.id;
    resp.questions = query.questions.clone();
    resp
}

fn servfail(query: &Message) -> Message {
    let mut m = Message::response_to(query);
    m.header.ra = true;
    m.header.rcode = rcode::SERVFAIL;
    m
}

fn reply(io: &mut dyn Transport, to: SocketAddr, msg: &Message) {
    match dns::encode_message(msg) {
        Ok(b) => io.send_udp(SocketKind::Service, to, Bytes::from(b)),
        Err(e) => warn!("cannot encode response: {e}"),
    }
}

impl Node for Forwarder {
    fn handle(&mut self, event: Event, io: &mut dyn Transport) {
        match event {
            Event::Start => {
                let now = io.now();
                let stored: Vec<(TrackKey, u64)> = self.store.entries().map(|(t, g)| (t.clone(), g)).collect();
                for (track, g) in stored {
                    let t = self.tracks.entry(track).or_insert_with(|| FTrack::new(now));
                    t.group = Some(g);
                    t.resume = Some(g);
                }
                if self.cfg.mode == UpstreamMode::Moqt && self.tracks.values().any(|t| t.resume.is_some()) {
                    self.connect(io);
                }
                let at = now + self.cfg.sweep_interval;
                self.timers.set(io, at, FTimer::Sweep);
            }
            Event::SessionUp {
                session,
                role: Role::Client,
                ..
            } if Some(session) == self.session => self.on_session_up(io),
            Event::SessionFailed { session, error, .. } if Some(session) == self.session => {
                debug!("upstream connect failed: {error}");
                self.on_session_gone(true, io);
            }
            Event::SessionClosed { session, .. } if Some(session) == self.session => self.on_session_gone(false, io),
            Event::Control { session, msg } if Some(session) == self.session => self.on_control(msg, io),
            Event::Object { session, obj } if Some(session) == self.session => self.on_object(session, obj, io),
            Event::Udp {
                socket: SocketKind::Service,
                from,
                payload,
            } => self.on_client_query(from, &payload, io),
            Event::Udp {
                socket: SocketKind::Client,
                from,
                payload,
            } => self.on_udp_response(from, &payload, io),
            Event::Timer(token) => match self.timers.fire(token) {
                Some(FTimer::ClientDeadline(track)) => self.on_client_deadline(track, token, io),
                Some(FTimer::Reconnect) => {
                    self.reconnect_pending = false;
                    if self.session.is_none() {
                        self.stats.reconnects += 1;
                        self.connect(io);
                    }
                }
                Some(FTimer::UdpRetry(id)) => self.on_udp_retry(id, token, io),
                Some(FTimer::Sweep) => {
                    self.sweep(io);
                    let at = io.now() + self.cfg.sweep_interval;
                    self.timers.set(io, at, FTimer::Sweep);
                }
                None => {}
            },
            _ => {}
        }
    }

    fn shutdown(&mut self, _io: &mut dyn Transport) {
        if let Err(e) = self.store.compact() {
            warn!("resume store compaction failed: {e}");
        }
    }
}
