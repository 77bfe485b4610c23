//! Recursive resolver with upstream subscriptions and downstream fanout.
//!
//! Resolution walks from the root hints (or the deepest cached zone cut)
//! towards the authoritative server. At every server the same track
//! identity the downstream asked for is used, so the authoritative answer
//! can be forwarded byte for byte. Each `(server, track)` pair is an
//! [`upstream`] entry, looked up over MoQT, UDP or both at once depending
//! on what is known about the server.
//!
//! A downstream-facing cache entry is the composition of one or more
//! upstream answers (more than one only when a CNAME leaves the zone). Its
//! group ids follow the origin's when it has a single pushed upstream and
//! are synthesized locally otherwise.

mod downstream;
mod resolve;
mod upstream;

pub(crate) use downstream::formerr_for;
pub(crate) use upstream::answer_ttl;

use std::collections::{BTreeMap, BTreeSet};
use std::net::IpAddr;
use std::time::Duration;

use bytes::Bytes;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dns::{Message, Name};
use crate::history::{TrackHistory, DEFAULT_RETENTION};
use crate::track::TrackKey;
use crate::transport::{Event, Node, Role, SessionId, SocketKind, Timers, Transport, DEFAULT_DNS_PORT, DEFAULT_MOQT_PORT};
use crate::wire::FetchMode;
use crate::Time;

/// Whether a server is known to speak MoQT-lite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Capability {
    Yes,
    No,
    Unknown,
}

/// One entry of the root hints file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RootHint {
    pub name: String,
    pub address: IpAddr,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capability: Option<Capability>,
}

pub fn parse_root_hints(json: &str) -> Result<Vec<RootHint>, serde_json::Error> {
    serde_json::from_str(json)
}

/// At which recursion levels upstream subscriptions are kept.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubscriptionPolicy {
    EveryLevel,
    /// Referral-level subscriptions are dropped as soon as the referral is
    /// seen.
    TerminalOnly,
}

#[derive(Clone, Debug)]
pub struct RecursiveConfig {
    pub root_hints: Vec<RootHint>,
    pub moqt_port: u16,
    pub udp_port: u16,
    /// Poll UDP-only upstreams so downstream subscriptions can be offered.
    pub poll_fallback: bool,
    pub poll_floor: Duration,
    pub policy: SubscriptionPolicy,
    pub idle_timeout: Duration,
    pub session_linger: Duration,
    pub max_subscriptions: usize,
    pub capability_ttl: Duration,
    pub udp_timeout: Duration,
    pub udp_attempts: u32,
    pub max_poll_failures: u32,
    /// Cache lifetime for answers that carry no TTL (negative answers).
    pub negative_ttl: Duration,
    /// Classic mode: UDP only, no subscriptions, TTL caching.
    pub classic: bool,
    pub retention: usize,
    pub max_cname_chain: usize,
    pub max_referrals: usize,
    pub resolve_timeout: Duration,
    pub sweep_interval: Duration,
    /// Seeds the generator for UDP query ids.
    pub seed: u64,
}

impl RecursiveConfig {
    pub fn new(root_hints: Vec<RootHint>) -> Self {
        RecursiveConfig {
            root_hints,
            moqt_port: DEFAULT_MOQT_PORT,
            udp_port: DEFAULT_DNS_PORT,
            poll_fallback: false,
            poll_floor: Duration::from_secs(5),
            policy: SubscriptionPolicy::EveryLevel,
            idle_timeout: Duration::from_secs(300),
            session_linger: Duration::from_secs(60),
            max_subscriptions: 10_000,
            capability_ttl: Duration::from_secs(3600),
            udp_timeout: Duration::from_secs(2),
            udp_attempts: 3,
            max_poll_failures: 3,
            negative_ttl: Duration::from_secs(300),
            classic: false,
            retention: DEFAULT_RETENTION,
            max_cname_chain: 8,
            max_referrals: 16,
            resolve_timeout: Duration::from_secs(15),
            sweep_interval: Duration::from_secs(10),
            seed: 0,
        }
    }
}

/// Where a cached answer came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    /// Kept current by an upstream subscription.
    Pushed,
    /// Refreshed by periodic UDP queries.
    Polled,
    /// A one-off UDP answer.
    Udp,
    /// A one-off MoQT fetch (subscription declined or released).
    Fetched,
}

/// Read-only view of a downstream-facing cache entry.
#[derive(Clone, Debug)]
pub struct CacheEntry {
    pub track: TrackKey,
    pub last_group: u64,
    pub answer: Message,
    pub payload: Bytes,
    pub source: Source,
    pub inserted_at: Time,
    pub last_accessed: Time,
    /// Set for entries that are only valid until then.
    pub ttl_expiry: Option<Time>,
    pub downstream_subscribers: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RecursiveStats {
    pub upstream_subscribes: u64,
    pub upstream_fetches: u64,
    pub upstream_unsubscribes: u64,
    pub upstream_udp_queries: u64,
    pub downstream_subscribes: u64,
    pub downstream_declines: u64,
    pub downstream_fetches: u64,
    pub downstream_udp_queries: u64,
    pub cache_hits: u64,
    pub objects_forwarded: u64,
    pub polls: u64,
    pub poll_failures: u64,
    pub synthesized_groups: u64,
    pub servfails: u64,
    pub evictions: u64,
}

/// `(server, track)`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub(crate) struct UpstreamKey {
    pub server: IpAddr,
    pub track: TrackKey,
}

#[derive(Clone, Debug)]
pub(crate) struct Answer {
    pub msg: Message,
    pub payload: Bytes,
    pub group: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum MoqtState {
    Idle,
    /// Waiting for the session to come up.
    Connecting,
    /// Subscribe and joining fetch sent.
    Requested { session: SessionId, sub: u64 },
    Subscribed { session: SessionId, sub: u64 },
    /// The server answered the last Subscribe with an error.
    Declined,
    Failed,
}

pub(crate) struct Upstream {
    pub answer: Option<Answer>,
    pub source: Source,
    pub expires: Option<Time>,
    pub moqt: MoqtState,
    pub udp: Option<u16>,
    /// The in-flight UDP query is a poll.
    pub polling: bool,
    pub poll_timer: Option<u64>,
    pub poll_failures: u32,
    pub stale: bool,
    pub waiters: BTreeSet<u64>,
    pub dependents: BTreeSet<TrackKey>,
    pub last_used: Time,
    /// The fetch part of the last MoQT request has completed.
    pub fetch_done: bool,
    /// UDP attempts for the current lookup are used up.
    pub udp_exhausted: bool,
    /// The cached group id is the origin's.
    pub origin_numbered: bool,
    /// When the query that produced the cached answer was sent.
    pub refreshed_at: Time,
}

impl Upstream {
    fn new(now: Time) -> Self {
        Upstream {
            answer: None,
            source: Source::Udp,
            expires: None,
            moqt: MoqtState::Idle,
            udp: None,
            polling: false,
            poll_timer: None,
            poll_failures: 0,
            stale: false,
            waiters: BTreeSet::new(),
            dependents: BTreeSet::new(),
            last_used: now,
            fetch_done: false,
            udp_exhausted: false,
            origin_numbered: false,
            refreshed_at: now,
        }
    }

    pub(crate) fn is_valid(&self, now: Time) -> bool {
        if self.answer.is_none() || self.stale {
            return false;
        }
        match self.source {
            Source::Pushed => matches!(self.moqt, MoqtState::Subscribed { .. }),
            _ => self.expires.is_some_and(|e| now < e),
        }
    }

    fn in_flight(&self) -> bool {
        self.udp.is_some()
            || matches!(self.moqt, MoqtState::Connecting)
            || (matches!(self.moqt, MoqtState::Requested { .. } | MoqtState::Subscribed { .. }) && !self.fetch_done)
    }
}

pub(crate) struct UpSession {
    pub id: SessionId,
    pub up: bool,
    /// Upstreams waiting for the session before sending requests.
    pub waiting: BTreeSet<UpstreamKey>,
    pub idle_since: Option<Time>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum ReqKind {
    Subscribe,
    Fetch,
}

pub(crate) struct UdpQuery {
    pub key: UpstreamKey,
    pub attempt: u32,
    pub timer: u64,
    pub sent_at: Time,
}

#[derive(Clone, Debug)]
pub(crate) struct Delegation {
    pub servers: Vec<IpAddr>,
    pub expires: Time,
}

#[derive(Clone, Debug)]
pub(crate) enum DownReq {
    Subscribe { session: SessionId, req: u64 },
    Fetch { session: SessionId, req: u64, mode: FetchMode },
    Udp { from: std::net::SocketAddr, query: Message },
}

pub(crate) struct Entry {
    pub view: Option<Answer>,
    pub offset: u64,
    pub links: Vec<UpstreamKey>,
    pub referrals: Vec<UpstreamKey>,
    pub task: Option<u64>,
    pub inserted_at: Time,
    pub last_accessed: Time,
    pub downstream: BTreeSet<(SessionId, u64)>,
    pub pending: Vec<DownReq>,
    /// Subscribes whose answer waits for the upstream MoQT outcome.
    pub deciding: Vec<(SessionId, u64)>,
    pub history: TrackHistory,
    pub stale: bool,
}

impl Entry {
    pub(crate) fn new(now: Time, retention: usize) -> Self {
        Entry {
            view: None,
            offset: 0,
            links: Vec::new(),
            referrals: Vec::new(),
            task: None,
            inserted_at: now,
            last_accessed: now,
            downstream: BTreeSet::new(),
            pending: Vec::new(),
            deciding: Vec::new(),
            history: TrackHistory::new(retention),
            stale: false,
        }
    }
}

#[derive(Debug)]
pub(crate) enum RTimer {
    UdpRetry(u16),
    Poll(UpstreamKey),
    TaskDeadline(u64),
    Sweep,
}

pub struct Recursive {
    cfg: RecursiveConfig,
    rng: ChaCha8Rng,
    timers: Timers<RTimer>,
    caps: BTreeMap<IpAddr, (Capability, Time)>,
    pinned_caps: BTreeMap<IpAddr, Capability>,
    sessions: BTreeMap<IpAddr, UpSession>,
    session_ip: BTreeMap<SessionId, IpAddr>,
    requests: BTreeMap<(SessionId, u64), (UpstreamKey, ReqKind)>,
    next_req: u64,
    upstreams: BTreeMap<UpstreamKey, Upstream>,
    udp: BTreeMap<u16, UdpQuery>,
    delegations: BTreeMap<Name, Delegation>,
    tasks: BTreeMap<u64, resolve::Task>,
    next_task: u64,
    /// Tasks waiting for a nameserver address, by the address track.
    glue_waiters: BTreeMap<TrackKey, BTreeSet<u64>>,
    entries: BTreeMap<TrackKey, Entry>,
    downstream_subs: BTreeMap<(SessionId, u64), TrackKey>,
    stats: RecursiveStats,
}

impl Recursive {
    pub fn new(cfg: RecursiveConfig) -> Self {
        let pinned_caps = cfg
            .root_hints
            .iter()
            .filter_map(|h| h.capability.filter(|c| *c != Capability::Unknown).map(|c| (h.address, c)))
            .collect();
        Recursive {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            timers: Timers::default(),
            caps: BTreeMap::new(),
            pinned_caps,
            sessions: BTreeMap::new(),
            session_ip: BTreeMap::new(),
            requests: BTreeMap::new(),
            next_req: 0,
            upstreams: BTreeMap::new(),
            udp: BTreeMap::new(),
            delegations: BTreeMap::new(),
            tasks: BTreeMap::new(),
            next_task: 1,
            glue_waiters: BTreeMap::new(),
            entries: BTreeMap::new(),
            downstream_subs: BTreeMap::new(),
            stats: RecursiveStats::default(),
        }
    }

    pub fn config(&self) -> &RecursiveConfig {
        &self.cfg
    }

    pub fn stats(&self) -> RecursiveStats {
        self.stats
    }

    pub fn capability(&self, server: IpAddr, now: Time) -> Capability {
        if self.cfg.classic {
            return Capability::No;
        }
        if let Some(c) = self.pinned_caps.get(&server) {
            return *c;
        }
        match self.caps.get(&server) {
            Some((c, learned)) if now.since(*learned) < self.cfg.capability_ttl => *c,
            _ => Capability::Unknown,
        }
    }

    /// Upstream subscriptions currently established.
    pub fn upstream_subscription_count(&self) -> usize {
        self.upstreams
            .values()
            .filter(|u| matches!(u.moqt, MoqtState::Subscribed { .. }))
            .count()
    }

    /// Established upstream subscriptions for `track`, across servers.
    pub fn upstream_subscriptions_for(&self, track: &TrackKey) -> usize {
        self.upstreams
            .iter()
            .filter(|(k, u)| k.track == *track && matches!(u.moqt, MoqtState::Subscribed { .. }))
            .count()
    }

    pub fn downstream_subscription_count(&self) -> usize {
        self.downstream_subs.len()
    }

    pub fn upstream_session_count(&self) -> usize {
        self.sessions.values().filter(|s| s.up).count()
    }

    pub fn entry(&self, track: &TrackKey) -> Option<CacheEntry> {
        let e = self.entries.get(track)?;
        let view = e.view.as_ref()?;
        let source = self.entry_source(e);
        let ttl_expiry = e
            .links
            .iter()
            .filter_map(|k| self.upstreams.get(k))
            .filter(|u| u.source != Source::Pushed)
            .filter_map(|u| u.expires)
            .min();
        Some(CacheEntry {
            track: track.clone(),
            last_group: view.group,
            answer: view.msg.clone(),
            payload: view.payload.clone(),
            source,
            inserted_at: e.inserted_at,
            last_accessed: e.last_accessed,
            ttl_expiry,
            downstream_subscribers: e.downstream.len(),
        })
    }

    pub fn entries(&self) -> impl Iterator<Item = CacheEntry> + '_ {
        self.entries.keys().filter_map(|t| self.entry(t))
    }

    fn entry_source(&self, e: &Entry) -> Source {
        e.links
            .iter()
            .filter_map(|k| self.upstreams.get(k))
            .map(|u| u.source)
            .max()
            .unwrap_or(Source::Udp)
    }

    fn next_request_id(&mut self) -> u64 {
        let id = self.next_req;
        self.next_req += 1;
        id
    }
}

impl Node for Recursive {
    fn handle(&mut self, event: Event, io: &mut dyn Transport) {
        match event {
            Event::Start => {
                let at = io.now() + self.cfg.sweep_interval;
                self.timers.set(io, at, RTimer::Sweep);
            }
            Event::SessionUp {
                session,
                role: Role::Client,
                ..
            } => self.on_upstream_up(session, io),
            Event::SessionUp { .. } => {}
            Event::SessionFailed { session, .. } => self.on_upstream_failed(session, io),
            Event::SessionClosed { session, .. } => {
                if self.session_ip.contains_key(&session) {
                    self.on_upstream_closed(session, io);
                } else {
                    self.on_downstream_closed(session);
                }
            }
            Event::Control { session, msg } => {
                if self.session_ip.contains_key(&session) {
                    self.on_upstream_control(session, msg, io);
                } else {
                    self.on_downstream_control(session, msg, io);
                }
            }
            Event::Object { session, obj } => {
                if self.session_ip.contains_key(&session) {
                    self.on_upstream_object(session, obj, io);
                } else {
                    tracing::warn!(%session, "object from a downstream session");
                    io.close_session(session);
                    self.on_downstream_closed(session);
                }
            }
            Event::Udp {
                socket: SocketKind::Client,
                from,
                payload,
            } => self.on_udp_response(from, &payload, io),
            Event::Udp {
                socket: SocketKind::Service,
                from,
                payload,
            } => self.on_udp_query(from, &payload, io),
            Event::Timer(token) => match self.timers.fire(token) {
                Some(RTimer::UdpRetry(id)) => self.on_udp_timeout(id, token, io),
                Some(RTimer::Poll(key)) => self.on_poll_timer(key, token, io),
                Some(RTimer::TaskDeadline(task)) => self.fail_task(task, "resolution timed out", io),
                Some(RTimer::Sweep) => {
                    self.sweep(io);
                    let at = io.now() + self.cfg.sweep_interval;
                    self.timers.set(io, at, RTimer::Sweep);
                }
                None => {}
            },
        }
    }
}
