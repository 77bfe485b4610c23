//! Deterministic discrete-event network.
//!
//! Events are ordered by `(time, insertion sequence)`, so a run is a pure
//! function of the topology, the nodes and the scheduled admin actions.
//! Every message crosses a link in exactly its one-way delay; a round trip
//! costs twice that.
//!
//! Session establishment costs `handshake_rtts + session_setup_rtts` round
//! trips for the client. The server side becomes ready one one-way delay
//! earlier, when it has sent `ServerSetup`. Control messages are passed
//! through the real encoder and decoder on the way.

use std::any::Any;
use std::collections::BTreeMap;
use std::net::{IpAddr, SocketAddr};
use std::time::Duration;

use bytes::Bytes;
use serde::Serialize;

use super::{
    CloseReason, ConnectError, Event, Node, Observation, Role, SendError, SessionId, SocketKind, Transport,
    ALPN, DEFAULT_DNS_PORT, DEFAULT_KEEPALIVE, DEFAULT_MOQT_PORT, KEEPALIVE_MISSES,
};
use crate::wire::{self, ControlMessage, ObjectMessage, PROTOCOL_VERSION};
use crate::Time;

/// Port the simulated nodes send their own UDP queries from.
pub const CLIENT_UDP_PORT: u16 = 49152;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimConfig {
    pub handshake_rtts: u32,
    pub session_setup_rtts: u32,
    pub keepalive: Duration,
    pub connect_timeout: Duration,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            handshake_rtts: 1,
            session_setup_rtts: 1,
            keepalive: DEFAULT_KEEPALIVE,
            connect_timeout: Duration::from_secs(5),
        }
    }
}

/// Addressing of one simulated host.
#[derive(Clone, Debug)]
pub struct NodeSpec {
    pub name: String,
    pub ip: IpAddr,
    /// MoQT listener port, if the node accepts sessions.
    pub moqt_port: Option<u16>,
    /// UDP service port, if the node answers classic DNS.
    pub udp_port: Option<u16>,
    /// ALPN tokens the listener accepts.
    pub alpn: Vec<Vec<u8>>,
}

impl NodeSpec {
    /// A host with no listeners.
    pub fn client(name: impl Into<String>, ip: IpAddr) -> Self {
        NodeSpec {
            name: name.into(),
            ip,
            moqt_port: None,
            udp_port: None,
            alpn: vec![ALPN.to_vec()],
        }
    }

    pub fn with_moqt(mut self) -> Self {
        self.moqt_port = Some(DEFAULT_MOQT_PORT);
        self
    }

    pub fn with_udp(mut self) -> Self {
        self.udp_port = Some(DEFAULT_DNS_PORT);
        self
    }

    pub fn moqt_addr(&self) -> SocketAddr {
        SocketAddr::new(self.ip, self.moqt_port.unwrap_or(DEFAULT_MOQT_PORT))
    }

    pub fn udp_addr(&self) -> SocketAddr {
        SocketAddr::new(self.ip, self.udp_port.unwrap_or(DEFAULT_DNS_PORT))
    }
}

/// Message and byte counters for one direction of one link and one
/// message kind.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counter {
    pub messages: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LinkStat {
    pub from: String,
    pub to: String,
    pub kind: &'static str,
    pub messages: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObservationRecord {
    pub time: Time,
    pub node: usize,
    pub obs: Observation,
}

pub type AdminFn = Box<dyn FnOnce(&mut dyn Node, &mut dyn Transport)>;

struct Slot {
    spec: NodeSpec,
    node: Option<Box<dyn Node>>,
    up: bool,
    incarnation: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Side {
    Connecting,
    Up,
    Closed,
}

struct Session {
    client: usize,
    server: usize,
    server_inc: u32,
    client_addr: SocketAddr,
    server_addr: SocketAddr,
    alpn: Vec<u8>,
    opened_at: Time,
    state: [Side; 2],
    last_heard: [Time; 2],
}

const CLIENT: usize = 0;
const SERVER: usize = 1;

enum Pending {
    Deliver { node: usize, incarnation: u32, event: Event },
    HandshakeArrive(SessionId),
    ServerUp(SessionId),
    ClientUp(SessionId),
    ConnectFail(SessionId, ConnectError),
    Probe(SessionId),
    ProbeArrive(SessionId, usize),
    Deadline(SessionId, usize),
    RemoteClose(SessionId, usize),
    Admin { node: usize, f: AdminFn },
}

pub struct SimNetwork {
    cfg: SimConfig,
    now: Time,
    seq: u64,
    queue: BTreeMap<(Time, u64), Pending>,
    slots: Vec<Slot>,
    by_ip: BTreeMap<IpAddr, usize>,
    links: BTreeMap<(usize, usize), Link>,
    sessions: BTreeMap<SessionId, Session>,
    next_session: u64,
    stats: BTreeMap<(usize, usize, &'static str), Counter>,
    observations: Vec<ObservationRecord>,
    processed: u64,
}

#[derive(Clone, Copy, Debug)]
struct Link {
    delay: Duration,
    cut: bool,
}

impl SimNetwork {
    pub fn new(cfg: SimConfig) -> Self {
        SimNetwork {
            cfg,
            now: Time::ZERO,
            seq: 0,
            queue: BTreeMap::new(),
            slots: Vec::new(),
            by_ip: BTreeMap::new(),
            links: BTreeMap::new(),
            sessions: BTreeMap::new(),
            next_session: 1,
            stats: BTreeMap::new(),
            observations: Vec::new(),
            processed: 0,
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn now(&self) -> Time {
        self.now
    }

    /// Installs a node. It receives `Event::Start` at the current time.
    ///
    /// # Panics
    /// If the IP address is already taken.
    pub fn add_node(&mut self, spec: NodeSpec, node: Box<dyn Node>) -> usize {
        let idx = self.slots.len();
        assert!(
            self.by_ip.insert(spec.ip, idx).is_none(),
            "duplicate simulated address {}",
            spec.ip
        );
        self.slots.push(Slot {
            spec,
            node: Some(node),
            up: true,
            incarnation: 0,
        });
        self.push(self.now, Pending::Deliver {
            node: idx,
            incarnation: 0,
            event: Event::Start,
        });
        idx
    }

    pub fn spec(&self, idx: usize) -> &NodeSpec {
        &self.slots[idx].spec
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.slots.iter().position(|s| s.spec.name == name)
    }

    pub fn node_count(&self) -> usize {
        self.slots.len()
    }

    pub fn is_up(&self, idx: usize) -> bool {
        self.slots[idx].up
    }

    /// Adds or replaces the bidirectional link between two nodes.
    pub fn link(&mut self, a: usize, b: usize, one_way: Duration) {
        self.links.insert(link_key(a, b), Link {
            delay: one_way,
            cut: false,
        });
    }

    /// Drops all traffic on a link until [`SimNetwork::restore_link`].
    pub fn cut_link(&mut self, a: usize, b: usize) {
        if let Some(l) = self.links.get_mut(&link_key(a, b)) {
            l.cut = true;
        }
    }

    pub fn restore_link(&mut self, a: usize, b: usize) {
        if let Some(l) = self.links.get_mut(&link_key(a, b)) {
            l.cut = false;
        }
    }

    /// One-way delay between two nodes, `None` without a usable link.
    pub fn delay(&self, a: usize, b: usize) -> Option<Duration> {
        if a == b {
            return Some(Duration::ZERO);
        }
        self.links.get(&link_key(a, b)).filter(|l| !l.cut).map(|l| l.delay)
    }

    pub fn node<T: Node>(&self, idx: usize) -> Option<&T> {
        let node: &dyn Any = self.slots.get(idx)?.node.as_deref()?;
        node.downcast_ref::<T>()
    }

    /// Runs `f` against a node right now, outside the event queue.
    ///
    /// # Panics
    /// If the node is not of type `T` or is down.
    pub fn with_node<T: Node, R>(&mut self, idx: usize, f: impl FnOnce(&mut T, &mut dyn Transport) -> R) -> R {
        let mut node = self.slots[idx].node.take().expect("node is down");
        let r = {
            let any: &mut dyn Any = node.as_mut();
            let typed = any.downcast_mut::<T>().expect("node type mismatch");
            let mut io = SimIo { net: self, me: idx };
            f(typed, &mut io)
        };
        self.slots[idx].node = Some(node);
        r
    }

    /// Schedules `f` to run against a node at `at`.
    pub fn schedule_admin(&mut self, at: Time, idx: usize, f: AdminFn) {
        self.push(at, Pending::Admin { node: idx, f });
    }

    /// Typed variant of [`SimNetwork::schedule_admin`].
    pub fn schedule<T: Node>(&mut self, at: Time, idx: usize, f: impl FnOnce(&mut T, &mut dyn Transport) + 'static) {
        self.schedule_admin(
            at,
            idx,
            Box::new(move |node, io| {
                let any: &mut dyn Any = node;
                if let Some(t) = any.downcast_mut::<T>() {
                    f(t, io);
                }
            }),
        );
    }

    /// Stops a node cleanly: `shutdown` runs, its sessions are closed and
    /// peers are told. The node is then replaced by `replacement`, which
    /// receives `Event::Start`.
    pub fn restart(&mut self, idx: usize, replacement: Box<dyn Node>) {
        self.stop(idx, true);
        self.start(idx, replacement);
    }

    /// Takes a node down. With `clean`, peers see their sessions close;
    /// otherwise they only find out through keepalive.
    pub fn stop(&mut self, idx: usize, clean: bool) -> Option<Box<dyn Node>> {
        if !self.slots[idx].up {
            return None;
        }
        if clean {
            if let Some(mut node) = self.slots[idx].node.take() {
                let mut io = SimIo { net: self, me: idx };
                node.shutdown(&mut io);
                self.slots[idx].node = Some(node);
            }
        }
        let ids: Vec<SessionId> = self
            .sessions
            .iter()
            .filter(|(_, s)| s.client == idx || s.server == idx)
            .map(|(id, _)| *id)
            .collect();
        for id in ids {
            let s = &self.sessions[&id];
            let mine = if s.client == idx { CLIENT } else { SERVER };
            if clean {
                self.close_side(id, mine);
            } else if let Some(s) = self.sessions.get_mut(&id) {
                s.state[mine] = Side::Closed;
            }
        }
        let slot = &mut self.slots[idx];
        slot.up = false;
        slot.incarnation += 1;
        slot.node.take()
    }

    pub fn start(&mut self, idx: usize, node: Box<dyn Node>) {
        let slot = &mut self.slots[idx];
        slot.node = Some(node);
        slot.up = true;
        let incarnation = slot.incarnation;
        self.push(self.now, Pending::Deliver {
            node: idx,
            incarnation,
            event: Event::Start,
        });
    }

    /// Processes every event scheduled at or before `t`, then sets the
    /// clock to `t`.
    pub fn run_until(&mut self, t: Time) {
        while let Some(entry) = self.queue.first_entry() {
            if entry.key().0 > t {
                break;
            }
            let ((at, _), pending) = entry.remove_entry();
            self.now = at;
            self.processed += 1;
            self.process(pending);
        }
        self.now = self.now.max(t);
    }

    pub fn run_for(&mut self, d: Duration) {
        self.run_until(self.now + d);
    }

    pub fn events_processed(&self) -> u64 {
        self.processed
    }

    pub fn observations(&self) -> &[ObservationRecord] {
        &self.observations
    }

    pub fn counter(&self, from: usize, to: usize, kind: &str) -> Counter {
        self.stats
            .iter()
            .filter(|((f, t, k), _)| *f == from && *t == to && *k == kind)
            .map(|(_, c)| *c)
            .next()
            .unwrap_or_default()
    }

    /// Sums counters matching the optional endpoint and kind filters.
    pub fn total(&self, from: Option<usize>, to: Option<usize>, kind: Option<&str>) -> Counter {
        let mut sum = Counter::default();
        for ((f, t, k), c) in &self.stats {
            if from.is_some_and(|x| x != *f) || to.is_some_and(|x| x != *t) || kind.is_some_and(|x| x != *k) {
                continue;
            }
            sum.messages += c.messages;
            sum.bytes += c.bytes;
        }
        sum
    }

    pub fn link_stats(&self) -> Vec<LinkStat> {
        self.stats
            .iter()
            .map(|((f, t, k), c)| LinkStat {
                from: self.slots[*f].spec.name.clone(),
                to: self.slots[*t].spec.name.clone(),
                kind: k,
                messages: c.messages,
                bytes: c.bytes,
            })
            .collect()
    }

    /// Sessions currently up on both ends.
    pub fn live_sessions(&self) -> usize {
        self.sessions
            .values()
            .filter(|s| s.state == [Side::Up, Side::Up])
            .count()
    }

    fn push(&mut self, at: Time, p: Pending) {
        let seq = self.seq;
        self.seq += 1;
        self.queue.insert((at, seq), p);
    }

    fn count(&mut self, from: usize, to: usize, kind: &'static str, bytes: usize) {
        let c = self.stats.entry((from, to, kind)).or_default();
        c.messages += 1;
        c.bytes += bytes as u64;
    }

    fn deliver(&mut self, at: Time, node: usize, event: Event) {
        let incarnation = self.slots[node].incarnation;
        self.push(at, Pending::Deliver { node, incarnation, event });
    }

    fn dispatch(&mut self, idx: usize, event: Event) {
        let Some(mut node) = self.slots[idx].node.take() else {
            return;
        };
        {
            let mut io = SimIo { net: self, me: idx };
            node.handle(event, &mut io);
        }
        self.slots[idx].node = Some(node);
    }

    fn session_delay(&self, s: &Session) -> Option<Duration> {
        self.delay(s.client, s.server)
    }

    fn process(&mut self, p: Pending) {
        match p {
            Pending::Deliver { node, incarnation, event } => {
                let slot = &self.slots[node];
                if slot.up && slot.incarnation == incarnation {
                    if let Some(s) = event_session(&event) {
                        if !self.accept_session_event(node, s, &event) {
                            return;
                        }
                    }
                    self.dispatch(node, event);
                }
            }
            Pending::HandshakeArrive(id) => self.handshake_arrive(id),
            Pending::ServerUp(id) => {
                let Some(s) = self.sessions.get_mut(&id) else { return };
                if s.state[SERVER] != Side::Connecting || s.state[CLIENT] == Side::Closed {
                    return;
                }
                let (server, client_addr) = (s.server, s.client_addr);
                let inc = s.server_inc;
                if self.slots[server].incarnation != inc || !self.slots[server].up {
                    return;
                }
                let s = self.sessions.get_mut(&id).expect("session exists");
                s.state[SERVER] = Side::Up;
                s.last_heard[SERVER] = self.now;
                let setup = ControlMessage::ServerSetup {
                    selected_version: PROTOCOL_VERSION,
                };
                let client = s.client;
                self.count_control(server, client, &setup);
                let deadline = self.now + self.cfg.keepalive * KEEPALIVE_MISSES;
                self.push(deadline, Pending::Deadline(id, SERVER));
                self.deliver(self.now, server, Event::SessionUp {
                    session: id,
                    peer: client_addr,
                    role: Role::Server,
                });
            }
            Pending::ClientUp(id) => {
                let Some(s) = self.sessions.get(&id) else { return };
                if s.state[CLIENT] != Side::Connecting {
                    return;
                }
                if s.state[SERVER] != Side::Up || self.session_delay(s).is_none() {
                    let at = s.opened_at + self.cfg.connect_timeout;
                    self.push(at.max(self.now), Pending::ConnectFail(id, ConnectError::Timeout));
                    return;
                }
                let s = self.sessions.get_mut(&id).expect("session exists");
                s.state[CLIENT] = Side::Up;
                s.last_heard[CLIENT] = self.now;
                let (client, server_addr) = (s.client, s.server_addr);
                let probe_at = self.now + self.cfg.keepalive;
                let deadline = self.now + self.cfg.keepalive * KEEPALIVE_MISSES;
                self.push(probe_at, Pending::Probe(id));
                self.push(deadline, Pending::Deadline(id, CLIENT));
                self.deliver(self.now, client, Event::SessionUp {
                    session: id,
                    peer: server_addr,
                    role: Role::Client,
                });
            }
            Pending::ConnectFail(id, error) => {
                let Some(s) = self.sessions.get_mut(&id) else { return };
                if s.state[CLIENT] != Side::Connecting {
                    return;
                }
                s.state = [Side::Closed, Side::Closed];
                let (client, peer) = (s.client, s.server_addr);
                self.deliver(self.now, client, Event::SessionFailed {
                    session: id,
                    peer,
                    error,
                });
            }
            Pending::Probe(id) => {
                let Some(s) = self.sessions.get(&id) else { return };
                if s.state[CLIENT] != Side::Up {
                    return;
                }
                let (client, server) = (s.client, s.server);
                if let Some(d) = self.session_delay(s) {
                    self.count(client, server, "keepalive", 0);
                    self.push(self.now + d, Pending::ProbeArrive(id, SERVER));
                }
                self.push(self.now + self.cfg.keepalive, Pending::Probe(id));
            }
            Pending::ProbeArrive(id, side) => {
                let Some(s) = self.sessions.get_mut(&id) else { return };
                if s.state[side] != Side::Up {
                    return;
                }
                s.last_heard[side] = self.now;
                if side == SERVER {
                    let (client, server) = (s.client, s.server);
                    if let Some(d) = self.delay(client, server) {
                        self.count(server, client, "keepalive", 0);
                        self.push(self.now + d, Pending::ProbeArrive(id, CLIENT));
                    }
                }
            }
            Pending::Deadline(id, side) => {
                let limit = self.cfg.keepalive * KEEPALIVE_MISSES;
                let Some(s) = self.sessions.get_mut(&id) else { return };
                if s.state[side] != Side::Up {
                    return;
                }
                let due = s.last_heard[side] + limit;
                if self.now >= due {
                    s.state[side] = Side::Closed;
                    let node = if side == CLIENT { s.client } else { s.server };
                    self.deliver(self.now, node, Event::SessionClosed {
                        session: id,
                        reason: CloseReason::Timeout,
                    });
                } else {
                    self.push(due, Pending::Deadline(id, side));
                }
            }
            Pending::RemoteClose(id, side) => {
                let Some(s) = self.sessions.get_mut(&id) else { return };
                match s.state[side] {
                    Side::Up => {
                        s.state[side] = Side::Closed;
                        let node = if side == CLIENT { s.client } else { s.server };
                        self.deliver(self.now, node, Event::SessionClosed {
                            session: id,
                            reason: CloseReason::Remote,
                        });
                    }
                    Side::Connecting if side == CLIENT => {
                        s.state = [Side::Closed, Side::Closed];
                        let (client, peer) = (s.client, s.server_addr);
                        self.deliver(self.now, client, Event::SessionFailed {
                            session: id,
                            peer,
                            error: ConnectError::Refused,
                        });
                    }
                    _ => s.state[side] = Side::Closed,
                }
            }
            Pending::Admin { node, f } => {
                if !self.slots[node].up {
                    return;
                }
                let Some(mut n) = self.slots[node].node.take() else { return };
                {
                    let mut io = SimIo { net: self, me: node };
                    f(n.as_mut(), &mut io);
                }
                self.slots[node].node = Some(n);
            }
        }
        self.gc_sessions();
    }

    /// Drops a session event if the receiving side is no longer up, and
    /// refreshes liveness otherwise.
    fn accept_session_event(&mut self, node: usize, id: SessionId, event: &Event) -> bool {
        let Some(s) = self.sessions.get_mut(&id) else {
            return !matches!(event, Event::Control { .. } | Event::Object { .. });
        };
        let side = if s.client == node { CLIENT } else { SERVER };
        match event {
            Event::Control { .. } | Event::Object { .. } => {
                if s.state[side] != Side::Up {
                    return false;
                }
                s.last_heard[side] = self.now;
                true
            }
            _ => true,
        }
    }

    fn gc_sessions(&mut self) {
        if self.sessions.len() > 64 && self.processed.is_multiple_of(1024) {
            self.sessions.retain(|_, s| s.state != [Side::Closed, Side::Closed]);
        }
    }

    fn handshake_arrive(&mut self, id: SessionId) {
        let Some(s) = self.sessions.get(&id) else { return };
        if s.state[CLIENT] != Side::Connecting {
            return;
        }
        let Some(d) = self.session_delay(s) else {
            let at = s.opened_at + self.cfg.connect_timeout;
            self.push(at, Pending::ConnectFail(id, ConnectError::Timeout));
            return;
        };
        let slot = &self.slots[s.server];
        let listening = slot.up && slot.spec.moqt_port == Some(s.server_addr.port());
        let reply_at = self.now + d;
        if !listening {
            self.push(reply_at, Pending::ConnectFail(id, ConnectError::Refused));
            return;
        }
        if !slot.spec.alpn.contains(&s.alpn) {
            self.push(reply_at, Pending::ConnectFail(id, ConnectError::AlpnMismatch));
            return;
        }
        let server_inc = slot.incarnation;
        let rtt = d * 2;
        let client_up = s.opened_at + rtt * (self.cfg.handshake_rtts + self.cfg.session_setup_rtts);
        let server_up = if client_up >= s.opened_at + d + d {
            client_up - d
        } else {
            self.now
        };
        let setup = ControlMessage::ClientSetup {
            supported_version: PROTOCOL_VERSION,
        };
        let (client, server) = (s.client, s.server);
        self.sessions.get_mut(&id).expect("session exists").server_inc = server_inc;
        self.count_control(client, server, &setup);
        self.push(server_up.max(self.now), Pending::ServerUp(id));
        self.push(client_up.max(server_up), Pending::ClientUp(id));
    }

    fn count_control(&mut self, from: usize, to: usize, msg: &ControlMessage) {
        let len = wire::encode_control(msg).map(|b| b.len()).unwrap_or(0);
        self.count(from, to, msg.kind(), len);
    }

    fn close_side(&mut self, id: SessionId, side: usize) {
        let Some(s) = self.sessions.get_mut(&id) else { return };
        let prev = s.state[side];
        s.state[side] = Side::Closed;
        if prev == Side::Closed {
            return;
        }
        let other = 1 - side;
        if s.state[other] == Side::Closed {
            return;
        }
        let (client, server) = (s.client, s.server);
        if let Some(d) = self.delay(client, server) {
            self.push(self.now + d, Pending::RemoteClose(id, other));
        }
    }
}

fn link_key(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

fn event_session(e: &Event) -> Option<SessionId> {
    match e {
        Event::Control { session, .. } | Event::Object { session, .. } => Some(*session),
        _ => None,
    }
}

/// The [`Transport`] handle a node receives while handling an event.
struct SimIo<'a> {
    net: &'a mut SimNetwork,
    me: usize,
}

impl SimIo<'_> {
    /// Returns the peer and this node's side, after checking that the
    /// local side may send.
    fn sending_side(&self, id: SessionId) -> Result<(usize, usize), SendError> {
        let s = self.net.sessions.get(&id).ok_or(SendError::SessionClosed)?;
        let side = if s.client == self.me {
            CLIENT
        } else if s.server == self.me {
            SERVER
        } else {
            return Err(SendError::SessionClosed);
        };
        match s.state[side] {
            Side::Up => {}
            Side::Connecting => return Err(SendError::NotEstablished),
            Side::Closed => return Err(SendError::SessionClosed),
        }
        let peer = if side == CLIENT { s.server } else { s.client };
        Ok((peer, side))
    }
}

impl Transport for SimIo<'_> {
    fn now(&self) -> Time {
        self.net.now
    }

    fn open_session(&mut self, peer: SocketAddr, alpn: &[u8]) -> SessionId {
        let net = &mut *self.net;
        let id = SessionId(net.next_session);
        net.next_session += 1;
        let now = net.now;
        let me = self.me;
        let client_addr = SocketAddr::new(net.slots[me].spec.ip, CLIENT_UDP_PORT + 1);
        let Some(&server) = net.by_ip.get(&peer.ip()) else {
            net.sessions.insert(id, Session {
                client: me,
                server: me,
                server_inc: 0,
                client_addr,
                server_addr: peer,
                alpn: alpn.to_vec(),
                opened_at: now,
                state: [Side::Connecting, Side::Closed],
                last_heard: [now, now],
            });
            net.push(now + net.cfg.connect_timeout, Pending::ConnectFail(id, ConnectError::Timeout));
            return id;
        };
        net.sessions.insert(id, Session {
            client: me,
            server,
            server_inc: net.slots[server].incarnation,
            client_addr,
            server_addr: peer,
            alpn: alpn.to_vec(),
            opened_at: now,
            state: [Side::Connecting, Side::Connecting],
            last_heard: [now, now],
        });
        match net.delay(me, server) {
            Some(d) => net.push(now + d, Pending::HandshakeArrive(id)),
            None => net.push(now + net.cfg.connect_timeout, Pending::ConnectFail(id, ConnectError::Timeout)),
        }
        id
    }

    fn send_control(&mut self, session: SessionId, msg: ControlMessage) -> Result<(), SendError> {
        let (peer, _) = self.sending_side(session)?;
        let bytes = wire::encode_control(&msg).map_err(|e| SendError::Encode(e.to_string()))?;
        let (decoded, _) = wire::decode_control(&bytes).map_err(|e| SendError::Encode(e.to_string()))?;
        self.net.count(self.me, peer, msg.kind(), bytes.len());
        if let Some(d) = self.net.delay(self.me, peer) {
            let at = self.net.now + d;
            self.net.deliver(at, peer, Event::Control { session, msg: decoded });
        }
        Ok(())
    }

    fn send_object(&mut self, session: SessionId, obj: ObjectMessage) -> Result<(), SendError> {
        let (peer, _) = self.sending_side(session)?;
        let bytes = wire::encode_object(&obj).map_err(|e| SendError::Encode(e.to_string()))?;
        self.net.count(self.me, peer, "object", bytes.len());
        if let Some(d) = self.net.delay(self.me, peer) {
            let at = self.net.now + d;
            self.net.deliver(at, peer, Event::Object { session, obj });
        }
        Ok(())
    }

    fn close_session(&mut self, session: SessionId) {
        let Some(s) = self.net.sessions.get(&session) else { return };
        let side = if s.client == self.me { CLIENT } else { SERVER };
        if s.state[CLIENT] == Side::Connecting && side == CLIENT {
            let s = self.net.sessions.get_mut(&session).expect("session exists");
            s.state[CLIENT] = Side::Closed;
            return;
        }
        self.net.close_side(session, side);
    }

    fn is_live(&self, session: SessionId) -> bool {
        self.sending_side(session).is_ok()
    }

    fn send_udp(&mut self, socket: SocketKind, to: SocketAddr, payload: Bytes) {
        let net = &mut *self.net;
        let me = self.me;
        let spec = &net.slots[me].spec;
        let from_port = match socket {
            SocketKind::Service => spec.udp_port.unwrap_or(DEFAULT_DNS_PORT),
            SocketKind::Client => CLIENT_UDP_PORT,
        };
        let from = SocketAddr::new(spec.ip, from_port);
        let Some(&dest) = net.by_ip.get(&to.ip()) else { return };
        net.count(me, dest, "udp", payload.len());
        let dspec = &net.slots[dest].spec;
        let kind = if dspec.udp_port == Some(to.port()) {
            SocketKind::Service
        } else if to.port() == CLIENT_UDP_PORT {
            SocketKind::Client
        } else {
            return;
        };
        if !net.slots[dest].up {
            return;
        }
        if let Some(d) = net.delay(me, dest) {
            let at = net.now + d;
            net.deliver(at, dest, Event::Udp {
                socket: kind,
                from,
                payload,
            });
        }
    }

    fn set_timer(&mut self, at: Time, token: u64) {
        let at = at.max(self.net.now);
        self.net.deliver(at, self.me, Event::Timer(token));
    }

    fn record(&mut self, obs: Observation) {
        self.net.observations.push(ObservationRecord {
            time: self.net.now,
            node: self.me,
            obs,
        });
    }
}

#[cfg(test)]
mod tests {
    use std::net::Ipv4Addr;

    use super::*;
    use crate::dns::{Name, RecordType};
    use crate::track::TrackQuery;

    /// Records every event with its arrival time.
    #[derive(Default)]
    struct Probe {
        log: Vec<(Time, String)>,
        sessions: Vec<SessionId>,
        objects: usize,
    }

    impl Node for Probe {
        fn handle(&mut self, event: Event, _io: &mut dyn Transport) {
            let now_label = match &event {
                Event::Start => "start".to_string(),
                Event::SessionUp { session, role, .. } => {
                    self.sessions.push(*session);
                    format!("up {role:?}")
                }
                Event::SessionFailed { error, .. } => format!("failed {error:?}"),
                Event::SessionClosed { reason, .. } => format!("closed {reason:?}"),
                Event::Control { msg, .. } => format!("control {}", msg.kind()),
                Event::Object { .. } => {
                    self.objects += 1;
                    "object".to_string()
                }
                Event::Udp { .. } => "udp".to_string(),
                Event::Timer(t) => format!("timer {t}"),
            };
            self.log.push((_io.now(), now_label));
        }
    }

    fn ip(n: u8) -> IpAddr {
        IpAddr::V4(Ipv4Addr::new(10, 0, 0, n))
    }

    fn pair(delay_ms: u64) -> (SimNetwork, usize, usize) {
        let mut net = SimNetwork::new(SimConfig::default());
        let a = net.add_node(NodeSpec::client("a", ip(1)), Box::<Probe>::default());
        let b = net.add_node(NodeSpec::client("b", ip(2)).with_moqt(), Box::<Probe>::default());
        net.link(a, b, Duration::from_millis(delay_ms));
        (net, a, b)
    }

    fn open(net: &mut SimNetwork, a: usize, b: usize, alpn: &'static [u8]) -> SessionId {
        let addr = net.spec(b).moqt_addr();
        net.with_node::<Probe, _>(a, |_, io| io.open_session(addr, alpn))
    }

    fn log(net: &SimNetwork, idx: usize) -> Vec<(u64, String)> {
        net.node::<Probe>(idx)
            .unwrap()
            .log
            .iter()
            .map(|(t, s)| (t.as_millis(), s.clone()))
            .collect()
    }

    fn sub_msg(id: u64) -> ControlMessage {
        ControlMessage::Subscribe {
            request_id: id,
            track: TrackQuery::new(Name::parse("a.").unwrap(), RecordType::A, true)
                .track_key()
                .unwrap(),
        }
    }

    #[test]
    fn session_cost_is_two_rtts() {
        let (mut net, a, b) = pair(50);
        net.run_until(Time::ZERO);
        open(&mut net, a, b, ALPN);
        net.run_until(Time::from_secs(1));
        assert!(log(&net, a).contains(&(200, "up Client".to_string())));
        assert!(log(&net, b).contains(&(150, "up Server".to_string())));
    }

    #[test]
    fn zero_rtt_handshake() {
        let mut net = SimNetwork::new(SimConfig {
            handshake_rtts: 0,
            ..SimConfig::default()
        });
        let a = net.add_node(NodeSpec::client("a", ip(1)), Box::<Probe>::default());
        let b = net.add_node(NodeSpec::client("b", ip(2)).with_moqt(), Box::<Probe>::default());
        net.link(a, b, Duration::from_millis(50));
        open(&mut net, a, b, ALPN);
        net.run_until(Time::from_secs(1));
        assert!(log(&net, a).contains(&(100, "up Client".to_string())));
    }

    #[test]
    fn connect_failures() {
        let (mut net, a, b) = pair(50);
        open(&mut net, a, b, b"bogus/9");
        net.run_until(Time::from_secs(1));
        assert!(log(&net, a).contains(&(100, "failed AlpnMismatch".to_string())));

        // No listener on the other side.
        let addr = net.spec(a).moqt_addr();
        net.with_node::<Probe, _>(b, |_, io| io.open_session(addr, ALPN));
        net.run_until(Time::from_secs(2));
        assert!(log(&net, b).contains(&(1100, "failed Refused".to_string())));

        // Nobody at the address.
        let t0 = net.now();
        let nowhere = SocketAddr::new(ip(99), 853);
        net.with_node::<Probe, _>(a, |_, io| io.open_session(nowhere, ALPN));
        net.run_until(Time::from_secs(10));
        let expect = (t0 + Duration::from_secs(5)).as_millis();
        assert!(log(&net, a).contains(&(expect, "failed Timeout".to_string())));
    }

    #[test]
    fn sessions_are_independent() {
        let (mut net, a, b) = pair(10);
        let s1 = open(&mut net, a, b, ALPN);
        let s2 = open(&mut net, a, b, ALPN);
        assert_ne!(s1, s2);
        net.run_until(Time::from_secs(1));
        assert_eq!(net.node::<Probe>(a).unwrap().sessions, vec![s1, s2]);
        assert_eq!(net.live_sessions(), 2);
    }

    #[test]
    fn control_order_and_closed_errors() {
        let (mut net, a, b) = pair(10);
        let s = open(&mut net, a, b, ALPN);
        assert_eq!(
            net.with_node::<Probe, _>(a, |_, io| io.send_control(s, sub_msg(1))),
            Err(SendError::NotEstablished)
        );
        net.run_until(Time::from_millis(40));
        net.with_node::<Probe, _>(a, |_, io| {
            io.send_control(s, sub_msg(1)).unwrap();
            io.send_control(s, ControlMessage::Unsubscribe { request_id: 1 }).unwrap();
        });
        net.run_until(Time::from_millis(100));
        let got: Vec<String> = log(&net, b).into_iter().map(|(_, l)| l).collect();
        let i = got.iter().position(|l| l == "control subscribe").unwrap();
        assert_eq!(got[i + 1], "control unsubscribe");

        net.with_node::<Probe, _>(a, |_, io| io.close_session(s));
        let obj = ObjectMessage::new(1, 1, Bytes::from_static(b"x"));
        assert_eq!(
            net.with_node::<Probe, _>(a, |_, io| io.send_object(s, obj)),
            Err(SendError::SessionClosed)
        );
        net.run_until(Time::from_millis(200));
        assert!(log(&net, b).contains(&(110, "closed Remote".to_string())));
        assert_eq!(net.node::<Probe>(b).unwrap().objects, 0);
    }

    #[test]
    fn thousand_objects_all_arrive() {
        let (mut net, a, b) = pair(5);
        let s = open(&mut net, a, b, ALPN);
        net.run_until(Time::from_millis(20));
        net.with_node::<Probe, _>(a, |_, io| {
            for g in 0..1000u64 {
                io.send_object(s, ObjectMessage::new(1, g, Bytes::from(g.to_be_bytes().to_vec())))
                    .unwrap();
            }
        });
        net.run_until(Time::from_millis(100));
        assert_eq!(net.node::<Probe>(b).unwrap().objects, 1000);
        assert_eq!(net.counter(a, b, "object").messages, 1000);
    }

    #[test]
    fn keepalive_detects_silence() {
        let (mut net, a, b) = pair(50);
        let s = open(&mut net, a, b, ALPN);
        net.run_until(Time::from_secs(600));
        assert!(net.with_node::<Probe, _>(a, |_, io| io.is_live(s)));

        let cut_at = net.now();
        net.cut_link(a, b);
        net.run_until(cut_at + Duration::from_secs(200));
        let bound = cut_at + DEFAULT_KEEPALIVE * 3 + Duration::from_millis(100);
        for idx in [a, b] {
            let closed = net
                .node::<Probe>(idx)
                .unwrap()
                .log
                .iter()
                .find(|(_, l)| l == "closed Timeout")
                .map(|(t, _)| *t)
                .expect("session declared dead");
            assert!(closed <= bound, "{closed} > {bound}");
            assert!(closed > cut_at + DEFAULT_KEEPALIVE * 2);
        }
        assert_eq!(
            net.with_node::<Probe, _>(a, |_, io| io.send_control(s, sub_msg(2))),
            Err(SendError::SessionClosed)
        );
    }

    #[test]
    fn udp_routing() {
        let mut net = SimNetwork::new(SimConfig::default());
        let a = net.add_node(NodeSpec::client("a", ip(1)), Box::<Probe>::default());
        let b = net.add_node(NodeSpec::client("b", ip(2)).with_udp(), Box::<Probe>::default());
        net.link(a, b, Duration::from_millis(7));
        let to = net.spec(b).udp_addr();
        net.with_node::<Probe, _>(a, |_, io| io.send_udp(SocketKind::Client, to, Bytes::from_static(b"q")));
        net.run_until(Time::from_secs(1));
        assert!(log(&net, b).contains(&(7, "udp".to_string())));
        assert_eq!(net.counter(a, b, "udp"), Counter { messages: 1, bytes: 1 });
    }

    #[test]
    fn restart_closes_peer_sessions() {
        let (mut net, a, b) = pair(10);
        open(&mut net, a, b, ALPN);
        net.run_until(Time::from_secs(1));
        net.restart(b, Box::<Probe>::default());
        net.run_until(Time::from_secs(2));
        assert!(log(&net, a).contains(&(1010, "closed Remote".to_string())));
        assert_eq!(log(&net, b), vec![(1000, "start".to_string())]);
    }
}
