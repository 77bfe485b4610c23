//! Measurement endpoints: a MoQT subscriber and a classic UDP stub.

use std::collections::BTreeMap;
use std::net::SocketAddr;

use bytes::Bytes;

use crate::dns::{self, Message};
use crate::track::{self, TrackKey, TrackQuery};
use crate::transport::{Event, Node, Observation, Role, SessionId, SocketKind, Timers, Transport, ALPN};
use crate::wire::{ControlMessage, FetchMode, ObjectMessage};
use crate::Time;

/// One object as seen by a [`Subscriber`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Received {
    pub at: Time,
    pub track: TrackKey,
    /// Request the object arrived on.
    pub request_id: u64,
    /// True when it answered the joining fetch rather than the subscription.
    pub fetched: bool,
    pub group: u64,
    pub object: u64,
    pub payload: Bytes,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Req {
    Subscribe(usize),
    Fetch(usize),
}

/// MoQT client that subscribes to a fixed set of tracks, optionally with a
/// joining fetch, and logs everything it receives.
pub struct Subscriber {
    target: SocketAddr,
    tracks: Vec<TrackKey>,
    joining: bool,
    session: Option<SessionId>,
    up: bool,
    next_req: u64,
    requests: BTreeMap<u64, Req>,
    subs: BTreeMap<usize, u64>,
    received: Vec<Received>,
    control: Vec<(Time, ControlMessage)>,
    connected_at: Option<Time>,
}

impl Subscriber {
    pub fn new(target: SocketAddr, tracks: Vec<TrackKey>) -> Self {
        Subscriber {
            target,
            tracks,
            joining: true,
            session: None,
            up: false,
            next_req: 0,
            requests: BTreeMap::new(),
            subs: BTreeMap::new(),
            received: Vec::new(),
            control: Vec::new(),
            connected_at: None,
        }
    }

    /// Subscribe without the joining fetch.
    pub fn without_fetch(mut self) -> Self {
        self.joining = false;
        self
    }

    pub fn tracks(&self) -> &[TrackKey] {
        &self.tracks
    }

    pub fn received(&self) -> &[Received] {
        &self.received
    }

    pub fn objects_for<'a>(&'a self, track: &'a TrackKey) -> impl Iterator<Item = &'a Received> + 'a {
        self.received.iter().filter(move |r| &r.track == track)
    }

    /// Every control message received, in order.
    pub fn control_log(&self) -> &[(Time, ControlMessage)] {
        &self.control
    }

    pub fn is_connected(&self) -> bool {
        self.up
    }

    pub fn connected_at(&self) -> Option<Time> {
        self.connected_at
    }

    /// Adds a track and subscribes to it if the session is up.
    pub fn subscribe(&mut self, track: TrackKey, io: &mut dyn Transport) {
        self.tracks.push(track);
        if self.up {
            self.send_requests(self.tracks.len() - 1, io);
        } else {
            self.connect(io);
        }
    }

    pub fn unsubscribe(&mut self, track: &TrackKey, io: &mut dyn Transport) {
        let Some(i) = self.tracks.iter().position(|t| t == track) else { return };
        if let (Some(req), Some(s)) = (self.subs.remove(&i), self.session) {
            let _ = io.send_control(s, ControlMessage::Unsubscribe { request_id: req });
        }
    }

    fn connect(&mut self, io: &mut dyn Transport) {
        if self.session.is_none() {
            self.session = Some(io.open_session(self.target, ALPN));
        }
    }

    fn send_requests(&mut self, i: usize, io: &mut dyn Transport) {
        let Some(s) = self.session else { return };
        let track = self.tracks[i].clone();
        let sub = self.next_req;
        self.next_req += 1;
        self.requests.insert(sub, Req::Subscribe(i));
        self.subs.insert(i, sub);
        let _ = io.send_control(s, ControlMessage::Subscribe {
            request_id: sub,
            track: track.clone(),
        });
        if self.joining {
            let id = self.next_req;
            self.next_req += 1;
            self.requests.insert(id, Req::Fetch(i));
            let _ = io.send_control(s, ControlMessage::Fetch {
                request_id: id,
                track,
                mode: FetchMode::Joining {
                    joining_request_id: sub,
                    offset: 1,
                },
            });
        }
    }

    fn on_object(&mut self, obj: ObjectMessage, io: &mut dyn Transport) {
        let Some(req) = self.requests.get(&obj.request_id).copied() else {
            return;
        };
        let (i, fetched) = match req {
            Req::Subscribe(i) => (i, false),
            Req::Fetch(i) => (i, true),
        };
        let track = self.tracks[i].clone();
        let newest = self.objects_for(&track).map(|r| r.group).max();
        if newest.is_none_or(|g| obj.group_id > g) {
            if let Ok(msg) = dns::decode_message(&obj.payload) {
                io.record(Observation::Answer {
                    track: track.clone(),
                    group: obj.group_id,
                    fingerprint: msg.answer_fingerprint(),
                });
            }
        }
        self.received.push(Received {
            at: io.now(),
            track,
            request_id: obj.request_id,
            fetched,
            group: obj.group_id,
            object: obj.object_id,
            payload: obj.payload,
        });
    }
}

impl Node for Subscriber {
    fn handle(&mut self, event: Event, io: &mut dyn Transport) {
        match event {
            Event::Start => {
                if !self.tracks.is_empty() {
                    self.connect(io);
                }
            }
            Event::SessionUp {
                session,
                role: Role::Client,
                ..
            } if Some(session) == self.session => {
                self.up = true;
                self.connected_at = Some(io.now());
                for i in 0..self.tracks.len() {
                    self.send_requests(i, io);
                }
            }
            Event::SessionFailed { session, .. } | Event::SessionClosed { session, .. }
                if Some(session) == self.session =>
            {
                self.session = None;
                self.up = false;
                self.subs.clear();
            }
            Event::Control { msg, .. } => self.control.push((io.now(), msg)),
            Event::Object { obj, .. } => self.on_object(obj, io),
            _ => {}
        }
    }
}

/// One completed exchange of a [`StubClient`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StubResponse {
    pub query: TrackQuery,
    pub sent: Time,
    pub received: Time,
    pub id: u16,
    pub msg: Message,
}

#[derive(Debug)]
enum StubTimer {
    Query(usize),
}

/// Sends classic DNS queries over UDP on a fixed schedule.
pub struct StubClient {
    target: SocketAddr,
    schedule: Vec<(Time, TrackQuery)>,
    timers: Timers<StubTimer>,
    next_id: u16,
    outstanding: BTreeMap<u16, (TrackQuery, Time)>,
    responses: Vec<StubResponse>,
    sent: u64,
}

impl StubClient {
    pub fn new(target: SocketAddr, schedule: Vec<(Time, TrackQuery)>) -> Self {
        StubClient {
            target,
            schedule,
            timers: Timers::default(),
            next_id: 1,
            outstanding: BTreeMap::new(),
            responses: Vec::new(),
            sent: 0,
        }
    }

    pub fn responses(&self) -> &[StubResponse] {
        &self.responses
    }

    pub fn sent(&self) -> u64 {
        self.sent
    }

    pub fn outstanding(&self) -> usize {
        self.outstanding.len()
    }

    /// Sends one query now and returns its id.
    pub fn query(&mut self, q: TrackQuery, io: &mut dyn Transport) -> u16 {
        let id = self.next_id;
        self.next_id = self.next_id.wrapping_add(1).max(1);
        if let Ok(bytes) = dns::encode_message(&q.to_message(id)) {
            self.sent += 1;
            io.send_udp(SocketKind::Client, self.target, Bytes::from(bytes));
            self.outstanding.insert(id, (q, io.now()));
        }
        id
    }

    fn on_response(&mut self, from: SocketAddr, payload: &[u8], io: &mut dyn Transport) {
        if from != self.target {
            return;
        }
        let Ok(msg) = dns::decode_message(payload) else { return };
        let Some((query, sent)) = self.outstanding.remove(&msg.header.id) else {
            return;
        };
        let now = io.now();
        if let Ok(track) = track::question_track(&msg) {
            io.record(Observation::Lookup {
                track: track.clone(),
                started: sent,
                ok: msg.header.rcode == dns::rcode::NOERROR,
            });
            io.record(Observation::Answer {
                track,
                group: self.responses.len() as u64,
                fingerprint: msg.answer_fingerprint(),
            });
        }
        self.responses.push(StubResponse {
            query,
            sent,
            received: now,
            id: msg.header.id,
            msg,
        });
    }
}

impl Node for StubClient {
    fn handle(&mut self, event: Event, io: &mut dyn Transport) {
        match event {
            Event::Start => {
                let now = io.now();
                for i in 0..self.schedule.len() {
                    let at = self.schedule[i].0.max(now);
                    self.timers.set(io, at, StubTimer::Query(i));
                }
            }
            Event::Timer(token) => {
                if let Some(StubTimer::Query(i)) = self.timers.fire(token) {
                    let q = self.schedule[i].1.clone();
                    self.query(q, io);
                }
            }
            Event::Udp {
                socket: SocketKind::Client,
                from,
                payload,
            } => self.on_response(from, &payload, io),
            _ => {}
        }
    }
}
