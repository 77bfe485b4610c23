//! Iterative resolution tasks.

use std::collections::BTreeSet;
use std::net::IpAddr;

use tracing::debug;

use super::upstream::answer_ttl;
use super::{Delegation, Entry, Recursive, RTimer, SubscriptionPolicy, UpstreamKey};
use crate::dns::{rcode, Name, RData, RecordType};
use crate::track::{TrackKey, TrackQuery};
use crate::transport::Transport;

/// Glueless delegations may nest this deep.
const MAX_GLUE_DEPTH: u32 = 2;

pub(crate) struct Task {
    /// The cache entry being resolved.
    entry: TrackKey,
    /// The question currently asked; differs from `entry` after a CNAME.
    track: TrackKey,
    zone: Name,
    servers: Vec<IpAddr>,
    next: usize,
    cuts: BTreeSet<Name>,
    chain: Vec<UpstreamKey>,
    referrals: Vec<UpstreamKey>,
    waiting: Option<UpstreamKey>,
    waiting_glue: Option<TrackKey>,
    glueless: Vec<Name>,
    depth: u32,
    steps: usize,
    deadline: u64,
}

/// The same question with RD cleared, as sent to authoritative servers.
fn iterative(track: &TrackKey) -> TrackKey {
    TrackQuery {
        rd: false,
        ..track.query()
    }
    .track_key()
    .unwrap_or_else(|_| track.clone())
}

enum Flow {
    Continue,
    Wait,
    Done,
    Fail(&'static str),
}

impl Recursive {
    /// Starts resolving `track` unless a resolution is already running.
    pub(crate) fn resolve_entry(&mut self, track: &TrackKey, io: &mut dyn Transport) {
        self.resolve_at_depth(track, 0, io);
    }

    fn resolve_at_depth(&mut self, track: &TrackKey, depth: u32, io: &mut dyn Transport) {
        let now = io.now();
        let retention = self.cfg.retention;
        let entry = self
            .entries
            .entry(track.clone())
            .or_insert_with(|| Entry::new(now, retention));
        if entry.task.is_some() {
            return;
        }
        let id = self.next_task;
        self.next_task += 1;
        entry.task = Some(id);
        let (zone, servers) = self.deepest_delegation(&track.query().qname, now);
        let deadline = self.timers.set(io, now + self.cfg.resolve_timeout, RTimer::TaskDeadline(id));
        self.tasks.insert(
            id,
            Task {
                entry: track.clone(),
                track: iterative(track),
                zone,
                servers,
                next: 0,
                cuts: BTreeSet::new(),
                chain: Vec::new(),
                referrals: Vec::new(),
                waiting: None,
                waiting_glue: None,
                glueless: Vec::new(),
                depth,
                steps: 0,
                deadline,
            },
        );
        self.step(id, io);
    }

    /// Closest enclosing zone cut with known servers.
    pub(crate) fn deepest_delegation(&self, qname: &Name, now: crate::Time) -> (Name, Vec<IpAddr>) {
        let mut cur = Some(qname.canonical());
        while let Some(name) = cur {
            if let Some(d) = self.delegations.get(&name).filter(|d| d.expires > now) {
                return (name, d.servers.clone());
            }
            cur = name.parent();
        }
        let roots = self.cfg.root_hints.iter().map(|h| h.address).collect();
        (Name::root(), roots)
    }

    fn step(&mut self, id: u64, io: &mut dyn Transport) {
        loop {
            let Some(task) = self.tasks.get(&id) else { return };
            let Some(&server) = task.servers.get(task.next) else {
                self.fail_task(id, "no usable server", io);
                return;
            };
            let key = UpstreamKey {
                server,
                track: task.track.clone(),
            };
            if self.lookup(&key, io) {
                match self.process_answer(id, &key, io) {
                    Flow::Continue => continue,
                    Flow::Wait | Flow::Done => return,
                    Flow::Fail(reason) => {
                        self.fail_task(id, reason, io);
                        return;
                    }
                }
            }
            let up = self.upstreams.get_mut(&key).expect("lookup creates the upstream");
            let Some(task) = self.tasks.get_mut(&id) else { return };
            if !up.in_flight() {
                task.next += 1;
                continue;
            }
            up.waiters.insert(id);
            task.waiting = Some(key);
            return;
        }
    }

    /// Called when an upstream the task waits on has an answer.
    pub(crate) fn task_answer(&mut self, id: u64, key: &UpstreamKey, io: &mut dyn Transport) {
        let Some(task) = self.tasks.get_mut(&id) else { return };
        if task.waiting.as_ref() != Some(key) {
            return;
        }
        task.waiting = None;
        match self.process_answer(id, key, io) {
            Flow::Continue => self.step(id, io),
            Flow::Wait | Flow::Done => {}
            Flow::Fail(reason) => self.fail_task(id, reason, io),
        }
    }

    pub(crate) fn task_server_failed(&mut self, id: u64, key: &UpstreamKey, io: &mut dyn Transport) {
        let Some(task) = self.tasks.get_mut(&id) else { return };
        if task.waiting.as_ref() != Some(key) {
            return;
        }
        task.waiting = None;
        task.next += 1;
        self.step(id, io);
    }

    fn process_answer(&mut self, id: u64, key: &UpstreamKey, io: &mut dyn Transport) -> Flow {
        let now = io.now();
        let Some(ans) = self.upstreams.get(key).and_then(|u| u.answer.clone()) else {
            return Flow::Fail("upstream has no answer");
        };
        let msg = &ans.msg;
        let max_steps = self.cfg.max_referrals + self.cfg.max_cname_chain + 8;
        let max_referrals = self.cfg.max_referrals;
        let max_chain = self.cfg.max_cname_chain;
        let negative = self.cfg.negative_ttl;
        let task = self.tasks.get_mut(&id).expect("caller checked");
        task.steps += 1;
        if task.steps > max_steps {
            return Flow::Fail("too many resolution steps");
        }
        if matches!(
            msg.header.rcode,
            rcode::SERVFAIL | rcode::REFUSED | rcode::NOTIMP | rcode::FORMERR
        ) {
            task.next += 1;
            return Flow::Continue;
        }
        let query = task.track.query();
        let qname = query.qname.clone();
        if msg.is_referral() {
            let ns: Vec<_> = msg.authority.iter().filter(|r| r.rtype() == RecordType::Ns).collect();
            let cut = ns[0].name.canonical();
            let descends = cut != task.zone && cut.is_at_or_below(&task.zone) && qname.is_at_or_below(&cut);
            if !descends || task.cuts.contains(&cut) {
                return Flow::Fail("referral loop");
            }
            if task.cuts.len() >= max_referrals {
                return Flow::Fail("too many referrals");
            }
            let targets: Vec<Name> = ns
                .iter()
                .filter(|r| r.name.canonical() == cut)
                .filter_map(|r| match &r.data {
                    RData::Ns(n) => Some(n.canonical()),
                    _ => None,
                })
                .collect();
            let mut addrs: Vec<IpAddr> = Vec::new();
            for t in &targets {
                for r in msg.additional.iter().filter(|r| r.name.eq_ignore_case(t)) {
                    let ip = match r.data {
                        RData::A(a) => IpAddr::V4(a),
                        RData::Aaaa(a) => IpAddr::V6(a),
                        _ => continue,
                    };
                    if !addrs.contains(&ip) {
                        addrs.push(ip);
                    }
                }
            }
            task.referrals.push(key.clone());
            task.cuts.insert(cut.clone());
            task.zone = cut.clone();
            task.next = 0;
            if !addrs.is_empty() {
                task.servers = addrs.clone();
                let expires = now + answer_ttl(msg, negative);
                self.delegations.insert(cut, Delegation { servers: addrs, expires });
                return Flow::Continue;
            }
            task.servers.clear();
            // Names inside the delegated zone cannot be found without glue.
            task.glueless = targets.into_iter().filter(|t| !t.is_at_or_below(&cut)).collect();
            return self.next_glue(id, io);
        }

        task.chain.push(key.clone());
        let mut cur = qname.clone();
        let mut hops = 0;
        while let Some(target) = msg.answers.iter().find_map(|r| match &r.data {
            RData::Cname(t) if r.name.eq_ignore_case(&cur) => Some(t.canonical()),
            _ => None,
        }) {
            hops += 1;
            if hops > max_chain || target == qname {
                return Flow::Fail("CNAME chain too long");
            }
            cur = target;
        }
        let resolved = cur == qname
            || query.qtype == RecordType::Cname.to_u16()
            || msg.header.rcode != rcode::NOERROR
            || msg
                .answers
                .iter()
                .any(|r| r.name.eq_ignore_case(&cur) && r.rtype().to_u16() == query.qtype);
        if resolved {
            self.finish_task(id, io);
            return Flow::Done;
        }
        if task.chain.len() > max_chain {
            return Flow::Fail("CNAME chain too long");
        }
        let next = TrackQuery { qname: cur.clone(), ..query };
        match next.track_key() {
            Ok(t) => task.track = t,
            Err(_) => return Flow::Fail("CNAME target too long"),
        }
        let (zone, servers) = self.deepest_delegation(&cur, now);
        let task = self.tasks.get_mut(&id).expect("caller checked");
        task.zone = zone;
        task.servers = servers;
        task.next = 0;
        task.cuts.clear();
        Flow::Continue
    }

    /// Resolves the address of the next nameserver of a glueless referral.
    fn next_glue(&mut self, id: u64, io: &mut dyn Transport) -> Flow {
        let now = io.now();
        loop {
            let task = self.tasks.get_mut(&id).expect("caller checked");
            if task.depth >= MAX_GLUE_DEPTH {
                return Flow::Fail("glueless delegation nested too deep");
            }
            if task.glueless.is_empty() {
                return Flow::Fail("no reachable nameserver");
            }
            let ns = task.glueless.remove(0);
            let q = TrackQuery {
                qname: ns,
                qtype: RecordType::A.to_u16(),
                qclass: crate::dns::CLASS_IN,
                ..task.track.query()
            };
            let Ok(ns_track) = q.track_key() else { continue };
            if let Some(addrs) = self.entry_addresses(&ns_track, now) {
                let task = self.tasks.get_mut(&id).expect("caller checked");
                task.servers = addrs;
                return Flow::Continue;
            }
            let task = self.tasks.get_mut(&id).expect("caller checked");
            task.waiting_glue = Some(ns_track.clone());
            let depth = task.depth + 1;
            self.glue_waiters.entry(ns_track.clone()).or_default().insert(id);
            // May finish synchronously and re-enter this task through
            // `glue_done`, so nothing touches the task afterwards.
            self.resolve_at_depth(&ns_track, depth, io);
            return Flow::Wait;
        }
    }

    /// Addresses held by a usable cache entry.
    fn entry_addresses(&self, track: &TrackKey, now: crate::Time) -> Option<Vec<IpAddr>> {
        let e = self.entries.get(track)?;
        if !self.entry_valid(e, now) {
            return None;
        }
        let addrs: Vec<IpAddr> = e
            .view
            .as_ref()?
            .msg
            .answers
            .iter()
            .filter_map(|r| match r.data {
                RData::A(a) => Some(IpAddr::V4(a)),
                RData::Aaaa(a) => Some(IpAddr::V6(a)),
                _ => None,
            })
            .collect();
        (!addrs.is_empty()).then_some(addrs)
    }

    fn glue_done(&mut self, child: &TrackKey, io: &mut dyn Transport) {
        let Some(parents) = self.glue_waiters.remove(child) else { return };
        let now = io.now();
        for id in parents {
            let Some(task) = self.tasks.get_mut(&id) else { continue };
            if task.waiting_glue.as_ref() != Some(child) {
                continue;
            }
            task.waiting_glue = None;
            let flow = match self.entry_addresses(child, now) {
                Some(addrs) => {
                    let task = self.tasks.get_mut(&id).expect("checked above");
                    task.servers = addrs;
                    task.next = 0;
                    Flow::Continue
                }
                None => self.next_glue(id, io),
            };
            match flow {
                Flow::Continue => self.step(id, io),
                Flow::Wait | Flow::Done => {}
                Flow::Fail(reason) => self.fail_task(id, reason, io),
            }
        }
    }

    fn finish_task(&mut self, id: u64, io: &mut dyn Transport) {
        let Some(task) = self.tasks.remove(&id) else { return };
        self.timers.cancel(task.deadline);
        let track = task.entry.clone();
        let Some(entry) = self.entries.get_mut(&track) else { return };
        let old: Vec<UpstreamKey> = entry.links.drain(..).chain(entry.referrals.drain(..)).collect();
        entry.links = task.chain;
        if self.cfg.policy == SubscriptionPolicy::EveryLevel {
            entry.referrals = task.referrals.clone();
        }
        entry.task = None;
        entry.stale = false;
        let new: BTreeSet<UpstreamKey> = entry.links.iter().chain(&entry.referrals).cloned().collect();
        for k in old.iter().filter(|k| !new.contains(*k)) {
            if let Some(up) = self.upstreams.get_mut(k) {
                up.dependents.remove(&track);
            }
        }
        for k in &new {
            if let Some(up) = self.upstreams.get_mut(k) {
                up.dependents.insert(track.clone());
            }
        }
        if self.cfg.policy == SubscriptionPolicy::TerminalOnly {
            for k in &task.referrals {
                if self.upstreams.get(k).is_some_and(|u| u.dependents.is_empty()) {
                    self.unsubscribe(k, io);
                }
            }
        }
        self.recompute_entry(&track, io);
        self.serve_pending(&track, io);
        self.glue_done(&track, io);
    }

    pub(crate) fn fail_task(&mut self, id: u64, reason: &'static str, io: &mut dyn Transport) {
        let Some(task) = self.tasks.remove(&id) else { return };
        self.timers.cancel(task.deadline);
        if let Some(k) = &task.waiting {
            if let Some(up) = self.upstreams.get_mut(k) {
                up.waiters.remove(&id);
            }
        }
        if let Some(child) = &task.waiting_glue {
            if let Some(w) = self.glue_waiters.get_mut(child) {
                w.remove(&id);
            }
        }
        self.stats.servfails += 1;
        debug!(track = %task.entry, reason, "resolution failed");
        if let Some(e) = self.entries.get_mut(&task.entry) {
            e.task = None;
        }
        self.fail_pending(&task.entry, io);
        self.entry_stale(&task.entry, reason, io);
        self.glue_done(&task.entry, io);
    }
}
