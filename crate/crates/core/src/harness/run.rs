//! Builds a simulated topology from a scenario and measures it.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::net::{Ipv4Addr, Ipv6Addr};
use std::rc::Rc;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::clients::{StubClient, Subscriber};
use super::report::{
    Comparison, LookupSample, MetricsReport, ModeSummary, Percentiles, StalenessSample, SubscriptionSample,
    TierStaleness, Totals,
};
use super::scenario::{secs, ChangeSpec, Mode, RecordWorkload, RoleConfig, Scenario};
use super::workload::{workload_from_clusters, ChangeProfile};
use super::HarnessError;
use crate::authoritative::{answer_question, load_zone, AuthConfig, Authoritative, RrSetChange, ZoneChange};
use crate::dns::{Name, RData, RecordType};
use crate::forwarder::{Forwarder, ForwarderConfig, ResumeStore};
use crate::recursive::{Recursive, RecursiveConfig, RootHint};
use crate::track::{TrackKey, TrackQuery};
use crate::transport::sim::{NodeSpec, SimConfig, SimNetwork};
use crate::transport::{Node, Observation};
use crate::Time;

/// One workload record, resolved.
struct Record {
    label: String,
    name: Name,
    rtype: RecordType,
    ttl: u32,
    server: usize,
    changes: Vec<Time>,
}

impl Record {
    fn matches(&self, track: &TrackKey) -> bool {
        let q = track.query();
        q.qtype == self.rtype.to_u16() && q.qname.eq_ignore_case(&self.name)
    }

    fn value(&self, version: usize) -> RData {
        let v = version as u32;
        match self.rtype {
            RecordType::Aaaa => RData::Aaaa(Ipv6Addr::new(0x2001, 0xdb8, 0, 0, 0, 0, (v >> 16) as u16, v as u16)),
            RecordType::Txt => RData::Txt(vec![format!("v{version}").into_bytes()]),
            // 198.18.0.0/15 is reserved for benchmarking.
            _ => RData::A(Ipv4Addr::from(0xC612_0000u32 + v)),
        }
    }
}

#[derive(Clone, Copy)]
struct Change {
    at: Time,
    fingerprint: [u8; 32],
}

/// Runs the scenario to completion on the logical clock.
pub fn run_scenario(s: &Scenario) -> Result<MetricsReport, HarnessError> {
    s.validate()?;
    let sim = SimConfig {
        handshake_rtts: s.sim.handshake_rtts,
        session_setup_rtts: s.sim.session_setup_rtts,
        ..SimConfig::default()
    };
    let mut net = SimNetwork::new(sim);
    let index: BTreeMap<&str, usize> = s.nodes.iter().enumerate().map(|(i, n)| (n.name.as_str(), i)).collect();
    let specs: Vec<NodeSpec> = s
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let spec = NodeSpec::client(n.name.clone(), s.ip_of(i));
            match &n.role {
                RoleConfig::Authoritative { moqt, udp, .. } => {
                    let spec = if *moqt { spec.with_moqt() } else { spec };
                    if *udp {
                        spec.with_udp()
                    } else {
                        spec
                    }
                }
                RoleConfig::Recursive { .. } => spec.with_moqt().with_udp(),
                RoleConfig::Forwarder { .. } => spec.with_udp(),
                RoleConfig::Client { .. } | RoleConfig::Subscriber { .. } => spec,
            }
        })
        .collect();

    let end = secs(s.duration_secs + s.settle_secs);
    let horizon = Time::ZERO + secs(s.duration_secs);
    let records = resolve_records(s, &index)?;
    let history: Rc<RefCell<Vec<Vec<Change>>>> = Rc::new(RefCell::new(vec![Vec::new(); records.len()]));

    let mut late_subscribers = Vec::new();
    for (i, n) in s.nodes.iter().enumerate() {
        let seed = s.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let node: Box<dyn Node> = match &n.role {
            RoleConfig::Authoritative {
                zone,
                accept_subscriptions,
                ..
            } => {
                let zone = load_zone(zone).map_err(|e| HarnessError::Invalid(e.to_string()))?;
                for (r, rec) in records.iter().enumerate() {
                    if rec.server == i {
                        let initial = answer_question(&zone, &TrackQuery::new(rec.name.clone(), rec.rtype, false));
                        history.borrow_mut()[r].push(Change {
                            at: Time::ZERO,
                            fingerprint: initial.answer_fingerprint(),
                        });
                    }
                }
                Box::new(Authoritative::new(zone, AuthConfig {
                    accept_subscriptions: *accept_subscriptions,
                    ..AuthConfig::default()
                }))
            }
            RoleConfig::Recursive {
                root_hints,
                poll_fallback,
                max_subscriptions,
                idle_secs,
            } => {
                let hints = root_hints
                    .iter()
                    .map(|h| RootHint {
                        name: h.clone(),
                        address: specs[index[h.as_str()]].ip,
                        capability: None,
                    })
                    .collect();
                let mut cfg = RecursiveConfig::new(hints);
                cfg.poll_fallback = *poll_fallback;
                cfg.classic = s.mode == Mode::BaselineUdp;
                cfg.seed = seed;
                if let Some(m) = max_subscriptions {
                    cfg.max_subscriptions = *m;
                }
                if let Some(idle) = idle_secs {
                    cfg.idle_timeout = secs(*idle);
                }
                Box::new(Recursive::new(cfg))
            }
            RoleConfig::Forwarder { upstream, idle_secs } => {
                let up = &specs[index[upstream.as_str()]];
                let mut cfg = match s.mode {
                    Mode::PubSub => ForwarderConfig::new(up.moqt_addr()),
                    Mode::BaselineUdp => ForwarderConfig::udp(up.udp_addr()),
                };
                cfg.seed = seed;
                if let Some(idle) = idle_secs {
                    cfg.idle_timeout = secs(*idle);
                }
                Box::new(Forwarder::new(cfg, ResumeStore::in_memory()))
            }
            RoleConfig::Client { target } => {
                let schedule = query_schedule(s, &n.name, &records, horizon, target_is_rd(s, target));
                Box::new(StubClient::new(specs[index[target.as_str()]].udp_addr(), schedule))
            }
            RoleConfig::Subscriber { target, start_secs } => {
                let rd = target_is_rd(s, target);
                let tracks: Vec<TrackKey> = records
                    .iter()
                    .filter_map(|r| TrackQuery::new(r.name.clone(), r.rtype, rd).track_key().ok())
                    .collect();
                let addr = specs[index[target.as_str()]].moqt_addr();
                if *start_secs > 0.0 {
                    late_subscribers.push((i, Time::ZERO + secs(*start_secs), tracks));
                    Box::new(Subscriber::new(addr, Vec::new()))
                } else {
                    Box::new(Subscriber::new(addr, tracks))
                }
            }
        };
        net.add_node(specs[i].clone(), node);
    }
    for l in &s.links {
        net.link(index[l.a.as_str()], index[l.b.as_str()], Duration::from_micros((l.delay_ms * 1000.0).round() as u64));
    }

    schedule_changes(&mut net, &records, &history);
    for (i, at, tracks) in late_subscribers {
        net.schedule::<Subscriber>(at, i, move |sub, io| {
            for t in tracks {
                sub.subscribe(t, io);
            }
        });
    }

    let mut subscriptions = Vec::new();
    let step = secs(s.sample_secs);
    let mut t = Time::ZERO;
    loop {
        net.run_until(t);
        sample_subscriptions(&net, s, t, &mut subscriptions);
        if t >= Time::ZERO + end {
            break;
        }
        t = (t + step).min(Time::ZERO + end);
    }

    let history = history.borrow();
    let (samples, tiers, overall) = staleness(&net, s, &records, &history);
    let lookups = lookups(&net, s, &records);
    let mut first_lookups: Vec<LookupSample> = Vec::new();
    for l in &lookups {
        if !first_lookups.iter().any(|f| f.node == l.node && f.record == l.record) {
            first_lookups.push(l.clone());
        }
    }
    let totals = totals(&net, s);

    Ok(MetricsReport {
        scenario: s.name.clone(),
        mode: s.mode,
        seed: s.seed,
        end_ms: net.now().as_millis(),
        changes: history.iter().map(|h| h.len().saturating_sub(1)).sum(),
        staleness: overall,
        tiers,
        first_lookups,
        totals,
        links: net.link_stats(),
        samples,
        lookups,
        subscriptions,
    })
}

/// Runs both modes with the same seed and workload.
pub fn compare_modes(s: &Scenario) -> Result<Comparison, HarnessError> {
    let pubsub = run_scenario(&s.with_mode(Mode::PubSub))?;
    let baseline = run_scenario(&s.with_mode(Mode::BaselineUdp))?;
    Ok(Comparison {
        scenario: s.name.clone(),
        seed: s.seed,
        pubsub: ModeSummary::of(&pubsub),
        baseline: ModeSummary::of(&baseline),
        pubsub_report: pubsub,
        baseline_report: baseline,
    })
}

fn target_is_rd(s: &Scenario, target: &str) -> bool {
    !matches!(s.node(target).map(|n| &n.role), Some(RoleConfig::Authoritative { .. }))
}

fn resolve_records(s: &Scenario, index: &BTreeMap<&str, usize>) -> Result<Vec<Record>, HarnessError> {
    let horizon = secs(s.duration_secs);
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    s.workload
        .records
        .iter()
        .map(|r: &RecordWorkload| {
            let name = Name::parse(&r.name).map_err(|e| HarnessError::Invalid(e.to_string()))?;
            let rtype = RecordType::parse(&r.rtype).map_err(|e| HarnessError::Invalid(e.to_string()))?;
            let mut changes: Vec<Duration> = match &r.changes {
                ChangeSpec::None => Vec::new(),
                ChangeSpec::AtSecs(v) => v.iter().map(|t| secs(*t)).collect(),
                ChangeSpec::Count(n) => (0..*n)
                    .map(|i| secs((i as f64 + 0.5) * s.duration_secs / *n as f64))
                    .collect(),
                ChangeSpec::Every {
                    start_secs,
                    interval_secs,
                } => (0..)
                    .map(|i| secs(start_secs + i as f64 * interval_secs))
                    .take_while(|t| *t < horizon)
                    .collect(),
                ChangeSpec::Cluster(c) => {
                    let profile = ChangeProfile::for_cluster(*c).map_err(|e| HarnessError::Invalid(e.to_string()))?;
                    workload_from_clusters(*c, &profile, 1, &mut rng)
                        .map_err(|e| HarnessError::Invalid(e.to_string()))?
                        .records
                        .remove(0)
                }
            };
            changes.retain(|t| *t < horizon);
            changes.sort();
            Ok(Record {
                label: format!("{}/{}", r.name, r.rtype.to_ascii_uppercase()),
                name,
                rtype,
                ttl: r.ttl,
                server: index[r.server.as_str()],
                changes: changes.into_iter().map(|d| Time::ZERO + d).collect(),
            })
        })
        .collect()
}

fn query_schedule(s: &Scenario, client: &str, records: &[Record], horizon: Time, rd: bool) -> Vec<(Time, TrackQuery)> {
    let mut out = Vec::new();
    for q in s.workload.queries.iter().filter(|q| q.client == client) {
        let wanted: Vec<&Record> = records
            .iter()
            .filter(|r| q.records.is_empty() || q.records.iter().any(|n| Name::parse(n).is_ok_and(|n| n.eq_ignore_case(&r.name))))
            .collect();
        let mut k = 0u64;
        loop {
            let at = Time::ZERO + secs(q.start_secs + k as f64 * q.interval_secs);
            if at >= horizon {
                break;
            }
            for r in &wanted {
                out.push((at, TrackQuery::new(r.name.clone(), r.rtype, rd)));
            }
            k += 1;
        }
    }
    out.sort_by_key(|(t, _)| *t);
    out
}

fn schedule_changes(net: &mut SimNetwork, records: &[Record], history: &Rc<RefCell<Vec<Vec<Change>>>>) {
    for (r, rec) in records.iter().enumerate() {
        for (k, at) in rec.changes.iter().enumerate() {
            let change = ZoneChange::Replace(RrSetChange {
                name: rec.name.clone(),
                rtype: rec.rtype,
                ttl: rec.ttl,
                data: vec![rec.value(k + 1)],
            });
            let query = TrackQuery::new(rec.name.clone(), rec.rtype, false);
            let history = Rc::clone(history);
            net.schedule::<Authoritative>(*at, rec.server, move |auth, io| {
                if let Err(e) = auth.apply_updates(&[change], io) {
                    tracing::warn!("scheduled change failed: {e}");
                    return;
                }
                let fingerprint = answer_question(auth.zone(), &query).answer_fingerprint();
                history.borrow_mut()[r].push(Change { at: io.now(), fingerprint });
            });
        }
    }
}

fn sample_subscriptions(net: &SimNetwork, s: &Scenario, t: Time, out: &mut Vec<SubscriptionSample>) {
    for (i, n) in s.nodes.iter().enumerate() {
        let counts = match n.role {
            RoleConfig::Authoritative { .. } => net.node::<Authoritative>(i).map(|a| (0, a.subscription_count())),
            RoleConfig::Recursive { .. } => net
                .node::<Recursive>(i)
                .map(|r| (r.upstream_subscription_count(), r.downstream_subscription_count())),
            RoleConfig::Forwarder { .. } => net
                .node::<Forwarder>(i)
                .map(|f| (f.tracks().filter(|(_, t)| t.subscribed).count(), 0)),
            _ => None,
        };
        if let Some((upstream, downstream)) = counts {
            out.push(SubscriptionSample {
                time_ms: t.as_millis(),
                node: n.name.clone(),
                upstream,
                downstream,
            });
        }
    }
}

/// For every change, the first time each tier held that version or a
/// later one.
fn staleness(
    net: &SimNetwork,
    s: &Scenario,
    records: &[Record],
    history: &[Vec<Change>],
) -> (Vec<StalenessSample>, Vec<TierStaleness>, Percentiles) {
    let mut samples = Vec::new();
    let mut tiers = Vec::new();
    let (mut all, mut all_missed) = (Vec::new(), 0);
    for (i, n) in s.nodes.iter().enumerate() {
        let role = n.role.kind();
        if !matches!(role, "recursive" | "forwarder" | "subscriber") {
            continue;
        }
        let (mut values, mut missed) = (Vec::new(), 0);
        for (r, rec) in records.iter().enumerate() {
            let versions = &history[r];
            let mut reached: Vec<Option<Time>> = vec![None; versions.len()];
            let mut highest: Option<usize> = None;
            let mut any = false;
            for o in net.observations().iter().filter(|o| o.node == i) {
                let Observation::Answer { track, fingerprint, .. } = &o.obs else {
                    continue;
                };
                if !rec.matches(track) {
                    continue;
                }
                any = true;
                let Some(v) = versions.iter().rposition(|c| c.fingerprint == *fingerprint && c.at <= o.time) else {
                    continue;
                };
                if highest.is_none_or(|h| v > h) {
                    let from = highest.map_or(0, |h| h + 1);
                    for slot in &mut reached[from..=v] {
                        *slot = Some(o.time);
                    }
                    highest = Some(v);
                }
            }
            if !any {
                continue;
            }
            for (k, c) in versions.iter().enumerate().skip(1) {
                match reached[k] {
                    Some(t) => {
                        let st = t.since(c.at).as_millis() as u64;
                        values.push(st);
                        samples.push(StalenessSample {
                            record: rec.label.clone(),
                            change: k,
                            node: n.name.clone(),
                            changed_at_ms: c.at.as_millis(),
                            observed_at_ms: t.as_millis(),
                            staleness_ms: st,
                        });
                    }
                    None => missed += 1,
                }
            }
        }
        all.extend_from_slice(&values);
        all_missed += missed;
        tiers.push(TierStaleness {
            node: n.name.clone(),
            role,
            staleness: Percentiles::from_values(&values, missed),
        });
    }
    (samples, tiers, Percentiles::from_values(&all, all_missed))
}

fn lookups(net: &SimNetwork, s: &Scenario, records: &[Record]) -> Vec<LookupSample> {
    net.observations()
        .iter()
        .filter_map(|o| {
            let Observation::Lookup { track, started, ok } = &o.obs else {
                return None;
            };
            let record = records
                .iter()
                .find(|r| r.matches(track))
                .map_or_else(|| track.query().qname.to_string(), |r| r.label.clone());
            Some(LookupSample {
                node: s.nodes[o.node].name.clone(),
                record,
                started_ms: started.as_millis(),
                latency_ms: o.time.since(*started).as_millis() as u64,
                ok: *ok,
            })
        })
        .collect()
}

fn totals(net: &SimNetwork, s: &Scenario) -> Totals {
    let mut upstream_queries = 0;
    for (i, n) in s.nodes.iter().enumerate() {
        match n.role {
            RoleConfig::Recursive { .. } => {
                if let Some(r) = net.node::<Recursive>(i) {
                    let st = r.stats();
                    upstream_queries += st.upstream_udp_queries + st.upstream_subscribes + st.upstream_fetches;
                }
            }
            RoleConfig::Forwarder { .. } => {
                if let Some(f) = net.node::<Forwarder>(i) {
                    let st = f.stats();
                    upstream_queries += st.upstream_udp_queries + st.subscribes + st.joining_fetches + st.range_fetches;
                }
            }
            _ => {}
        }
    }
    let all = net.total(None, None, None);
    Totals {
        upstream_queries,
        update_objects: net.total(None, None, Some("object")).messages,
        messages: all.messages,
        bytes: all.bytes,
    }
}
