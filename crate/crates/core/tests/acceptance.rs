//! Acceptance checks. Runs without the libtest harness so every verdict is
//! printed as a `PASS`/`FAIL` line even when all of them pass.

mod common;

use std::any::Any;
use std::net::Ipv4Addr;
use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use proptest::collection::vec;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use sha2::{Digest, Sha256};

use common::strategies::*;
use common::*;
use moqdns_core::authoritative::{AuthConfig, Authoritative};
use moqdns_core::dns::{self, Name, RecordType};
use moqdns_core::forwarder::{Forwarder, ForwarderConfig, ResumeStore};
use moqdns_core::harness::{compare_modes, run_scenario, traffic_estimate, DdnsParameters, Mode, Scenario, StubClient, Subscriber};
use moqdns_core::track::{TrackError, TrackKey, TrackQuery, MAX_TRACKNAME_LEN, NAMESPACE_LEN};
use moqdns_core::transport::sim::SimNetwork;
use moqdns_core::transport::Observation;
use moqdns_core::wire::{decode_control, decode_object, encode_control, encode_object, ControlMessage, ErrorCode};
use moqdns_core::Time;

type Check = fn() -> Result<String, String>;

fn ensure(ok: bool, what: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(what())
    }
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

fn wire_round_trip() -> Result<String, String> {
    let start = Instant::now();
    const N: u32 = 10_000;
    runner(N)
        .run(&(control(), object()), |(c, o)| {
            let bytes = encode_control(&c).unwrap();
            let (back, used) = decode_control(&bytes).unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(encode_control(&back).unwrap(), bytes);
            prop_assert_eq!(back, c);
            let bytes = encode_object(&o).unwrap();
            let (back, used) = decode_object(&bytes).unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(back, o);
            Ok(())
        })
        .map_err(|e| format!("wire: {e}"))?;
    runner(N)
        .run(&message(), |m| {
            let bytes = dns::encode_message(&m).unwrap();
            let back = dns::decode_message(&bytes).unwrap();
            prop_assert_eq!(dns::encode_message(&back).unwrap(), bytes);
            prop_assert_eq!(back, m);
            Ok(())
        })
        .map_err(|e| format!("dns: {e}"))?;
    runner(N)
        .run(&(vec(any::<u8>(), 0..512), control(), message(), any::<prop::sample::Index>(), any::<u8>()), |(noise, c, m, i, v)| {
            for mut bytes in [noise, encode_control(&c).unwrap(), dns::encode_message(&m).unwrap()] {
                if !bytes.is_empty() {
                    let at = i.index(bytes.len());
                    bytes[at] ^= v | 1;
                }
                let _ = decode_control(&bytes);
                let _ = decode_object(&bytes);
                let _ = dns::decode_message(&bytes);
                let _ = TrackKey::from_bytes(&bytes);
            }
            Ok(())
        })
        .map_err(|e| format!("fuzz: {e}"))?;
    let took = start.elapsed();
    ensure(took < Duration::from_secs(30), || format!("took {took:?}"))?;
    Ok(format!("{N} wire + {N} DNS round-trips, {N} fuzz rounds in {:.1} s", took.as_secs_f64()))
}

/// A name whose wire form is exactly `len` bytes.
fn name_of_wire_len(len: usize) -> Name {
    let full = 63 * 64;
    let last = len - full - 2;
    let mut labels = vec![vec![b'a'; 63]; 63];
    labels.push(vec![b'b'; last]);
    let n = Name::from_labels(labels).unwrap();
    assert_eq!(n.wire_len(), len);
    n
}

fn mapping_arithmetic() -> Result<String, String> {
    ensure(NAMESPACE_LEN == 5 && MAX_TRACKNAME_LEN == 4091, || format!("{NAMESPACE_LEN} / {MAX_TRACKNAME_LEN}"))?;
    let key = TrackQuery::new(name_of_wire_len(4091), RecordType::A, true).track_key().map_err(|e| e.to_string())?;
    let ns: usize = key.namespace().iter().map(|e| e.len()).sum();
    ensure(ns == 5, || format!("namespace is {ns} bytes"))?;
    ensure(key.identity_len() == 4096, || format!("identity {}", key.identity_len()))?;
    let long = TrackQuery::new(name_of_wire_len(4092), RecordType::A, true).track_key();
    ensure(long == Err(TrackError::TooLong(4092)), || format!("4092 gave {long:?}"))?;
    // Same boundary on the decode side.
    let mut raw = key.to_bytes();
    ensure(TrackKey::from_bytes(&raw).is_ok(), || "4096-byte identity rejected".into())?;
    raw.insert(NAMESPACE_LEN, 0);
    ensure(TrackKey::from_bytes(&raw) == Err(TrackError::TooLong(4092)), || "4097-byte identity accepted".into())?;
    Ok("namespace 5 bytes; track name 4091 accepted, 4092 rejected".into())
}

fn update_semantics() -> Result<String, String> {
    let mut net = net();
    let auth = add_auth(&mut net, 1, example_zone(), AuthConfig::default(), true);
    let subs: Vec<usize> = (0..3)
        .map(|i| {
            let s = add_subscriber(&mut net, 10 + i, moqt(1), vec![www(false)]);
            net.link(s, auth, HOP);
            s
        })
        .collect();
    net.run_until(secs(1));
    let before = net.node::<Authoritative>(auth).unwrap().zone().version();
    let received: Vec<usize> = subs.iter().map(|&s| net.node::<Subscriber>(s).unwrap().received().len()).collect();
    net.with_node::<Authoritative, _>(auth, |a, io| a.apply_updates(&[set_a("www.example.", 300, [192, 0, 2, 99])], io).unwrap());
    net.run_until(secs(2));
    let mut hashes = Vec::new();
    for (&s, &n) in subs.iter().zip(&received) {
        let new = &net.node::<Subscriber>(s).unwrap().received()[n..];
        ensure(new.len() == 1, || format!("subscriber got {} objects", new.len()))?;
        let o = &new[0];
        ensure(o.group == before + 1, || format!("group {} after version {before}", o.group))?;
        ensure(o.object == 0, || format!("object id {}", o.object))?;
        hashes.push(Sha256::digest(&o.payload));
    }
    ensure(hashes.windows(2).all(|w| w[0] == w[1]), || "payload hashes differ".into())?;
    Ok(format!("3 subscribers x 1 object, group {}, object 0, equal hashes", before + 1))
}

fn joining_fetch() -> Result<String, String> {
    let mut net = net();
    let auth = add_auth(&mut net, 1, example_zone(), AuthConfig::default(), true);
    net.run_until(secs(1));
    let change = |net: &mut SimNetwork, octet: u8| {
        net.with_node::<Authoritative, _>(auth, |a, io| a.apply_updates(&[set_a("www.example.", 300, [192, 0, 2, octet])], io).unwrap());
    };
    for i in 0..4 {
        change(&mut net, 10 + i);
    }
    let v = net.node::<Authoritative>(auth).unwrap().zone().version();
    let s = add_subscriber(&mut net, 10, moqt(1), vec![www(false)]);
    net.link(s, auth, HOP);
    net.run_until(secs(2));
    for i in 0..6 {
        change(&mut net, 100 + i);
        net.run_until(secs(3 + u64::from(i)));
    }
    let got = net.node::<Subscriber>(s).unwrap().received();
    let groups: Vec<u64> = got.iter().map(|r| r.group).collect();
    let want: Vec<u64> = (v..=v + 6).collect();
    ensure(groups == want, || format!("groups {groups:?}, want {want:?}"))?;
    ensure(got[0].fetched && got[1..].iter().all(|r| !r.fetched), || "fetch/subscription split wrong".into())?;
    Ok(format!("joined at {v}, received {:?}", groups))
}

fn round_trips() -> Result<String, String> {
    let mut h = hierarchy(|_| {});
    // Pre-warm the recursive.
    let alias = track("alias.example.", RecordType::A, true);
    let pre = add_subscriber(&mut h.net, 10, moqt(2), vec![www(true), alias]);
    h.net.link(pre, h.rec, HOP);
    let fwd = add_forwarder(&mut h.net, 4, ForwarderConfig::new(moqt(2)), ResumeStore::in_memory());
    h.net.link(fwd, h.rec, HOP);
    let stub = add_stub(&mut h.net, 5, udp(4));
    h.net.link(stub, fwd, Duration::ZERO);
    h.net.run_until(secs(5));
    let r = 2 * HOP;
    let latency = |net: &mut SimNetwork, name: &str, until: u64| {
        stub_query(net, stub, name, RecordType::A);
        net.run_until(secs(until));
        let resp = net.node::<StubClient>(stub).unwrap().responses().last().cloned().expect("answered");
        (resp.received.since(resp.sent), answer_addrs(&resp.msg))
    };
    let (cold, a) = latency(&mut h.net, "www.example.", 6);
    let (warm, b) = latency(&mut h.net, "alias.example.", 7);
    let addr = vec![Ipv4Addr::new(192, 0, 2, 1)];
    ensure(a == addr && b == addr, || format!("answers {a:?} {b:?}"))?;
    ensure(cold == 3 * r, || format!("cold {cold:?}, want {:?}", 3 * r))?;
    ensure(warm == r, || format!("warm {warm:?}, want {r:?}"))?;
    Ok(format!("R = {} ms: cold {} ms, warm {} ms", r.as_millis(), cold.as_millis(), warm.as_millis()))
}

fn fallback() -> Result<String, String> {
    // Answer equality against a direct query.
    let mut h = udp_leaf(false);
    let via = add_stub(&mut h.net, 9, udp(2));
    let direct = add_stub(&mut h.net, 8, udp(3));
    h.net.link(via, h.rec, HOP);
    h.net.link(direct, h.leaf, HOP);
    h.net.run_until(secs(1));
    stub_query(&mut h.net, via, "www.example.", RecordType::A);
    let q = TrackQuery::new(Name::parse("www.example.").unwrap(), RecordType::A, false);
    h.net.with_node::<StubClient, _>(direct, |s, io| s.query(q, io));
    h.net.run_until(secs(10));
    let a = h.net.node::<StubClient>(via).unwrap().responses()[0].msg.clone();
    let b = h.net.node::<StubClient>(direct).unwrap().responses()[0].msg.clone();
    ensure(a.header.rcode == dns::rcode::NOERROR && a.answer_fingerprint() == b.answer_fingerprint(), || {
        format!("recursive {:?} vs direct {:?}", a.answers, b.answers)
    })?;

    // Decline without polling.
    let s = add_subscriber(&mut h.net, 10, moqt(2), vec![www(true)]);
    h.net.link(s, h.rec, HOP);
    h.net.run_until(secs(20));
    let declined = h.net.node::<Subscriber>(s).unwrap().control_log().iter().any(|(_, m)| {
        matches!(m, ControlMessage::SubscribeError { code: ErrorCode::SubscriptionsUnavailable, .. })
    });
    ensure(declined, || "subscribe was not declined".into())?;

    // Polling carries changes within TTL plus the poll round trip and the
    // downstream hop.
    let ttl = Duration::from_secs(300);
    let bound = ttl + 3 * HOP;
    let mut h = udp_leaf(true);
    let s = add_subscriber(&mut h.net, 10, moqt(2), vec![www(true)]);
    h.net.link(s, h.rec, HOP);
    h.net.run_until(secs(10));
    let leaf = h.leaf;
    let changes: Vec<(Time, u8)> = (0..12u8).map(|i| (secs(1000 + u64::from(i) * 377), 100 + i)).collect();
    for &(at, octet) in &changes {
        h.net.schedule::<Authoritative>(at, leaf, move |a, io| {
            a.apply_updates(&[set_a("www.example.", 300, [192, 0, 2, octet])], io).unwrap();
        });
    }
    h.net.run_until(secs(1000 + 12 * 377 + 400));
    let got = h.net.node::<Subscriber>(s).unwrap().received().to_vec();
    let mut worst = Duration::ZERO;
    for (at, octet) in changes {
        let seen = got
            .iter()
            .find(|r| answer_addrs(&dns::decode_message(&r.payload).unwrap()) == vec![Ipv4Addr::new(192, 0, 2, octet)])
            .ok_or_else(|| format!("change at {at:?} never arrived"))?;
        let delay = seen.at.since(at);
        ensure(delay <= bound, || format!("change at {at:?} took {delay:?} > {bound:?}"))?;
        worst = worst.max(delay);
    }
    Ok(format!("answers match, subscribe declined, polled worst {:.3} s <= {:.3} s", worst.as_secs_f64(), bound.as_secs_f64()))
}

fn chain_scenario() -> Scenario {
    Scenario::load(std::path::Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/chain.json"))).expect("chain scenario loads")
}

fn staleness_comparison() -> Result<String, String> {
    let s = chain_scenario();
    let start = Instant::now();
    let c = compare_modes(&s).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    // client -> fwd -> rec -> auth
    let one_way: f64 = s.links.iter().map(|l| l.delay_ms).sum();
    let ttl = s.workload.records[0].ttl as u64 * 1000;
    let depth = 2;
    let p = c.pubsub.staleness.p99_ms.ok_or("no pubsub samples")?;
    let b = c.baseline.staleness.p99_ms.ok_or("no baseline samples")?;
    ensure(c.pubsub.staleness.samples > 0 && c.pubsub.staleness.unobserved == 0, || format!("{:?}", c.pubsub.staleness))?;
    ensure(p as f64 <= 2.0 * one_way, || format!("pubsub p99 {p} ms > {} ms", 2.0 * one_way))?;
    ensure(b > 0 && b <= depth * ttl, || format!("baseline p99 {b} ms outside (0, {}]", depth * ttl))?;
    ensure(p < b, || format!("pubsub {p} ms not below baseline {b} ms"))?;
    ensure(took < Duration::from_secs(10), || format!("took {took:?}"))?;
    Ok(format!("pubsub p99 {p} ms, baseline p99 {b} ms, {} changes, {:.2} s wall", c.pubsub_report.changes, took.as_secs_f64()))
}

fn cost_model() -> Result<String, String> {
    let v = traffic_estimate(1000.0, 10.0, 300.0).map_err(|e| e.to_string())?;
    ensure(v == 240_000.0, || format!("{v} bps"))?;
    let d = DdnsParameters::default().estimate().map_err(|e| e.to_string())?;
    let err = (d - 5.56e9).abs() / 5.56e9;
    ensure(err <= 0.02, || format!("{d:e} bps is {:.2}% off", err * 100.0))?;
    Ok(format!("{v} bps; DDNS {d:.3e} bps"))
}

fn stop_forwarder(net: &mut SimNetwork, idx: usize) -> ResumeStore {
    let node: Box<dyn Any> = net.stop(idx, true).expect("forwarder was up");
    node.downcast::<Forwarder>().expect("a forwarder").into_store()
}

fn resume() -> Result<String, String> {
    let mut h = hierarchy(|_| {});
    let mut fwds = Vec::new();
    for n in [4u8, 6] {
        let f = add_forwarder(&mut h.net, n, ForwarderConfig::new(moqt(2)), ResumeStore::in_memory());
        h.net.link(f, h.rec, HOP);
        let stub = add_stub(&mut h.net, n + 1, udp(n));
        h.net.link(stub, f, Duration::ZERO);
        stub_query(&mut h.net, stub, "www.example.", RecordType::A);
        fwds.push(f);
    }
    let (fwd, twin, leaf) = (fwds[0], fwds[1], h.leaf);
    h.net.run_until(secs(5));
    let mut t = 10;
    let bump = |net: &mut SimNetwork, t: &mut u64| {
        let octet = *t as u8;
        net.schedule::<Authoritative>(secs(*t), leaf, move |a, io| {
            a.apply_updates(&[set_a("www.example.", 300, [192, 0, 2, octet])], io).unwrap();
        });
        *t += 10;
        net.run_until(secs(*t));
    };
    let version = |net: &SimNetwork| net.node::<Authoritative>(leaf).unwrap().zone().version();
    while version(&h.net) < 9 {
        bump(&mut h.net, &mut t);
    }
    let store = stop_forwarder(&mut h.net, fwd);
    ensure(store.get(&www(true)) == Some(9), || format!("stored {:?}", store.get(&www(true))))?;
    for _ in 0..3 {
        bump(&mut h.net, &mut t);
    }
    ensure(version(&h.net) == 12, || format!("live edge {}", version(&h.net)))?;
    let restarted = secs(t);
    h.net.start(fwd, Box::new(Forwarder::new(ForwarderConfig::new(moqt(2)), store)));
    h.net.run_until(secs(t + 5));
    let groups: Vec<u64> = h
        .net
        .observations()
        .iter()
        .filter(|r| r.node == fwd && r.time >= restarted)
        .filter_map(|r| match r.obs {
            Observation::Answer { group, .. } => Some(group),
            _ => None,
        })
        .collect();
    let f = h.net.node::<Forwarder>(fwd).unwrap();
    ensure(f.stats().range_fetches == 1 && f.stats().joining_fetches == 0, || format!("{:?}", f.stats()))?;
    ensure(groups == [10, 11, 12], || format!("fetched groups {groups:?}"))?;
    let view = |f: &Forwarder| {
        f.tracks()
            .map(|(k, s)| (k.clone(), s.group, s.payload.map(|p| Sha256::digest(&p).to_vec())))
            .collect::<Vec<_>>()
    };
    let twin_view = view(h.net.node::<Forwarder>(twin).unwrap());
    ensure(view(f) == twin_view, || "state differs from the never-restarted forwarder".into())?;
    Ok("stored 9, live 12: range fetch delivered [10, 11, 12], state equals twin".into())
}

fn aggregation() -> Result<String, String> {
    let mut detail = Vec::new();
    for d in [1u8, 4, 16] {
        let mut h = hierarchy(|_| {});
        let subs: Vec<usize> = (0..d)
            .map(|i| {
                let s = add_subscriber(&mut h.net, 20 + i, moqt(2), vec![www(true)]);
                h.net.link(s, h.rec, HOP);
                s
            })
            .collect();
        h.net.run_until(secs(5));
        let leaf = h.leaf;
        let upstream = h.net.node::<Authoritative>(leaf).unwrap().subscribers_of(&www(false));
        ensure(upstream == 1, || format!("D={d}: {upstream} upstream subscriptions"))?;
        ensure(h.net.counter(h.rec, leaf, "subscribe").messages == 1, || format!("D={d}: subscribe count"))?;
        for k in 0..3u8 {
            let before = h.net.counter(leaf, h.rec, "object").messages;
            let down: Vec<u64> = subs.iter().map(|&s| h.net.counter(h.rec, s, "object").messages).collect();
            let at = secs(10 + u64::from(k) * 10);
            h.net.schedule::<Authoritative>(at, leaf, move |a, io| {
                a.apply_updates(&[set_a("www.example.", 300, [192, 0, 2, 200 + k])], io).unwrap();
            });
            h.net.run_until(at + Duration::from_secs(5));
            let up = h.net.counter(leaf, h.rec, "object").messages - before;
            ensure(up == 1, || format!("D={d}: {up} upstream objects for one update"))?;
            for (&s, n) in subs.iter().zip(down) {
                let got = h.net.counter(h.rec, s, "object").messages - n;
                ensure(got == 1, || format!("D={d}: subscriber got {got} objects"))?;
            }
        }
        detail.push(format!("D={d}"));
    }
    Ok(format!("{}: 1 upstream subscription, 1 upstream object per update", detail.join(", ")))
}

fn determinism() -> Result<String, String> {
    let chain = chain_scenario();
    let mut clustered = chain.clone();
    clustered.name = "clustered".into();
    clustered.workload.records[0].changes = moqdns_core::harness::ChangeSpec::Cluster(300);
    let mut runs = 0;
    for s in [chain, clustered] {
        for mode in [Mode::PubSub, Mode::BaselineUdp] {
            let s = s.clone().with_mode(mode);
            let a = run_scenario(&s).map_err(|e| e.to_string())?.files().map_err(|e| e.to_string())?;
            let b = run_scenario(&s).map_err(|e| e.to_string())?.files().map_err(|e| e.to_string())?;
            for ((name, x), (_, y)) in a.iter().zip(&b) {
                ensure(x == y, || format!("{} {} {name} differs", s.name, mode.as_str()))?;
            }
            runs += 1;
        }
    }
    Ok(format!("{runs} scenario/mode pairs byte-identical across reruns"))
}

fn main() {
    let checks: [(&str, Check); 11] = [
        ("wire_round_trip", wire_round_trip),
        ("mapping_arithmetic", mapping_arithmetic),
        ("update_semantics", update_semantics),
        ("joining_fetch", joining_fetch),
        ("round_trip_accounting", round_trips),
        ("fallback_conformance", fallback),
        ("staleness_comparison", staleness_comparison),
        ("cost_model", cost_model),
        ("resume", resume),
        ("aggregation", aggregation),
        ("determinism", determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {:02} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:02} {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
