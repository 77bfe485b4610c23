mod common;

use std::net::Ipv4Addr;
use std::time::Duration;

use common::*;
use moqdns_core::authoritative::{AuthConfig, Authoritative};
use moqdns_core::dns::{self, rcode, RecordType};
use moqdns_core::harness::{StubClient, Subscriber};
use moqdns_core::recursive::{Recursive, Source, SubscriptionPolicy};
use moqdns_core::transport::sim::SimNetwork;
use moqdns_core::wire::{ControlMessage, ErrorCode};

fn subscribe(h: &mut Hierarchy, n: u8, tracks: Vec<moqdns_core::track::TrackKey>) -> usize {
    let s = add_subscriber(&mut h.net, n, moqt(2), tracks);
    h.net.link(s, h.rec, HOP);
    s
}

fn latest_addrs(net: &SimNetwork, sub: usize) -> Vec<Ipv4Addr> {
    let r = net.node::<Subscriber>(sub).unwrap().received().last().cloned().expect("an object arrived");
    answer_addrs(&dns::decode_message(&r.payload).unwrap())
}

fn rec(net: &SimNetwork, idx: usize) -> &Recursive {
    net.node::<Recursive>(idx).unwrap()
}

fn declined(net: &SimNetwork, sub: usize) -> bool {
    net.node::<Subscriber>(sub).unwrap().control_log().iter().any(|(_, m)| {
        matches!(m, ControlMessage::SubscribeError { code: ErrorCode::SubscriptionsUnavailable, .. })
    })
}

#[test]
fn cold_subscription_follows_referrals() {
    let mut h = hierarchy(|_| {});
    let s = subscribe(&mut h, 10, vec![www(true)]);
    h.net.run_until(secs(5));
    assert_eq!(latest_addrs(&h.net, s), vec![Ipv4Addr::new(192, 0, 2, 1)]);
    let e = rec(&h.net, h.rec).entry(&www(true)).expect("entry cached");
    assert_eq!(e.source, Source::Pushed);
    assert_eq!(e.downstream_subscribers, 1);
    // Root referral and leaf answer are both subscribed.
    assert_eq!(h.net.node::<Authoritative>(h.root).unwrap().subscription_count(), 1);
    assert_eq!(h.net.node::<Authoritative>(h.leaf).unwrap().subscribers_of(&www(false)), 1);
}

#[test]
fn leaf_change_reaches_subscriber_in_two_hops() {
    let mut h = hierarchy(|_| {});
    let s = subscribe(&mut h, 10, vec![www(true)]);
    h.net.run_until(secs(5));
    let group = h.net.node::<Subscriber>(s).unwrap().received().last().unwrap().group;
    let leaf = h.leaf;
    h.net.schedule::<Authoritative>(secs(10), leaf, |a, io| {
        a.apply_updates(&[set_a("www.example.", 300, [192, 0, 2, 50])], io).unwrap();
    });
    h.net.run_until(secs(10) + 2 * HOP - Duration::from_millis(1));
    assert_eq!(latest_addrs(&h.net, s), vec![Ipv4Addr::new(192, 0, 2, 1)]);
    h.net.run_until(secs(10) + 2 * HOP);
    assert_eq!(latest_addrs(&h.net, s), vec![Ipv4Addr::new(192, 0, 2, 50)]);
    let last = h.net.node::<Subscriber>(s).unwrap().received().last().unwrap().clone();
    // Groups follow the zone version, which only ever grows.
    assert!(last.group > group);
    assert!(!last.fetched);
}

#[test]
fn cname_chain_is_composed() {
    let mut h = hierarchy(|_| {});
    let alias = track("alias.example.", RecordType::A, true);
    let s = subscribe(&mut h, 10, vec![alias.clone()]);
    h.net.run_until(secs(5));
    let r = h.net.node::<Subscriber>(s).unwrap().received().last().cloned().unwrap();
    let msg = dns::decode_message(&r.payload).unwrap();
    assert_eq!(msg.answers.len(), 2);
    assert_eq!(answer_addrs(&msg), vec![Ipv4Addr::new(192, 0, 2, 1)]);
    let leaf = h.leaf;
    h.net.schedule::<Authoritative>(secs(10), leaf, |a, io| {
        a.apply_updates(&[set_a("www.example.", 300, [192, 0, 2, 51])], io).unwrap();
    });
    h.net.run_until(secs(11));
    assert_eq!(latest_addrs(&h.net, s), vec![Ipv4Addr::new(192, 0, 2, 51)]);
    let groups: Vec<u64> = h.net.node::<Subscriber>(s).unwrap().received().iter().map(|r| r.group).collect();
    assert!(groups.windows(2).all(|w| w[1] > w[0]), "{groups:?}");
}

#[test]
fn aggregates_downstream_subscribers() {
    let mut h = hierarchy(|_| {});
    let subs: Vec<usize> = (0..5).map(|i| subscribe(&mut h, 10 + i, vec![www(true)])).collect();
    h.net.run_until(secs(5));
    assert_eq!(h.net.node::<Authoritative>(h.root).unwrap().subscription_count(), 1);
    assert_eq!(h.net.node::<Authoritative>(h.leaf).unwrap().subscribers_of(&www(false)), 1);
    let before = h.net.counter(h.leaf, h.rec, "object").messages;
    let leaf = h.leaf;
    h.net.schedule::<Authoritative>(secs(10), leaf, |a, io| {
        a.apply_updates(&[set_a("www.example.", 300, [192, 0, 2, 52])], io).unwrap();
    });
    h.net.run_until(secs(11));
    assert_eq!(h.net.counter(h.leaf, h.rec, "object").messages - before, 1);
    for s in subs {
        assert_eq!(latest_addrs(&h.net, s), vec![Ipv4Addr::new(192, 0, 2, 52)]);
        assert_eq!(h.net.counter(h.rec, s, "object").messages, 2);
    }
}

#[test]
fn warm_cache_serves_without_upstream_traffic() {
    let mut h = hierarchy(|_| {});
    subscribe(&mut h, 10, vec![www(true)]);
    h.net.run_until(secs(5));
    let stats = rec(&h.net, h.rec).stats();
    let (root, leaf, r) = (h.root, h.leaf, h.rec);
    let non_keepalive = |net: &SimNetwork| -> u64 {
        [root, leaf]
            .iter()
            .map(|&a| net.total(Some(r), Some(a), None).messages - net.counter(r, a, "keepalive").messages)
            .sum()
    };
    let upstream = non_keepalive(&h.net);
    let s2 = subscribe(&mut h, 11, vec![www(true)]);
    let stub = add_stub(&mut h.net, 12, udp(2));
    h.net.link(stub, h.rec, HOP);
    h.net.run_until(secs(6));
    let id = stub_query(&mut h.net, stub, "www.example.", RecordType::A);
    h.net.run_until(secs(7));
    let after = rec(&h.net, h.rec).stats();
    assert_eq!(after.upstream_subscribes, stats.upstream_subscribes);
    assert_eq!(after.upstream_udp_queries, stats.upstream_udp_queries);
    assert_eq!(latest_addrs(&h.net, s2), vec![Ipv4Addr::new(192, 0, 2, 1)]);
    let resp = &h.net.node::<StubClient>(stub).unwrap().responses()[0];
    assert_eq!(resp.id, id);
    assert!(resp.msg.header.ra);
    assert_eq!(resp.received.since(resp.sent), 2 * HOP);
    // Only keepalives went upstream meanwhile.
    assert_eq!(non_keepalive(&h.net), upstream);
}

#[test]
fn referral_loop_is_servfail() {
    let mut net = net();
    let root = add_auth(
        &mut net,
        1,
        zone(".", &[
            ("@", "NS", 3600, "a.root."),
            ("a.root.", "A", 3600, "10.0.0.1"),
            ("loop.", "NS", 3600, "ns.loop."),
            ("ns.loop.", "A", 3600, "10.0.0.4"),
        ]),
        AuthConfig::default(),
        true,
    );
    // Claims the root too and delegates loop. back to itself.
    let liar = add_auth(
        &mut net,
        4,
        zone(".", &[
            ("@", "NS", 3600, "ns.loop."),
            ("loop.", "NS", 3600, "ns.loop."),
            ("ns.loop.", "A", 3600, "10.0.0.4"),
        ]),
        AuthConfig::default(),
        false,
    );
    let r = add_recursive(&mut net, 2, moqdns_core::recursive::RecursiveConfig::new(hints(&[1])));
    let stub = add_stub(&mut net, 9, udp(2));
    net.link(r, root, HOP);
    net.link(r, liar, HOP);
    net.link(stub, r, HOP);
    net.run_until(secs(1));
    stub_query(&mut net, stub, "www.loop.", RecordType::A);
    net.run_until(secs(20));
    let resp = net.node::<StubClient>(stub).unwrap().responses();
    assert_eq!(resp.len(), 1);
    assert_eq!(resp[0].msg.header.rcode, rcode::SERVFAIL);
    assert!(rec(&net, r).stats().servfails >= 1);
}

#[test]
fn udp_only_leaf_answer_matches_direct_query() {
    let mut h = udp_leaf(false);
    let via = add_stub(&mut h.net, 9, udp(2));
    let direct = add_stub(&mut h.net, 8, udp(3));
    h.net.link(via, h.rec, HOP);
    h.net.link(direct, h.leaf, HOP);
    h.net.run_until(secs(1));
    stub_query(&mut h.net, via, "www.example.", RecordType::A);
    let q = moqdns_core::track::TrackQuery::new(moqdns_core::dns::Name::parse("www.example.").unwrap(), RecordType::A, false);
    h.net.with_node::<StubClient, _>(direct, |s, io| s.query(q, io));
    h.net.run_until(secs(10));
    let a = &h.net.node::<StubClient>(via).unwrap().responses()[0].msg;
    let b = &h.net.node::<StubClient>(direct).unwrap().responses()[0].msg;
    assert_eq!(a.header.rcode, rcode::NOERROR);
    assert_eq!(a.answer_fingerprint(), b.answer_fingerprint());
}

#[test]
fn udp_only_leaf_declines_subscribe_without_polling() {
    let mut h = udp_leaf(false);
    let s = subscribe(&mut h, 10, vec![www(true)]);
    h.net.run_until(secs(10));
    assert!(declined(&h.net, s));
    // The joining fetch still delivers the answer.
    assert_eq!(latest_addrs(&h.net, s), vec![Ipv4Addr::new(192, 0, 2, 1)]);
    assert_eq!(rec(&h.net, h.rec).stats().downstream_declines, 1);
}

#[test]
fn polling_carries_changes_within_one_ttl() {
    let mut h = udp_leaf(true);
    let s = subscribe(&mut h, 10, vec![www(true)]);
    h.net.run_until(secs(10));
    assert!(!declined(&h.net, s));
    let leaf = h.leaf;
    h.net.schedule::<Authoritative>(secs(1000), leaf, |a, io| {
        a.apply_updates(&[set_a("www.example.", 300, [192, 0, 2, 77])], io).unwrap();
    });
    h.net.run_until(secs(2000));
    let sub = h.net.node::<Subscriber>(s).unwrap();
    let seen = sub
        .received()
        .iter()
        .find(|r| answer_addrs(&dns::decode_message(&r.payload).unwrap()) == vec![Ipv4Addr::new(192, 0, 2, 77)])
        .expect("change delivered");
    assert!(seen.at <= secs(1000) + Duration::from_secs(300) + 4 * HOP, "{:?}", seen.at);
    assert_eq!(rec(&h.net, h.rec).entry(&www(true)).unwrap().source, Source::Polled);
}

#[test]
fn poll_interval_respects_floor() {
    let mut net = net();
    let root = add_auth(&mut net, 1, zone(".", &[
        ("@", "NS", 3600, "a.root."),
        ("a.root.", "A", 3600, "10.0.0.1"),
        ("fast.", "A", 1, "192.0.2.9"),
    ]), AuthConfig::default(), false);
    let mut cfg = moqdns_core::recursive::RecursiveConfig::new(hints(&[1]));
    cfg.poll_fallback = true;
    let r = add_recursive(&mut net, 2, cfg);
    net.link(r, root, HOP);
    let s = add_subscriber(&mut net, 10, moqt(2), vec![track("fast.", RecordType::A, true)]);
    net.link(s, r, HOP);
    net.run_until(secs(5));
    let polls = rec(&net, r).stats().polls;
    net.run_until(secs(65));
    let delta = rec(&net, r).stats().polls - polls;
    assert!((11..=13).contains(&delta), "{delta} polls in 60 s");
}

#[test]
fn idle_subscriptions_are_torn_down() {
    let mut h = hierarchy(|c| {
        c.idle_timeout = Duration::from_secs(120);
    });
    let s = subscribe(&mut h, 10, vec![www(true)]);
    h.net.run_until(secs(5));
    assert!(rec(&h.net, h.rec).upstream_subscription_count() >= 2);
    h.net.with_node::<Subscriber, _>(s, |sub, io| sub.unsubscribe(&www(true), io));
    h.net.run_until(secs(60));
    assert_eq!(rec(&h.net, h.rec).downstream_subscription_count(), 0);
    assert!(rec(&h.net, h.rec).upstream_subscription_count() >= 1);
    h.net.run_until(secs(400));
    assert_eq!(rec(&h.net, h.rec).upstream_subscription_count(), 0);
    assert_eq!(h.net.node::<Authoritative>(h.leaf).unwrap().subscription_count(), 0);
    assert_eq!(rec(&h.net, h.rec).upstream_session_count(), 0);
}

#[test]
fn subscription_limit_evicts_least_recently_used() {
    let mut net = net();
    let leaf = add_auth(&mut net, 1, zone("example.", &[
        ("@", "NS", 3600, "ns.example."),
        ("ns", "A", 3600, "10.0.0.1"),
        ("a", "A", 300, "192.0.2.1"),
        ("b", "A", 300, "192.0.2.2"),
        ("c", "A", 300, "192.0.2.3"),
    ]), AuthConfig::default(), true);
    let mut cfg = moqdns_core::recursive::RecursiveConfig::new(hints(&[1]));
    cfg.max_subscriptions = 2;
    cfg.policy = SubscriptionPolicy::TerminalOnly;
    let r = add_recursive(&mut net, 2, cfg);
    let stub = add_stub(&mut net, 9, udp(2));
    net.link(r, leaf, HOP);
    net.link(stub, r, HOP);
    for (i, name) in ["a.example.", "b.example.", "c.example."].iter().enumerate() {
        net.run_until(secs(1 + 5 * i as u64));
        stub_query(&mut net, stub, name, RecordType::A);
    }
    net.run_until(secs(20));
    let rc = rec(&net, r);
    assert_eq!(rc.upstream_subscription_count(), 2);
    assert_eq!(rc.upstream_subscriptions_for(&track("a.example.", RecordType::A, false)), 0);
    assert_eq!(rc.upstream_subscriptions_for(&track("c.example.", RecordType::A, false)), 1);
    assert!(rc.stats().evictions >= 1);
    assert_eq!(net.node::<StubClient>(stub).unwrap().responses().len(), 3);
}

#[test]
fn classic_mode_declines_and_caches_by_ttl() {
    let mut h = hierarchy(|c| c.classic = true);
    let s = subscribe(&mut h, 10, vec![www(true)]);
    let stub = add_stub(&mut h.net, 12, udp(2));
    h.net.link(stub, h.rec, HOP);
    h.net.run_until(secs(1));
    stub_query(&mut h.net, stub, "www.example.", RecordType::A);
    h.net.run_until(secs(5));
    assert!(h.net.node::<Subscriber>(s).unwrap().control_log().iter().any(|(_, m)| matches!(m, ControlMessage::SubscribeError { .. })));
    assert_eq!(h.net.node::<Authoritative>(h.leaf).unwrap().subscription_count(), 0);
    let udp_before = rec(&h.net, h.rec).stats().upstream_udp_queries;
    stub_query(&mut h.net, stub, "www.example.", RecordType::A);
    h.net.run_until(secs(6));
    assert_eq!(rec(&h.net, h.rec).stats().upstream_udp_queries, udp_before);
    h.net.run_until(secs(310));
    stub_query(&mut h.net, stub, "www.example.", RecordType::A);
    h.net.run_until(secs(320));
    assert!(rec(&h.net, h.rec).stats().upstream_udp_queries > udp_before);
    assert_eq!(h.net.node::<StubClient>(stub).unwrap().responses().len(), 3);
}
