//! Topology builders shared by the integration tests.
#![allow(dead_code)]

pub mod strategies;

use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::time::Duration;

use moqdns_core::authoritative::{load_zone, AuthConfig, Authoritative, RecordDocument, RrSetChange, Zone, ZoneChange, ZoneDocument};
use moqdns_core::dns::{Name, RData, RecordType};
use moqdns_core::forwarder::{Forwarder, ForwarderConfig, ResumeStore};
use moqdns_core::harness::{StubClient, Subscriber};
use moqdns_core::recursive::{Recursive, RecursiveConfig, RootHint};
use moqdns_core::track::{TrackKey, TrackQuery};
use moqdns_core::transport::sim::{NodeSpec, SimConfig, SimNetwork};
use moqdns_core::Time;

pub const HOP: Duration = Duration::from_millis(50);

pub fn ip(n: u8) -> IpAddr {
    IpAddr::V4(Ipv4Addr::new(10, 0, 0, n))
}

pub fn secs(s: u64) -> Time {
    Time::from_secs(s)
}

pub fn ms(v: u64) -> Time {
    Time::from_millis(v)
}

pub fn zone(origin: &str, records: &[(&str, &str, u32, &str)]) -> Zone {
    load_zone(&ZoneDocument {
        origin: origin.to_string(),
        records: records
            .iter()
            .map(|(name, rtype, ttl, data)| RecordDocument {
                name: name.to_string(),
                rtype: rtype.to_string(),
                ttl: *ttl,
                class: "IN".to_string(),
                data: data.to_string(),
            })
            .collect(),
    })
    .expect("test zone loads")
}

/// `example.` with `www` at 192.0.2.1, TTL 300.
pub fn example_zone() -> Zone {
    zone("example.", &[
        ("@", "NS", 3600, "ns.example."),
        ("ns", "A", 3600, "10.0.0.3"),
        ("www", "A", 300, "192.0.2.1"),
        ("alias", "CNAME", 300, "www"),
    ])
}

/// Root zone delegating `example.` to 10.0.0.3.
pub fn root_zone() -> Zone {
    zone(".", &[
        ("@", "NS", 3600, "a.root."),
        ("a.root.", "A", 3600, "10.0.0.1"),
        ("example.", "NS", 3600, "ns.example."),
        ("ns.example.", "A", 3600, "10.0.0.3"),
    ])
}

pub fn track(name: &str, rtype: RecordType, rd: bool) -> TrackKey {
    TrackQuery::new(Name::parse(name).unwrap(), rtype, rd).track_key().unwrap()
}

pub fn www(rd: bool) -> TrackKey {
    track("www.example.", RecordType::A, rd)
}

pub fn set_a(name: &str, ttl: u32, addr: [u8; 4]) -> ZoneChange {
    ZoneChange::Replace(RrSetChange {
        name: Name::parse(name).unwrap(),
        rtype: RecordType::A,
        ttl,
        data: vec![RData::A(Ipv4Addr::from(addr))],
    })
}

pub fn moqt(n: u8) -> SocketAddr {
    SocketAddr::new(ip(n), 853)
}

pub fn udp(n: u8) -> SocketAddr {
    SocketAddr::new(ip(n), 53)
}

pub fn net() -> SimNetwork {
    SimNetwork::new(SimConfig::default())
}

pub fn add_auth(net: &mut SimNetwork, n: u8, zone: Zone, cfg: AuthConfig, moqt: bool) -> usize {
    let spec = NodeSpec::client(format!("auth{n}"), ip(n)).with_udp();
    let spec = if moqt { spec.with_moqt() } else { spec };
    net.add_node(spec, Box::new(Authoritative::new(zone, cfg)))
}

pub fn add_recursive(net: &mut SimNetwork, n: u8, cfg: RecursiveConfig) -> usize {
    let spec = NodeSpec::client(format!("rec{n}"), ip(n)).with_moqt().with_udp();
    net.add_node(spec, Box::new(Recursive::new(cfg)))
}

pub fn hints(servers: &[u8]) -> Vec<RootHint> {
    servers
        .iter()
        .map(|n| RootHint {
            name: format!("auth{n}"),
            address: ip(*n),
            capability: None,
        })
        .collect()
}

pub fn add_forwarder(net: &mut SimNetwork, n: u8, cfg: ForwarderConfig, store: ResumeStore) -> usize {
    let spec = NodeSpec::client(format!("fwd{n}"), ip(n)).with_udp();
    net.add_node(spec, Box::new(Forwarder::new(cfg, store)))
}

pub fn add_subscriber(net: &mut SimNetwork, n: u8, target: SocketAddr, tracks: Vec<TrackKey>) -> usize {
    net.add_node(NodeSpec::client(format!("sub{n}"), ip(n)), Box::new(Subscriber::new(target, tracks)))
}

pub fn add_stub(net: &mut SimNetwork, n: u8, target: SocketAddr) -> usize {
    net.add_node(NodeSpec::client(format!("stub{n}"), ip(n)), Box::new(StubClient::new(target, Vec::new())))
}

/// Root (1), recursive (2) and `example.` (3) servers, all linked with
/// 50 ms one-way delay.
pub struct Hierarchy {
    pub net: SimNetwork,
    pub root: usize,
    pub rec: usize,
    pub leaf: usize,
}

pub fn hierarchy(cfg: impl FnOnce(&mut RecursiveConfig)) -> Hierarchy {
    let mut net = net();
    let root = add_auth(&mut net, 1, root_zone(), AuthConfig::default(), true);
    let mut rc = RecursiveConfig::new(hints(&[1]));
    cfg(&mut rc);
    let rec = add_recursive(&mut net, 2, rc);
    let leaf = add_auth(&mut net, 3, example_zone(), AuthConfig::default(), true);
    net.link(rec, root, HOP);
    net.link(rec, leaf, HOP);
    Hierarchy { net, root, rec, leaf }
}

/// Like [`hierarchy`] but `example.` is served over UDP only.
pub fn udp_leaf(poll_fallback: bool) -> Hierarchy {
    let mut net = net();
    let root = add_auth(&mut net, 1, root_zone(), AuthConfig::default(), true);
    let mut cfg = RecursiveConfig::new(hints(&[1]));
    cfg.poll_fallback = poll_fallback;
    let rec = add_recursive(&mut net, 2, cfg);
    let leaf = add_auth(&mut net, 3, example_zone(), AuthConfig::default(), false);
    net.link(rec, root, HOP);
    net.link(rec, leaf, HOP);
    Hierarchy { net, root, rec, leaf }
}

pub fn stub_query(net: &mut SimNetwork, stub: usize, name: &str, rtype: RecordType) -> u16 {
    let q = TrackQuery::new(Name::parse(name).unwrap(), rtype, true);
    net.with_node::<StubClient, _>(stub, |s, io| s.query(q, io))
}

pub fn answer_addrs(msg: &moqdns_core::dns::Message) -> Vec<Ipv4Addr> {
    msg.answers
        .iter()
        .filter_map(|r| match r.data {
            RData::A(a) => Some(a),
            _ => None,
        })
        .collect()
}
