use serde_json::{json, Value};

use moqdns_core::harness::{compare_modes, run_scenario, MetricsReport, Mode, Scenario};

fn auth_node() -> Value {
    json!({
        "name": "auth",
        "role": "authoritative",
        "zone": {
            "origin": "example.",
            "records": [
                {"name": "@", "type": "NS", "ttl": 3600, "class": "IN", "data": "ns.example."},
                {"name": "ns", "type": "A", "ttl": 3600, "class": "IN", "data": "10.0.0.1"},
                {"name": "www", "type": "A", "ttl": 300, "class": "IN", "data": "192.0.2.1"}
            ]
        }
    })
}

/// client -> forwarder -> recursive -> auth, 50 ms per MoQT hop.
fn chain(ttl: u32, changes: Value, duration: u64, query_every: u64) -> Scenario {
    let doc = json!({
        "name": "chain",
        "seed": 11,
        "duration_secs": duration,
        "settle_secs": 2 * ttl,
        "nodes": [
            auth_node(),
            {"name": "rec", "role": "recursive", "root_hints": ["auth"]},
            {"name": "fwd", "role": "forwarder", "upstream": "rec"},
            {"name": "client", "role": "client", "target": "fwd"}
        ],
        "links": [
            {"a": "client", "b": "fwd", "delay_ms": 0},
            {"a": "fwd", "b": "rec", "delay_ms": 50},
            {"a": "rec", "b": "auth", "delay_ms": 50}
        ],
        "workload": {
            "records": [{"server": "auth", "name": "www.example.", "ttl": ttl, "changes": changes}],
            "queries": [{"client": "client", "start_secs": 1, "interval_secs": query_every}]
        }
    });
    Scenario::from_json(&doc.to_string()).expect("scenario parses")
}

/// `n` subscribers directly on one recursive.
fn fanout(n: usize, changes: usize) -> Scenario {
    let mut nodes = vec![auth_node(), json!({"name": "rec", "role": "recursive", "root_hints": ["auth"]})];
    let mut links = vec![json!({"a": "rec", "b": "auth", "delay_ms": 50})];
    for i in 0..n {
        let name = format!("sub{i}");
        nodes.push(json!({"name": name, "role": "subscriber", "target": "rec", "start_secs": 1 + i}));
        links.push(json!({"a": name, "b": "rec", "delay_ms": 20}));
    }
    let doc = json!({
        "name": format!("fanout-{n}"),
        "seed": 3,
        "duration_secs": 3000,
        "settle_secs": 60,
        "nodes": nodes,
        "links": links,
        "workload": {"records": [{"server": "auth", "name": "www.example.", "ttl": 300, "changes": {"count": changes}}]}
    });
    Scenario::from_json(&doc.to_string()).expect("scenario parses")
}

fn link(r: &MetricsReport, from: &str, to: &str, kind: &str) -> u64 {
    r.links
        .iter()
        .filter(|l| l.from == from && l.to == to && l.kind == kind)
        .map(|l| l.messages)
        .sum()
}

#[test]
fn equal_seeds_give_identical_files() {
    let s = chain(300, json!({"cluster": 300}), 3000, 10);
    for mode in [Mode::PubSub, Mode::BaselineUdp] {
        let a = run_scenario(&s.clone().with_mode(mode)).unwrap().files().unwrap();
        let b = run_scenario(&s.clone().with_mode(mode)).unwrap().files().unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn different_seeds_draw_different_workloads() {
    let mut s = chain(300, json!({"cluster": 300}), 3000, 10);
    let a = run_scenario(&s).unwrap();
    s.seed += 1;
    let b = run_scenario(&s).unwrap();
    assert_ne!(a.staleness_csv().unwrap(), b.staleness_csv().unwrap());
}

#[test]
fn pubsub_forwarder_staleness_is_two_hops() {
    let s = chain(300, json!({"at_secs": [1000]}), 2000, 10);
    let r = run_scenario(&s).unwrap();
    assert_eq!(r.changes, 1);
    assert_eq!(r.tier("rec").unwrap().staleness.max_ms, Some(50));
    assert_eq!(r.tier("fwd").unwrap().staleness.max_ms, Some(100));
}

#[test]
fn baseline_staleness_follows_the_refresh_schedule() {
    let s = chain(300, json!({"at_secs": [1000]}), 2000, 10).with_mode(Mode::BaselineUdp);
    let r = run_scenario(&s).unwrap();
    let rec = r.tier("rec").unwrap().staleness.max_ms.unwrap();
    let fwd = r.tier("fwd").unwrap().staleness.max_ms.unwrap();
    assert!(rec > 0 && rec <= 300_000, "{rec}");
    assert!(fwd >= rec && fwd <= 600_000, "{fwd}");
}

#[test]
fn zero_changes_publish_nothing_after_the_initial_fetches() {
    let short = run_scenario(&chain(300, json!("none"), 100, 10)).unwrap();
    let long = run_scenario(&chain(300, json!("none"), 6000, 10)).unwrap();
    assert_eq!(long.changes, 0);
    assert_eq!(long.staleness.samples, 0);
    assert_eq!(long.totals.update_objects, short.totals.update_objects);
    assert_eq!(link(&long, "auth", "rec", "object"), 1);
    assert_eq!(link(&long, "rec", "fwd", "object"), 1);

    let c = compare_modes(&chain(300, json!("none"), 6000, 10)).unwrap();
    assert_eq!(c.pubsub.update_objects, long.totals.update_objects);
    assert_eq!(c.baseline.update_objects, 0);
    assert!(c.baseline.upstream_queries > c.pubsub.upstream_queries);
}

#[test]
fn one_change_counting_example() {
    let c = compare_modes(&chain(60, json!({"at_secs": [1800]}), 3600, 10)).unwrap();
    // Each of the two caches refreshes on demand once its copy expires.
    assert!(c.baseline.upstream_queries >= 60, "{}", c.baseline.upstream_queries);
    let baseline = &c.baseline_report;
    assert_eq!(
        c.baseline.upstream_queries,
        link(baseline, "rec", "auth", "udp") + link(baseline, "fwd", "rec", "udp")
    );
    let pubsub = &c.pubsub_report;
    // One joining fetch and one push.
    assert_eq!(link(pubsub, "auth", "rec", "object"), 2);
    assert_eq!(link(pubsub, "rec", "auth", "fetch"), 1);
    assert_eq!(link(pubsub, "rec", "auth", "subscribe"), 1);
    assert!(c.table().contains("pubsub"));
}

#[test]
fn ten_subscribers_cost_upstream_what_one_does() {
    let one = run_scenario(&fanout(1, 5)).unwrap();
    let ten = run_scenario(&fanout(10, 5)).unwrap();
    assert_eq!(ten.totals.upstream_queries, one.totals.upstream_queries);
    assert_eq!(link(&ten, "auth", "rec", "object"), link(&one, "auth", "rec", "object"));
    assert_eq!(link(&one, "auth", "rec", "object"), 6);
    // Conservation: every upstream object reaches every subscriber once.
    for i in 0..10 {
        assert_eq!(link(&ten, "rec", &format!("sub{i}"), "object"), 6);
    }
}

#[test]
fn report_files_have_headers_and_percentiles() {
    let r = run_scenario(&chain(300, json!({"count": 5}), 3000, 10)).unwrap();
    let files = r.files().unwrap();
    let names: Vec<&str> = files.iter().map(|(n, _)| *n).collect();
    assert_eq!(names, ["report.json", "staleness.csv", "lookups.csv", "links.csv", "subscriptions.csv"]);
    let json: Value = serde_json::from_str(&files[0].1).unwrap();
    for k in ["p50_ms", "p90_ms", "p99_ms"] {
        assert!(json["staleness"][k].is_u64(), "{k}");
    }
    assert!(files[1].1.starts_with("record,change,node,changed_at_ms,observed_at_ms,staleness_ms\n"));
    let dir = tempfile::tempdir().unwrap();
    r.write_to(dir.path()).unwrap();
    assert_eq!(std::fs::read_to_string(dir.path().join("report.json")).unwrap(), files[0].1);
}

#[test]
fn invalid_references_are_rejected() {
    let doc = json!({
        "duration_secs": 10,
        "nodes": [{"name": "fwd", "role": "forwarder", "upstream": "nowhere"}]
    });
    let s = Scenario::from_json(&doc.to_string());
    assert!(s.is_err() || run_scenario(&s.unwrap()).is_err());
}
