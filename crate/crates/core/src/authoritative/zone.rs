use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dns::{self, rcode, DnsError, Message, Name, RData, RecordType, ResourceRecord, CLASS_IN};
use crate::track::TrackQuery;

/// Longest CNAME chain followed inside one zone.
pub const MAX_CNAME_CHAIN: usize = 8;

const SOA: u16 = 6;

#[derive(Debug, Error)]
pub enum ZoneError {
    #[error("zone document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("reading zone file: {0}")]
    Io(#[from] std::io::Error),
    #[error("record {index}: {source}")]
    Record { index: usize, source: DnsError },
    #[error("record {index}: unsupported class {class:?}")]
    Class { index: usize, class: String },
    #[error("{0} is outside the zone")]
    OutsideZone(Name),
    #[error("rdata of type {found} in a {expected} change")]
    TypeMismatch { expected: RecordType, found: RecordType },
    #[error("bad origin: {0}")]
    Origin(DnsError),
}

/// On-disk zone format.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZoneDocument {
    pub origin: String,
    pub records: Vec<RecordDocument>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordDocument {
    /// Absolute, relative to the origin, or `@`.
    pub name: String,
    #[serde(rename = "type")]
    pub rtype: String,
    pub ttl: u32,
    #[serde(default = "default_class")]
    pub class: String,
    /// Presentation-form rdata.
    pub data: String,
}

fn default_class() -> String {
    "IN".to_string()
}

/// One rrset-level edit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RrSetChange {
    pub name: Name,
    pub rtype: RecordType,
    pub ttl: u32,
    pub data: Vec<RData>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ZoneChange {
    /// Adds the listed records to the set.
    Add(RrSetChange),
    /// Removes the listed records, or the whole set if `data` is empty.
    Remove(RrSetChange),
    /// Replaces the set; an empty `data` deletes it.
    Replace(RrSetChange),
}

impl ZoneChange {
    fn target(&self) -> &RrSetChange {
        match self {
            ZoneChange::Add(c) | ZoneChange::Remove(c) | ZoneChange::Replace(c) => c,
        }
    }
}

/// Records of one (name, type), keyed by rdata wire bytes so iteration
/// order is canonical and duplicates collapse.
type RrSet = BTreeMap<Vec<u8>, (u32, RData)>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Zone {
    origin: Name,
    version: u64,
    rrsets: BTreeMap<(Name, u16), RrSet>,
    /// Owner names plus every ancestor up to the origin (empty
    /// non-terminals included).
    names: BTreeSet<Name>,
}

impl Zone {
    /// An empty zone at version 1.
    pub fn new(origin: Name) -> Self {
        Zone {
            origin: origin.canonical(),
            version: 1,
            rrsets: BTreeMap::new(),
            names: BTreeSet::new(),
        }
    }

    pub fn origin(&self) -> &Name {
        &self.origin
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn record_count(&self) -> usize {
        self.rrsets.values().map(BTreeMap::len).sum()
    }

    pub fn records(&self) -> impl Iterator<Item = ResourceRecord> + '_ {
        self.rrsets.iter().flat_map(|((name, _), set)| {
            set.values()
                .map(move |(ttl, data)| ResourceRecord::new(name.clone(), *ttl, data.clone()))
        })
    }

    pub fn rrset(&self, name: &Name, rtype: RecordType) -> Vec<ResourceRecord> {
        self.rrsets
            .get(&(name.canonical(), rtype.to_u16()))
            .map(|set| to_records(name, set))
            .unwrap_or_default()
    }

    /// Applies a batch of changes atomically. The version increases by one
    /// if any record set changed. Returns whether it did.
    pub fn apply(&mut self, changes: &[ZoneChange]) -> Result<bool, ZoneError> {
        for c in changes {
            let t = c.target();
            if !t.name.is_at_or_below(&self.origin) {
                return Err(ZoneError::OutsideZone(t.name.clone()));
            }
            if let Some(bad) = t.data.iter().find(|d| d.record_type() != t.rtype) {
                return Err(ZoneError::TypeMismatch {
                    expected: t.rtype,
                    found: bad.record_type(),
                });
            }
        }
        let before = self.rrsets.clone();
        for c in changes {
            let t = c.target();
            let key = (t.name.canonical(), t.rtype.to_u16());
            let wire = |d: &RData| d.to_wire().map_err(|source| ZoneError::Record { index: 0, source });
            match c {
                ZoneChange::Add(_) => {
                    let set = self.rrsets.entry(key).or_default();
                    for d in &t.data {
                        set.insert(wire(d)?, (t.ttl, d.clone()));
                    }
                }
                ZoneChange::Remove(_) => {
                    if t.data.is_empty() {
                        self.rrsets.remove(&key);
                    } else if let Some(set) = self.rrsets.get_mut(&key) {
                        for d in &t.data {
                            set.remove(&wire(d)?);
                        }
                    }
                }
                ZoneChange::Replace(_) => {
                    let mut set = RrSet::new();
                    for d in &t.data {
                        set.insert(wire(d)?, (t.ttl, d.clone()));
                    }
                    self.rrsets.insert(key, set);
                }
            }
        }
        self.rrsets.retain(|_, set| !set.is_empty());
        let changed = self.rrsets != before;
        if changed {
            self.version += 1;
            self.rebuild_names();
        }
        Ok(changed)
    }

    /// Replaces all records with those of `other`, as one version step if
    /// anything differs. The origin is kept.
    pub fn replace_records(&mut self, other: &Zone) -> bool {
        if self.rrsets == other.rrsets {
            return false;
        }
        self.rrsets = other.rrsets.clone();
        self.version += 1;
        self.rebuild_names();
        true
    }

    fn insert_record(&mut self, rr: &ResourceRecord) -> Result<(), DnsError> {
        let set = self
            .rrsets
            .entry((rr.name.canonical(), rr.rtype().to_u16()))
            .or_default();
        set.insert(rr.data.to_wire()?, (rr.ttl, rr.data.clone()));
        Ok(())
    }

    fn rebuild_names(&mut self) {
        self.names.clear();
        for (name, _) in self.rrsets.keys() {
            let mut n = name.clone();
            while self.names.insert(n.clone()) && n != self.origin {
                match n.parent() {
                    Some(p) => n = p,
                    None => break,
                }
            }
        }
    }

    fn has(&self, name: &Name, rtype: u16) -> bool {
        self.rrsets.contains_key(&(name.clone(), rtype))
    }

    fn set(&self, name: &Name, rtype: u16) -> Option<&RrSet> {
        self.rrsets.get(&(name.clone(), rtype))
    }

    /// The closest delegation point at or above `name`, strictly below the
    /// origin.
    fn delegation_for(&self, name: &Name) -> Option<Name> {
        let depth = self.origin.labels().len();
        let labels = name.labels();
        (depth + 1..=labels.len())
            .map(|n| Name::from_labels(&labels[labels.len() - n..]).expect("labels valid"))
            .find(|cut| self.has(cut, RecordType::Ns.to_u16()))
    }
}

fn to_records(owner: &Name, set: &RrSet) -> Vec<ResourceRecord> {
    set.values()
        .map(|(ttl, data)| ResourceRecord::new(owner.clone(), *ttl, data.clone()))
        .collect()
}

pub fn load_zone(doc: &ZoneDocument) -> Result<Zone, ZoneError> {
    let origin = Name::parse(&doc.origin).map_err(ZoneError::Origin)?.canonical();
    let mut zone = Zone::new(origin.clone());
    for (index, r) in doc.records.iter().enumerate() {
        let rec_err = |source| ZoneError::Record { index, source };
        if !r.class.eq_ignore_ascii_case("IN") && r.class != CLASS_IN.to_string() {
            return Err(ZoneError::Class {
                index,
                class: r.class.clone(),
            });
        }
        let name = dns::resolve_name(&r.name, &origin).map_err(rec_err)?;
        if !name.is_at_or_below(&origin) {
            return Err(ZoneError::OutsideZone(name));
        }
        let rtype = RecordType::parse(&r.rtype).map_err(rec_err)?;
        let data = RData::parse(rtype, &r.data, &origin).map_err(rec_err)?;
        zone.insert_record(&ResourceRecord::new(name, r.ttl, data))
            .map_err(rec_err)?;
    }
    zone.rebuild_names();
    Ok(zone)
}

pub fn load_zone_str(json: &str) -> Result<Zone, ZoneError> {
    load_zone(&serde_json::from_str(json)?)
}

pub fn load_zone_file(path: &Path) -> Result<Zone, ZoneError> {
    load_zone_str(&std::fs::read_to_string(path)?)
}

/// Serialises a zone back into its document form.
pub fn zone_document(zone: &Zone) -> ZoneDocument {
    ZoneDocument {
        origin: zone.origin.to_string(),
        records: zone
            .records()
            .map(|rr| RecordDocument {
                name: rr.name.to_string(),
                rtype: rr.rtype().to_string(),
                ttl: rr.ttl,
                class: default_class(),
                data: rr.data.to_string(),
            })
            .collect(),
    }
}

/// The authoritative response to `query`. The header id is 0 and the
/// question section is the query's, with the name lowercased.
pub fn answer_question(zone: &Zone, query: &TrackQuery) -> Message {
    let qname = query.qname.canonical();
    let mut resp = Message::response_to(&TrackQuery {
        qname: qname.clone(),
        ..query.clone()
    }
    .to_message(0));

    if query.opcode != 0 {
        resp.header.rcode = rcode::NOTIMP;
        return resp;
    }
    if query.qclass != CLASS_IN || !qname.is_at_or_below(&zone.origin) {
        resp.header.rcode = rcode::REFUSED;
        return resp;
    }
    if let Some(cut) = zone.delegation_for(&qname) {
        referral(zone, &cut, &mut resp);
        return resp;
    }

    resp.header.aa = true;
    let mut name = qname;
    let mut visited = BTreeSet::new();
    loop {
        if let Some(set) = zone.set(&name, query.qtype) {
            resp.answers.extend(to_records(&name, set));
            break;
        }
        let cname = (query.qtype != RecordType::Cname.to_u16())
            .then(|| zone.set(&name, RecordType::Cname.to_u16()))
            .flatten();
        let Some(cname) = cname else {
            if !zone.names.contains(&name) {
                resp.header.rcode = rcode::NXDOMAIN;
            }
            negative_authority(zone, &mut resp);
            break;
        };
        let records = to_records(&name, cname);
        let target = match &records[0].data {
            RData::Cname(t) => t.canonical(),
            _ => unreachable!("CNAME set holds CNAME rdata"),
        };
        resp.answers.extend(records);
        visited.insert(name.clone());
        // Out-of-zone or delegated targets are left to the resolver.
        if !target.is_at_or_below(&zone.origin)
            || zone.delegation_for(&target).is_some()
            || visited.contains(&target)
            || visited.len() >= MAX_CNAME_CHAIN
        {
            break;
        }
        name = target;
    }
    resp
}

fn referral(zone: &Zone, cut: &Name, resp: &mut Message) {
    let ns = zone.set(cut, RecordType::Ns.to_u16()).expect("cut has NS");
    resp.authority = to_records(cut, ns);
    for rr in &resp.authority {
        let RData::Ns(target) = &rr.data else { continue };
        let target = target.canonical();
        if !target.is_at_or_below(&zone.origin) {
            continue;
        }
        for t in [RecordType::A, RecordType::Aaaa] {
            if let Some(set) = zone.set(&target, t.to_u16()) {
                resp.additional.extend(to_records(&target, set));
            }
        }
    }
}

fn negative_authority(zone: &Zone, resp: &mut Message) {
    if let Some(soa) = zone.set(&zone.origin, SOA) {
        resp.authority = to_records(&zone.origin, soa);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DOC: &str = r#"{
        "origin": "example.com.",
        "records": [
            {"name": "@", "type": "NS", "ttl": 3600, "data": "ns1"},
            {"name": "ns1", "type": "A", "ttl": 3600, "data": "192.0.2.53"},
            {"name": "www", "type": "A", "ttl": 300, "data": "192.0.2.1"},
            {"name": "www", "type": "A", "ttl": 300, "data": "192.0.2.2"},
            {"name": "www.example.com.", "type": "A", "ttl": 300, "class": "IN", "data": "192.0.2.1"},
            {"name": "alias", "type": "CNAME", "ttl": 60, "data": "www"},
            {"name": "ext", "type": "CNAME", "ttl": 60, "data": "www.example.net."},
            {"name": "a.b.deep", "type": "TXT", "ttl": 60, "data": "\"x\""},
            {"name": "sub", "type": "NS", "ttl": 3600, "data": "ns.sub"},
            {"name": "ns.sub", "type": "A", "ttl": 3600, "data": "192.0.2.99"}
        ]
    }"#;

    fn zone() -> Zone {
        load_zone_str(DOC).unwrap()
    }

    fn ask(z: &Zone, name: &str, t: RecordType) -> Message {
        answer_question(z, &TrackQuery::new(Name::parse(name).unwrap(), t, true))
    }

    #[test]
    fn load_collapses_duplicates() {
        let z = zone();
        assert_eq!(z.version(), 1);
        assert_eq!(z.record_count(), 9);
        let round = load_zone(&zone_document(&z)).unwrap();
        assert_eq!(round.records().collect::<Vec<_>>(), z.records().collect::<Vec<_>>());
    }

    #[test]
    fn load_rejects_out_of_zone() {
        let doc = r#"{"origin":"example.com.","records":[{"name":"other.org.","type":"A","ttl":1,"data":"1.2.3.4"}]}"#;
        assert!(matches!(load_zone_str(doc), Err(ZoneError::OutsideZone(_))));
        let doc = r#"{"origin":"example.com.","records":[{"name":"x","type":"A","ttl":1,"data":"1.2.3"}]}"#;
        assert!(matches!(load_zone_str(doc), Err(ZoneError::Record { index: 0, .. })));
    }

    #[test]
    fn exact_answer() {
        let m = ask(&zone(), "WWW.example.com.", RecordType::A);
        assert!(m.header.aa && m.header.qr);
        assert_eq!(m.header.rcode, rcode::NOERROR);
        assert_eq!(m.answers.len(), 2);
        assert_eq!(m.questions[0].qname.to_string(), "www.example.com.");
        assert_eq!(m.answers[0].data, RData::A([192, 0, 2, 1].into()));
    }

    #[test]
    fn cname_chase() {
        let m = ask(&zone(), "alias.example.com.", RecordType::A);
        assert_eq!(m.answers.len(), 3);
        assert_eq!(m.answers[0].rtype(), RecordType::Cname);
        let m = ask(&zone(), "ext.example.com.", RecordType::A);
        assert_eq!(m.answers.len(), 1);
        assert_eq!(m.header.rcode, rcode::NOERROR);
        // Asking for the CNAME itself does not chase.
        let m = ask(&zone(), "alias.example.com.", RecordType::Cname);
        assert_eq!(m.answers.len(), 1);
    }

    #[test]
    fn referral_shape() {
        let m = ask(&zone(), "host.sub.example.com.", RecordType::A);
        assert!(!m.header.aa);
        assert!(m.answers.is_empty());
        assert_eq!(m.authority.len(), 1);
        assert_eq!(m.additional.len(), 1);
        assert!(m.is_referral());
    }

    #[test]
    fn negative_answers() {
        let z = zone();
        assert_eq!(ask(&z, "nope.example.com.", RecordType::A).header.rcode, rcode::NXDOMAIN);
        let nodata = ask(&z, "www.example.com.", RecordType::Aaaa);
        assert_eq!(nodata.header.rcode, rcode::NOERROR);
        assert!(nodata.answers.is_empty());
        // Empty non-terminal.
        assert_eq!(ask(&z, "b.deep.example.com.", RecordType::A).header.rcode, rcode::NOERROR);
        assert_eq!(ask(&z, "example.org.", RecordType::A).header.rcode, rcode::REFUSED);
    }

    #[test]
    fn updates_bump_once_per_batch() {
        let mut z = zone();
        let www = Name::parse("www.example.com.").unwrap();
        let set = |d: &[[u8; 4]]| RrSetChange {
            name: www.clone(),
            rtype: RecordType::A,
            ttl: 300,
            data: d.iter().map(|a| RData::A((*a).into())).collect(),
        };
        assert!(!z.apply(&[ZoneChange::Replace(set(&[[192, 0, 2, 2], [192, 0, 2, 1]]))]).unwrap());
        assert_eq!(z.version(), 1);
        assert!(z
            .apply(&[
                ZoneChange::Replace(set(&[[10, 0, 0, 1]])),
                ZoneChange::Add(set(&[[10, 0, 0, 2]])),
            ])
            .unwrap());
        assert_eq!(z.version(), 2);
        assert_eq!(z.rrset(&www, RecordType::A).len(), 2);
        assert!(z.apply(&[ZoneChange::Remove(set(&[]))]).unwrap());
        assert_eq!(z.version(), 3);
        assert_eq!(ask(&z, "www.example.com.", RecordType::A).answers.len(), 0);
        let outside = RrSetChange {
            name: Name::parse("x.org.").unwrap(),
            ..set(&[])
        };
        assert!(z.apply(&[ZoneChange::Add(outside)]).is_err());
        assert_eq!(z.version(), 3);
    }
}
