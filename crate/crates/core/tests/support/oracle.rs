//! Brute-force renderer oracle over randomly generated small policies.
//!
//! The generator keeps its own description of the policy and also prints
//! it as policy text, so the oracle never looks at a parsed `PolicySet`.

use std::collections::{BTreeMap, BTreeSet};

use edgeplane::intent::{parse_policy, render, render_delta, EgressPolicy, RecordChange};
use edgeplane::model::{
    EndpointId, GroupId, LabelPref, Locator, MappingRecord, NodeRegistration, NodeRole, RecordKey, SiteId,
    UnderlayAddr,
};
use rand::seq::SliceRandom;
use rand::Rng;

const LABELS: [&str; 4] = ["eth", "lte", "wifi", "sat"];
const HOPS: [&str; 3] = ["FW", "DPI", "Ghost"];

#[derive(Debug, Clone, PartialEq)]
pub enum Pref {
    Prio(u8),
    Weight(u8),
}

pub type Labels = Vec<(String, Pref)>;

#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub name: String,
    pub prefixes: Vec<(u32, u8)>,
    /// `battery < threshold`
    pub below: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Pair {
    pub egress: Labels,
    pub via: Vec<String>,
    pub ingress: Labels,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Policy {
    pub groups: Vec<Group>,
    pub egress: BTreeMap<String, Labels>,
    pub ingress: BTreeMap<String, Labels>,
    pub pairs: BTreeMap<(String, String), Pair>,
}

#[derive(Debug, Clone)]
pub struct Case {
    pub old: Policy,
    pub new: Policy,
    pub regs: Vec<NodeRegistration>,
}

fn labels_text(l: &Labels) -> String {
    l.iter()
        .map(|(name, p)| match p {
            Pref::Prio(x) => format!("{name} prio {x}"),
            Pref::Weight(w) => format!("{name} w {w}"),
        })
        .collect::<Vec<_>>()
        .join(", ")
}

impl Policy {
    pub fn text(&self) -> String {
        let mut s = String::new();
        for g in &self.groups {
            let members: Vec<String> = g
                .prefixes
                .iter()
                .map(|(a, l)| format!("{}/{l}", EndpointId(*a)))
                .collect();
            s += &format!("group {} {{ members: {}", g.name, members.join(", "));
            if let Some(t) = g.below {
                s += &format!("; where battery < {t}");
            }
            s += " }\n";
        }
        for (g, l) in &self.egress {
            s += &format!("default egress {g} {{ {} }}\n", labels_text(l));
        }
        for (g, l) in &self.ingress {
            s += &format!("default ingress {g} {{ {} }}\n", labels_text(l));
        }
        for ((a, b), p) in &self.pairs {
            let mut clauses = Vec::new();
            if !p.egress.is_empty() {
                clauses.push(format!("egress {}", labels_text(&p.egress)));
            }
            if !p.via.is_empty() {
                clauses.push(format!("via {}", p.via.join(", ")));
            }
            if !p.ingress.is_empty() {
                clauses.push(format!("ingress {}", labels_text(&p.ingress)));
            }
            s += &format!("pair {a} -> {b} {{ {} }}\n", clauses.join("; "));
        }
        s
    }
}

fn gen_labels(rng: &mut impl Rng) -> Labels {
    let n = rng.gen_range(1..=3);
    let mut names: Vec<&str> = LABELS.to_vec();
    names.shuffle(rng);
    let names = &names[..n];
    if rng.gen_bool(0.4) {
        // weighted head at priority 1, optional prioritized tail
        let head = rng.gen_range(1..=n);
        let mut left = 100u8;
        let mut out = Vec::new();
        for (i, name) in names[..head].iter().enumerate() {
            let w = if i + 1 == head { left } else { rng.gen_range(0..=left) };
            left -= w;
            out.push((name.to_string(), Pref::Weight(w)));
        }
        for name in &names[head..] {
            out.push((name.to_string(), Pref::Prio(rng.gen_range(2..=3))));
        }
        out
    } else {
        names.iter().map(|n| (n.to_string(), Pref::Prio(rng.gen_range(1..=3)))).collect()
    }
}

fn gen_policy(rng: &mut impl Rng, plain: usize, predicated: usize) -> Policy {
    let mut p = Policy::default();
    for i in 0..plain {
        p.groups.push(Group {
            name: format!("G{i}"),
            prefixes: vec![((10 << 24) | ((i as u32) << 16), 16)],
            below: None,
        });
    }
    for j in 0..predicated {
        let host = j % plain.max(1);
        let base = (10 << 24) | ((host as u32) << 16);
        let prefixes = if rng.gen_bool(0.5) { vec![(base, 16)] } else { vec![(base | 0x8000, 17)] };
        p.groups.push(Group {
            name: format!("P{j}"),
            prefixes,
            below: Some(f64::from(rng.gen_range(10..=60))),
        });
    }
    let names: Vec<String> = p.groups.iter().map(|g| g.name.clone()).collect();
    for g in &names {
        if rng.gen_bool(0.6) {
            p.egress.insert(g.clone(), gen_labels(rng));
        }
        if rng.gen_bool(0.6) {
            p.ingress.insert(g.clone(), gen_labels(rng));
        }
    }
    let pairs = if names.is_empty() { 0 } else { rng.gen_range(0..=3) };
    for _ in 0..pairs {
        let a = names.choose(rng).unwrap().clone();
        let b = names.choose(rng).unwrap().clone();
        let mut pair = Pair::default();
        while pair == Pair::default() {
            if rng.gen_bool(0.5) {
                pair.egress = gen_labels(rng);
            }
            if rng.gen_bool(0.4) {
                let n = rng.gen_range(1..=2);
                pair.via = (0..n).map(|_| HOPS.choose(rng).unwrap().to_string()).collect();
            }
            if rng.gen_bool(0.6) {
                pair.ingress = gen_labels(rng);
            }
        }
        p.pairs.insert((a, b), pair);
    }
    p
}

/// Small edit of `p`: reweight, drop or add defaults and pairs.
fn mutate(rng: &mut impl Rng, p: &Policy) -> Policy {
    let mut q = p.clone();
    let names: Vec<String> = q.groups.iter().map(|g| g.name.clone()).collect();
    if names.is_empty() {
        return q;
    }
    for _ in 0..rng.gen_range(0..=3) {
        let g = names.choose(rng).unwrap().clone();
        match rng.gen_range(0..6) {
            0 => {
                q.ingress.insert(g, gen_labels(rng));
            }
            1 => {
                q.ingress.remove(&g);
            }
            2 => {
                q.egress.insert(g, gen_labels(rng));
            }
            3 => {
                let b = names.choose(rng).unwrap().clone();
                q.pairs.insert(
                    (g, b),
                    Pair {
                        ingress: gen_labels(rng),
                        ..Pair::default()
                    },
                );
            }
            4 => {
                if let Some(k) = q.pairs.keys().next().cloned() {
                    q.pairs.remove(&k);
                }
            }
            _ => {
                if let Some(gr) = q.groups.iter_mut().find(|gr| gr.below.is_some()) {
                    gr.below = Some(f64::from(rng.gen_range(10..=60)));
                }
            }
        }
    }
    q
}

pub fn gen_case(rng: &mut impl Rng) -> Case {
    let plain = rng.gen_range(0..=4);
    let predicated = if plain == 0 { 0 } else { rng.gen_range(0..=(5 - plain).min(2)) };
    let old = gen_policy(rng, plain, predicated);
    let new = mutate(rng, &old);
    let mut regs = Vec::new();
    let n = rng.gen_range(0..=20);
    let mut used = BTreeSet::new();
    for i in 0..n {
        let infra = rng.gen_bool(0.1);
        let eid = if infra {
            EndpointId((192 << 24) | (168 << 16) | (i as u32 + 1))
        } else if plain == 0 || rng.gen_bool(0.1) {
            EndpointId((99 << 24) | (i as u32 + 1))
        } else {
            let g = rng.gen_range(0..plain) as u32;
            EndpointId((10 << 24) | (g << 16) | rng.gen_range(1..0xffff))
        };
        if !used.insert(eid) {
            continue;
        }
        let mut attributes = BTreeMap::new();
        let (role, locators) = if infra {
            attributes.insert("name".to_string(), HOPS[rng.gen_range(0..2)].to_string());
            let l = Locator::new(SiteId(0), UnderlayAddr(0x0b00_0000 + 16 * i as u32), "wan");
            (NodeRole::ReEncap, vec![l])
        } else {
            if rng.gen_bool(0.8) {
                attributes.insert("battery".to_string(), rng.gen_range(0..100).to_string());
            }
            let mut names: Vec<&str> = LABELS[..3].to_vec();
            names.shuffle(rng);
            let k = rng.gen_range(1..=3);
            let locs = names[..k]
                .iter()
                .enumerate()
                .map(|(j, l)| {
                    Locator::new(SiteId(rng.gen_range(0..3)), UnderlayAddr(0x0b00_0000 + 16 * i as u32 + j as u32), *l)
                        .with_priority(rng.gen_range(1..=3), rng.gen_range(1..=100))
                })
                .collect();
            (NodeRole::EndNode, locs)
        };
        regs.push(NodeRegistration {
            eid,
            group: GroupId::new("Unassigned").unwrap(),
            locators,
            attributes,
            role,
            device_id: i as u64,
            update_seq: 0,
        });
    }
    Case { old, new, regs }
}

// The oracle proper.

fn even(n: usize) -> Vec<u8> {
    // 100 split into n parts, the first 100 % n parts one larger
    (0..n).map(|i| (100 / n + usize::from(i < 100 % n)) as u8).collect()
}

fn normalize(l: &Labels) -> Vec<LabelPref> {
    let mut out: Vec<LabelPref> = l
        .iter()
        .map(|(name, p)| match p {
            Pref::Weight(w) => LabelPref::new(name.clone(), 1, *w),
            Pref::Prio(x) => LabelPref::new(name.clone(), *x, 0),
        })
        .collect();
    for level in 1..=3u8 {
        let idx: Vec<usize> = l
            .iter()
            .enumerate()
            .filter(|(_, (_, p))| *p == Pref::Prio(level))
            .map(|(i, _)| i)
            .collect();
        for (i, w) in idx.iter().zip(even(idx.len())) {
            out[*i].weight = w;
        }
    }
    out
}

fn battery(reg: &NodeRegistration) -> Option<f64> {
    reg.attributes.get("battery").and_then(|v| v.parse().ok())
}

fn covers(prefix: (u32, u8), eid: EndpointId) -> bool {
    let (a, len) = prefix;
    let mask = if len == 0 { 0 } else { u32::MAX << (32 - len as u32) };
    eid.0 & mask == a & mask
}

pub fn group_of<'a>(p: &'a Policy, reg: &NodeRegistration) -> Option<&'a Group> {
    let longest = |g: &Group| g.prefixes.iter().filter(|x| covers(**x, reg.eid)).map(|x| x.1).max();
    let mut best: Option<(u8, &Group)> = None;
    for g in p.groups.iter().filter(|g| g.below.is_some()) {
        if let (Some(len), Some(b)) = (longest(g), battery(reg)) {
            if b < g.below.unwrap() && best.is_none_or(|(l, _)| len > l) {
                best = Some((len, g));
            }
        }
    }
    if let Some((_, g)) = best {
        return Some(g);
    }
    p.groups
        .iter()
        .filter(|g| g.below.is_none())
        .filter_map(|g| longest(g).map(|l| (l, g)))
        .max_by_key(|(l, _)| *l)
        .map(|(_, g)| g)
}

#[derive(Debug, Default, PartialEq)]
pub struct OracleOut {
    pub records: BTreeMap<RecordKey, MappingRecord>,
    pub egress: BTreeMap<EndpointId, Vec<LabelPref>>,
    /// Keys whose rendering reported an error.
    pub error_keys: BTreeSet<RecordKey>,
}

fn apply(reg: &NodeRegistration, prefs: &[LabelPref]) -> Result<Vec<Locator>, ()> {
    if prefs.is_empty() {
        return Ok(reg.locators.clone());
    }
    let mut out = Vec::new();
    for p in prefs {
        let l = reg.locators.iter().find(|l| l.label == p.label).ok_or(())?;
        out.push(l.clone().with_priority(p.priority, p.weight));
    }
    let rest: Vec<&Locator> = reg
        .locators
        .iter()
        .filter(|l| prefs.iter().all(|p| p.label != l.label))
        .collect();
    let level = prefs.iter().map(|p| p.priority).max().unwrap() + 1;
    let ws = even(rest.len().max(1));
    for (i, l) in rest.into_iter().enumerate() {
        out.push(l.clone().with_priority(level, ws[i]));
    }
    Ok(out)
}

pub fn oracle(p: &Policy, regs: &[NodeRegistration]) -> OracleOut {
    let mut out = OracleOut::default();
    if p.groups.is_empty() {
        return out;
    }
    let mut hops: BTreeMap<&str, EndpointId> = BTreeMap::new();
    for r in regs.iter().filter(|r| r.role == NodeRole::ReEncap) {
        if let Some(n) = r.attributes.get("name") {
            hops.entry(n.as_str()).or_insert(r.eid);
        }
    }
    let none = Vec::new();
    for d in regs {
        let (g, group_name) = if d.role == NodeRole::EndNode {
            match group_of(p, d) {
                Some(g) => (Some(g), g.name.clone()),
                None => continue,
            }
        } else {
            (None, String::new())
        };
        let dflt = g.and_then(|g| p.ingress.get(&g.name)).map(normalize).unwrap_or_default();
        // every source: anyone, then each declared group
        let mut sources: Vec<Option<&Group>> = vec![None];
        sources.extend(p.groups.iter().map(Some));
        for s in sources {
            let (key, ingress, via, hint) = match (s, g) {
                (None, _) => (RecordKey::any(d.eid), dflt.clone(), &none, Vec::new()),
                (Some(s), Some(g)) => match p.pairs.get(&(s.name.clone(), g.name.clone())) {
                    Some(pair) => {
                        let ingress = if pair.ingress.is_empty() { dflt.clone() } else { normalize(&pair.ingress) };
                        let hint = if pair.egress.is_empty() {
                            p.egress.get(&s.name).map(normalize).unwrap_or_default()
                        } else {
                            normalize(&pair.egress)
                        };
                        (RecordKey::pair(GroupId::new(&s.name).unwrap(), d.eid), ingress, &pair.via, hint)
                    }
                    None => continue,
                },
                _ => continue,
            };
            let locs = apply(d, &ingress);
            let chain: Option<Vec<EndpointId>> = via.iter().map(|n| hops.get(n.as_str()).copied()).collect();
            let rec = match (locs, chain) {
                (Ok(locs), Some(chain)) => MappingRecord {
                    key: key.clone(),
                    ingress_locators: locs,
                    hop_chain: chain,
                    egress_hint: hint,
                    ttl_s: 60,
                    version: 1,
                    negative: false,
                },
                _ => {
                    out.error_keys.insert(key.clone());
                    MappingRecord::negative(key.clone(), 5, 1)
                }
            };
            out.records.insert(key, rec);
        }
        let eg = if d.role == NodeRole::EndNode {
            p.egress.get(&group_name).map(normalize).unwrap_or_default()
        } else {
            Vec::new()
        };
        let known: Vec<LabelPref> = eg.iter().filter(|l| d.locators.iter().any(|x| x.label == l.label)).cloned().collect();
        if known.len() != eg.len() {
            out.error_keys.insert(RecordKey::any(d.eid));
        }
        out.egress.insert(d.eid, known);
    }
    out
}

/// Expected delta: every key whose content differs, versions one past old.
pub fn oracle_delta(a: &OracleOut, b: &OracleOut) -> BTreeMap<RecordKey, RecordChange> {
    let mut out = BTreeMap::new();
    for k in a.records.keys().chain(b.records.keys()) {
        match (a.records.get(k), b.records.get(k)) {
            (Some(x), Some(y)) => {
                let mut y2 = y.clone();
                y2.version = x.version;
                if &y2 != x {
                    y2.version = x.version + 1;
                    out.insert(k.clone(), RecordChange::Upsert(y2));
                }
            }
            (None, Some(y)) => {
                out.insert(k.clone(), RecordChange::Upsert(y.clone()));
            }
            (Some(_), None) => {
                out.insert(k.clone(), RecordChange::Remove);
            }
            (None, None) => unreachable!(),
        }
    }
    out
}

/// Checks `render` and `render_delta` against the oracle for one case.
pub fn check_case(case: &Case) -> Result<(), String> {
    let old_text = case.old.text();
    let new_text = case.new.text();
    let old = parse_policy(&old_text).map_err(|e| format!("old policy rejected: {e}\n{old_text}"))?;
    let new = parse_policy(&new_text).map_err(|e| format!("new policy rejected: {e}\n{new_text}"))?;
    let want_old = oracle(&case.old, &case.regs);
    let want_new = oracle(&case.new, &case.regs);
    for (pol, text, want) in [(&old, &old_text, &want_old), (&new, &new_text, &want_new)] {
        let got = render(pol, &case.regs);
        if got.records != want.records {
            return Err(format!("records differ for\n{text}\ngot  {:?}\nwant {:?}", got.records, want.records));
        }
        let eg: BTreeMap<EndpointId, Vec<LabelPref>> =
            got.egress.iter().map(|(k, e): (&EndpointId, &EgressPolicy)| (*k, e.labels.clone())).collect();
        if eg != want.egress {
            return Err(format!("egress differs for\n{text}"));
        }
        let err_keys: BTreeSet<RecordKey> = got.errors.iter().map(|e| e.key().clone()).collect();
        if err_keys != want.error_keys {
            return Err(format!("error keys differ for\n{text}: {err_keys:?} vs {:?}", want.error_keys));
        }
    }
    let delta = render_delta(&old, &new, &case.regs);
    let want = oracle_delta(&want_old, &want_new);
    if delta.changes != want {
        return Err(format!(
            "delta differs\nold:\n{old_text}new:\n{new_text}got  {:?}\nwant {:?}",
            delta.changes.keys().collect::<Vec<_>>(),
            want.keys().collect::<Vec<_>>()
        ));
    }
    let same = render_delta(&new, &new, &case.regs);
    if !same.is_empty() {
        return Err("render_delta(p, p) is not empty".into());
    }
    Ok(())
}
