use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::{EgressPolicy, PolicySet};
use crate::model::{
    apply_label_list, EndpointId, GroupId, LabelPref, MappingRecord, NodeRegistration, NodeRole,
    RecordKey,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RenderOptions {
    pub positive_ttl_s: u32,
    pub negative_ttl_s: u32,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            positive_ttl_s: 60,
            negative_ttl_s: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RenderError {
    #[error("{key}: node has no interface labelled {label}")]
    UnknownLabel { key: RecordKey, label: String },
    #[error("{key}: no re-encapsulation node named {name}")]
    UnresolvedHop { key: RecordKey, name: String },
}

impl RenderError {
    pub fn key(&self) -> &RecordKey {
        match self {
            RenderError::UnknownLabel { key, .. } | RenderError::UnresolvedHop { key, .. } => key,
        }
    }
}

/// Names of registered re-encapsulation nodes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HopDirectory {
    by_name: BTreeMap<String, EndpointId>,
}

impl HopDirectory {
    pub fn from_regs<'a>(regs: impl IntoIterator<Item = &'a NodeRegistration>) -> Self {
        let mut by_name = BTreeMap::new();
        for r in regs {
            if r.role == NodeRole::ReEncap {
                if let Some(name) = r.hop_name() {
                    by_name.entry(name.to_string()).or_insert(r.eid);
                }
            }
        }
        Self { by_name }
    }

    pub fn insert(&mut self, name: impl Into<String>, eid: EndpointId) {
        self.by_name.insert(name.into(), eid);
    }

    pub fn resolve(&self, name: &str) -> Option<EndpointId> {
        self.by_name.get(name).copied()
    }
}

/// Everything rendered for a single destination node.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NodeRender {
    pub records: Vec<MappingRecord>,
    pub egress: Option<EgressPolicy>,
    pub errors: Vec<RenderError>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Rendered {
    pub records: BTreeMap<RecordKey, MappingRecord>,
    pub egress: BTreeMap<EndpointId, EgressPolicy>,
    pub errors: Vec<RenderError>,
}

#[allow(clippy::too_many_arguments)]
fn build_record(
    key: RecordKey,
    reg: &NodeRegistration,
    ingress: &[LabelPref],
    via: &[String],
    egress_hint: &[LabelPref],
    hops: &HopDirectory,
    opts: &RenderOptions,
    errors: &mut Vec<RenderError>,
) -> MappingRecord {
    let (locators, unknown) = apply_label_list(&reg.locators, ingress);
    let mut failed = false;
    for label in unknown {
        errors.push(RenderError::UnknownLabel {
            key: key.clone(),
            label,
        });
        failed = true;
    }
    let mut chain = Vec::with_capacity(via.len());
    for name in via {
        match hops.resolve(name) {
            Some(e) => chain.push(e),
            None => {
                errors.push(RenderError::UnresolvedHop {
                    key: key.clone(),
                    name: name.clone(),
                });
                failed = true;
            }
        }
    }
    if failed {
        return MappingRecord::negative(key, opts.negative_ttl_s, 1);
    }
    MappingRecord {
        key,
        ingress_locators: locators,
        hop_chain: chain,
        egress_hint: egress_hint.to_vec(),
        ttl_s: opts.positive_ttl_s,
        version: 1,
        negative: false,
    }
}

/// Renders the records keyed on `reg` as destination, plus its egress policy.
///
/// `group` is the node's resolved group (a reserved pool for infrastructure
/// nodes, which get their registered locators unchanged).
pub fn render_destination(
    policy: &PolicySet,
    reg: &NodeRegistration,
    group: &GroupId,
    hops: &HopDirectory,
    opts: &RenderOptions,
) -> NodeRender {
    let mut out = NodeRender::default();
    let default_ingress = policy.default_ingress(group).unwrap_or(&[]);
    out.records.push(build_record(
        RecordKey::any(reg.eid),
        reg,
        default_ingress,
        &[],
        &[],
        hops,
        opts,
        &mut out.errors,
    ));
    if !group.is_reserved() {
        for (src, _, pair) in policy.pairs().filter(|(_, dst, _)| *dst == group) {
            let ingress = if pair.ingress.is_empty() {
                default_ingress
            } else {
                &pair.ingress
            };
            let hint = if pair.egress.is_empty() {
                policy.default_egress(src).unwrap_or(&[])
            } else {
                &pair.egress
            };
            out.records.push(build_record(
                RecordKey::pair(src.clone(), reg.eid),
                reg,
                ingress,
                &pair.via,
                hint,
                hops,
                opts,
                &mut out.errors,
            ));
        }
    }
    let mut labels: Vec<LabelPref> = policy.default_egress(group).unwrap_or(&[]).to_vec();
    labels.retain(|p| {
        let known = reg.locators.iter().any(|l| l.label == p.label);
        if !known {
            out.errors.push(RenderError::UnknownLabel {
                key: RecordKey::any(reg.eid),
                label: p.label.clone(),
            });
        }
        known
    });
    out.egress = Some(EgressPolicy {
        owner: reg.eid,
        labels,
        version: 1,
    });
    out
}

/// Group used for rendering: reserved pools for infrastructure nodes, the
/// policy's membership for end-nodes.
pub fn render_group(policy: &PolicySet, reg: &NodeRegistration) -> Option<GroupId> {
    match reg.role {
        NodeRole::ReEncap => Some(GroupId::reencap_pool()),
        NodeRole::Proxy => Some(GroupId::proxy_pool()),
        NodeRole::EndNode => policy.group_of(reg).cloned(),
    }
}

pub fn render(policy: &PolicySet, regs: &[NodeRegistration]) -> Rendered {
    render_with(policy, regs, &RenderOptions::default())
}

pub fn render_with(policy: &PolicySet, regs: &[NodeRegistration], opts: &RenderOptions) -> Rendered {
    let mut out = Rendered::default();
    if policy.is_empty() {
        return out;
    }
    let hops = HopDirectory::from_regs(regs);
    for reg in regs {
        let Some(group) = render_group(policy, reg) else {
            continue;
        };
        let node = render_destination(policy, reg, &group, &hops, opts);
        for r in node.records {
            out.records.insert(r.key.clone(), r);
        }
        if let Some(e) = node.egress {
            out.egress.insert(e.owner, e);
        }
        out.errors.extend(node.errors);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RecordChange {
    Upsert(MappingRecord),
    Remove,
}

/// Records and egress policies that differ between two renderings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RenderDelta {
    pub changes: BTreeMap<RecordKey, RecordChange>,
    pub egress: BTreeMap<EndpointId, EgressPolicy>,
    pub errors: Vec<RenderError>,
}

impl RenderDelta {
    pub fn is_empty(&self) -> bool {
        self.changes.is_empty() && self.egress.is_empty()
    }

    pub fn keys(&self) -> BTreeSet<RecordKey> {
        self.changes.keys().cloned().collect()
    }

    /// Re-stamps upserts one past the version currently stored for each key.
    pub fn restamp(&mut self, mut stored_version: impl FnMut(&RecordKey) -> Option<u64>) {
        for (key, change) in self.changes.iter_mut() {
            if let RecordChange::Upsert(rec) = change {
                rec.version = stored_version(key).map_or(1, |v| v + 1);
            }
        }
    }
}

pub fn render_delta(old: &PolicySet, new: &PolicySet, regs: &[NodeRegistration]) -> RenderDelta {
    render_delta_with(old, new, regs, &RenderOptions::default())
}

fn diff_into(
    delta: &mut RenderDelta,
    old_records: BTreeMap<RecordKey, MappingRecord>,
    new_records: BTreeMap<RecordKey, MappingRecord>,
) {
    for (key, rec) in &new_records {
        match old_records.get(key) {
            Some(o) if o.same_content(rec) => {}
            Some(o) => {
                let mut rec = rec.clone();
                rec.version = o.version + 1;
                delta.changes.insert(key.clone(), RecordChange::Upsert(rec));
            }
            None => {
                delta.changes.insert(key.clone(), RecordChange::Upsert(rec.clone()));
            }
        }
    }
    for key in old_records.keys() {
        if !new_records.contains_key(key) {
            delta.changes.insert(key.clone(), RecordChange::Remove);
        }
    }
}

fn diff_egress(
    delta: &mut RenderDelta,
    old: &BTreeMap<EndpointId, EgressPolicy>,
    new: &BTreeMap<EndpointId, EgressPolicy>,
) {
    for (eid, e) in new {
        match old.get(eid) {
            Some(o) if o.labels == e.labels => {}
            Some(o) => {
                let mut e = e.clone();
                e.version = o.version + 1;
                delta.egress.insert(*eid, e);
            }
            None => {
                delta.egress.insert(*eid, e.clone());
            }
        }
    }
}

/// Destination groups whose records may differ when memberships are equal.
fn dirty_groups(old: &PolicySet, new: &PolicySet) -> BTreeSet<GroupId> {
    let mut dirty = BTreeSet::new();
    let changed = |a: Option<&[LabelPref]>, b: Option<&[LabelPref]>| a.unwrap_or(&[]) != b.unwrap_or(&[]);
    for g in old.groups() {
        if changed(old.default_ingress(&g.id), new.default_ingress(&g.id)) {
            dirty.insert(g.id.clone());
        }
    }
    for (a, b, p) in old.pairs() {
        if new.pair(a, b) != Some(p) || changed(old.default_egress(a), new.default_egress(a)) {
            dirty.insert(b.clone());
        }
    }
    for (a, b, p) in new.pairs() {
        if old.pair(a, b) != Some(p) || changed(old.default_egress(a), new.default_egress(a)) {
            dirty.insert(b.clone());
        }
    }
    dirty
}

/// Keys whose rendered record differs between `old` and `new`.
///
/// When group memberships are unchanged only the destinations in groups
/// touched by the change are rendered again; otherwise both sides are
/// rendered in full and compared.
pub fn render_delta_with(
    old: &PolicySet,
    new: &PolicySet,
    regs: &[NodeRegistration],
    opts: &RenderOptions,
) -> RenderDelta {
    let mut delta = RenderDelta::default();
    if old.groups() != new.groups() || old.is_empty() {
        let a = render_with(old, regs, opts);
        let b = render_with(new, regs, opts);
        diff_into(&mut delta, a.records, b.records);
        diff_egress(&mut delta, &a.egress, &b.egress);
        delta.errors = b.errors;
        return delta;
    }
    let dirty = dirty_groups(old, new);
    let egress_dirty: BTreeSet<GroupId> = new
        .groups()
        .iter()
        .filter(|g| old.default_egress(&g.id) != new.default_egress(&g.id))
        .map(|g| g.id.clone())
        .collect();
    if dirty.is_empty() && egress_dirty.is_empty() {
        return delta;
    }
    let hops = HopDirectory::from_regs(regs);
    let mut old_records = BTreeMap::new();
    let mut new_records = BTreeMap::new();
    let mut old_egress = BTreeMap::new();
    let mut new_egress = BTreeMap::new();
    for reg in regs {
        let Some(group) = render_group(new, reg) else {
            continue;
        };
        let records_dirty = dirty.contains(&group);
        if !records_dirty && !egress_dirty.contains(&group) {
            continue;
        }
        let a = render_destination(old, reg, &group, &hops, opts);
        let b = render_destination(new, reg, &group, &hops, opts);
        if records_dirty {
            old_records.extend(a.records.into_iter().map(|r| (r.key.clone(), r)));
            new_records.extend(b.records.into_iter().map(|r| (r.key.clone(), r)));
        }
        if let (Some(x), Some(y)) = (a.egress, b.egress) {
            old_egress.insert(x.owner, x);
            new_egress.insert(y.owner, y);
        }
        delta.errors.extend(b.errors);
    }
    diff_into(&mut delta, old_records, new_records);
    diff_egress(&mut delta, &old_egress, &new_egress);
    delta
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intent::parse_policy;
    use crate::model::{Locator, SiteId, SourceGroup, UnderlayAddr};

    const WESTCOAST: &str = include_str!("../../examples/westcoast.policy");

    fn node(eid: &str, labels: &[&str]) -> NodeRegistration {
        NodeRegistration {
            eid: eid.parse().unwrap(),
            group: GroupId::new("Unassigned").unwrap(),
            locators: labels
                .iter()
                .enumerate()
                .map(|(i, l)| Locator::new(SiteId(0), UnderlayAddr(100 + i as u32), *l))
                .collect(),
            attributes: BTreeMap::new(),
            role: NodeRole::EndNode,
            device_id: 0,
            update_seq: 0,
        }
    }

    fn firewall() -> NodeRegistration {
        let mut r = node("192.168.0.1", &["eth"]);
        r.role = NodeRole::ReEncap;
        r.group = GroupId::reencap_pool();
        r.attributes.insert("name".into(), "Firewall".into());
        r
    }

    fn example_regs() -> Vec<NodeRegistration> {
        vec![
            node("10.1.0.5", &["Ethernet", "LTE"]),
            node("10.2.0.1", &["Link-1", "Link-2", "Link-3"]),
            firewall(),
        ]
    }

    fn laptops() -> GroupId {
        GroupId::new("EmployeesLaptops").unwrap()
    }

    #[test]
    fn westcoast_example() {
        let policy = parse_policy(WESTCOAST).unwrap();
        let out = render(&policy, &example_regs());
        assert!(out.errors.is_empty(), "{:?}", out.errors);
        let office: EndpointId = "10.2.0.1".parse().unwrap();

        let any = &out.records[&RecordKey::any(office)];
        let top: Vec<(&str, u8, u8)> = any
            .ingress_locators
            .iter()
            .map(|l| (l.label.as_str(), l.priority, l.weight))
            .collect();
        assert_eq!(top, vec![("Link-1", 1, 50), ("Link-2", 1, 50), ("Link-3", 2, 100)]);
        assert!(any.hop_chain.is_empty());

        let pair = &out.records[&RecordKey::pair(laptops(), office)];
        assert_eq!(pair.ingress_locators[0].label, "Link-3");
        assert_eq!((pair.ingress_locators[0].priority, pair.ingress_locators[0].weight), (1, 100));
        assert_eq!(pair.hop_chain, vec!["192.168.0.1".parse().unwrap()]);
        assert_eq!(pair.egress_hint, vec![LabelPref::new("LTE", 1, 100)]);
        assert_eq!(pair.version, 1);

        let laptop: EndpointId = "10.1.0.5".parse().unwrap();
        assert_eq!(out.egress[&laptop].labels, vec![LabelPref::new("Ethernet", 1, 100)]);
    }

    #[test]
    fn empty_policy_renders_nothing() {
        let out = render(&PolicySet::default(), &example_regs());
        assert!(out.records.is_empty());
        assert!(out.egress.is_empty());
    }

    #[test]
    fn unknown_label_gives_negative_record() {
        let policy = parse_policy(WESTCOAST).unwrap();
        let mut regs = example_regs();
        regs[1] = node("10.2.0.1", &["Link-1", "Link-2"]);
        let out = render(&policy, &regs);
        let key = RecordKey::pair(laptops(), "10.2.0.1".parse().unwrap());
        assert!(out.records[&key].negative);
        assert_eq!(out.records[&key].ttl_s, 5);
        assert!(out
            .errors
            .iter()
            .any(|e| matches!(e, RenderError::UnknownLabel { label, .. } if label == "Link-3")));
        assert!(!out.records[&RecordKey::any("10.2.0.1".parse().unwrap())].negative);
    }

    #[test]
    fn unresolved_hop_gives_negative_record() {
        let policy = parse_policy(WESTCOAST).unwrap();
        let regs = &example_regs()[..2];
        let out = render(&policy, regs);
        let key = RecordKey::pair(laptops(), "10.2.0.1".parse().unwrap());
        assert!(out.records[&key].negative);
        assert!(matches!(&out.errors[0], RenderError::UnresolvedHop { name, .. } if name == "Firewall"));
    }

    #[test]
    fn delta_identity_is_empty() {
        let policy = parse_policy(WESTCOAST).unwrap();
        assert!(render_delta(&policy, &policy, &example_regs()).is_empty());
    }

    #[test]
    fn delta_reweight_touches_any_keys_only() {
        let old = parse_policy(WESTCOAST).unwrap();
        let new = parse_policy(&WESTCOAST.replace("Link-1 w 50, Link-2 w 50", "Link-1 w 70, Link-2 w 30")).unwrap();
        let mut regs = example_regs();
        regs.push(node("10.2.0.2", &["Link-1", "Link-2", "Link-3"]));
        let delta = render_delta(&old, &new, &regs);
        let keys: Vec<String> = delta.keys().iter().map(ToString::to_string).collect();
        assert_eq!(keys, vec!["(any, 10.2.0.1)", "(any, 10.2.0.2)"]);
        for change in delta.changes.values() {
            let RecordChange::Upsert(r) = change else { panic!() };
            assert_eq!(r.version, 2);
            assert_eq!(r.ingress_locators[0].weight, 70);
        }
    }

    #[test]
    fn restamp_uses_stored_versions() {
        let old = parse_policy(WESTCOAST).unwrap();
        let new = parse_policy(&WESTCOAST.replace("w 50, Link-2 w 50", "w 60, Link-2 w 40")).unwrap();
        let mut delta = render_delta(&old, &new, &example_regs());
        delta.restamp(|_| Some(7));
        for c in delta.changes.values() {
            let RecordChange::Upsert(r) = c else { panic!() };
            assert_eq!(r.version, 8);
            assert_eq!(r.key.src, SourceGroup::Any);
        }
    }
}
