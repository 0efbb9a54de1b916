//! Synthetic NIB population: `groups` prefix groups of equal size, each
//! member with an Ethernet and an LTE locator.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::intent::{parse_policy, render_destination, HopDirectory, PolicySet, RenderOptions};
use crate::model::{EidPrefix, EndpointId, GroupId, Locator, MappingRecord, NodeRegistration, NodeRole, SiteId, UnderlayAddr};
use crate::nib::{PartitionId, PartitionMap};

/// Group of the measurement probe; outside every generated block.
pub const PROBE_GROUP: &str = "Probe";
pub const PROBE_PREFIX: &str = "172.16.0.0/16";

/// Ingress preference of a generated group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IngressVariant {
    /// `eth prio 1, lte prio 2`
    #[default]
    Primary,
    /// `eth w 70, lte w 30`
    Weighted,
}

pub struct GeneratedNib {
    pub groups: usize,
    pub regs: Vec<NodeRegistration>,
    pub records: Vec<MappingRecord>,
    pub policy_text: String,
}

pub fn group_name(k: usize) -> String {
    format!("g{k}")
}

/// The /22 block of group `k`: 10.0.0.0/22, 10.0.4.0/22, ...
pub fn group_prefix(k: usize) -> EidPrefix {
    let base = (10u32 << 24) | ((k as u32) << 10);
    EidPrefix::new(EndpointId(base), 22).expect("aligned")
}

/// Policy text for `groups` generated groups plus the probe group.
pub fn policy_text(groups: usize, variant: impl Fn(usize) -> IngressVariant) -> String {
    let mut s = String::new();
    for k in 0..groups {
        let _ = writeln!(s, "group {} {{ members: {} }}", group_name(k), group_prefix(k));
    }
    let _ = writeln!(s, "group {PROBE_GROUP} {{ members: {PROBE_PREFIX} }}");
    let _ = writeln!(s, "default egress {PROBE_GROUP} {{ eth prio 1, lte prio 2 }}");
    for k in 0..groups {
        let labels = match variant(k) {
            IngressVariant::Primary => "eth prio 1, lte prio 2",
            IngressVariant::Weighted => "eth w 70, lte w 30",
        };
        let _ = writeln!(s, "default ingress {} {{ {labels} }}", group_name(k));
    }
    s
}

/// `size` registrations spread round-robin over `groups` groups, rendered.
pub fn generate_nib(size: usize, groups: usize, seed: u64, sites: usize) -> GeneratedNib {
    assert!(groups > 0 && size.div_ceil(groups) <= 1022, "at most 1022 members per /22 group");
    let text = policy_text(groups, |_| IngressVariant::Primary);
    let policy = parse_policy(&text).expect("generated policy parses");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<GroupId> = (0..groups).map(|k| GroupId::new(&group_name(k)).expect("valid")).collect();
    let mut regs = Vec::with_capacity(size);
    for i in 0..size {
        let k = i % groups;
        let host = (i / groups) as u32 + 1;
        let eid = EndpointId(group_prefix(k).addr().0 + host);
        let site = SiteId(rng.gen_range(0..sites.max(1)) as u16);
        let under = (11u32 << 24) + 2 * i as u32;
        regs.push(NodeRegistration {
            eid,
            group: names[k].clone(),
            locators: vec![
                Locator::new(site, UnderlayAddr(under), "eth"),
                Locator::new(site, UnderlayAddr(under + 1), "lte").with_priority(2, 100),
            ],
            attributes: Default::default(),
            role: NodeRole::EndNode,
            device_id: 1 << 32 | i as u64,
            update_seq: 0,
        });
    }
    let records = render_all(&policy, &regs);
    GeneratedNib {
        groups,
        regs,
        records,
        policy_text: text,
    }
}

/// Per-destination rendering of generated registrations; equals the full
/// renderer's output for them.
fn render_all(policy: &PolicySet, regs: &[NodeRegistration]) -> Vec<MappingRecord> {
    let hops = HopDirectory::default();
    let opts = RenderOptions::default();
    let mut out = Vec::with_capacity(regs.len());
    for r in regs {
        out.extend(render_destination(policy, r, &r.group, &hops, &opts).records);
    }
    out
}

/// First probe-group address whose records are homed at `target`.
pub fn probe_eid(pmap: &PartitionMap, target: PartitionId) -> EndpointId {
    let base: EidPrefix = PROBE_PREFIX.parse().expect("valid prefix");
    (1..base.size())
        .map(|i| EndpointId(base.addr().0 + i as u32))
        .find(|e| pmap.partition_for(*e) == target)
        .expect("some probe address hashes to every partition")
}
