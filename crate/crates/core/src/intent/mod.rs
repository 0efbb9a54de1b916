//! The group-oriented northbound language and its rendering into NIB state.
//!
//! A [`PolicySet`] is parsed from policy text (see [`parse_policy`]) and,
//! combined with node registrations, rendered into [`MappingRecord`]s keyed by
//! `(source group | any, destination)` plus one [`EgressPolicy`] per end-node.
//!
//! [`MappingRecord`]: crate::model::MappingRecord

mod parser;
mod render;

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EidPrefix, EndpointId, GroupId, LabelPref, NodeRegistration};

pub use parser::parse_policy;
pub use render::{
    render, render_delta, render_delta_with, render_destination, render_group, render_with, HopDirectory,
    NodeRender, RecordChange, RenderDelta, RenderError, RenderOptions, Rendered,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyErrorKind {
    SyntaxError,
    UndeclaredGroup,
    OverlappingMembership,
    DuplicateDeclaration,
}

/// Diagnostic produced while parsing or validating policy text.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{line}:{col}: {kind:?}: {message}")]
pub struct PolicyError {
    pub kind: PolicyErrorKind,
    pub line: usize,
    pub col: usize,
    pub message: String,
}

impl PolicyError {
    pub(crate) fn new(kind: PolicyErrorKind, line: usize, col: usize, message: impl Into<String>) -> Self {
        Self {
            kind,
            line,
            col,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IntentError {
    #[error("no group covers {0}")]
    NoGroup(EndpointId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparator {
    Lt,
    Le,
    Eq,
    Ge,
    Gt,
}

impl Comparator {
    fn symbol(self) -> &'static str {
        match self {
            Comparator::Lt => "<",
            Comparator::Le => "<=",
            Comparator::Eq => "=",
            Comparator::Ge => ">=",
            Comparator::Gt => ">",
        }
    }
}

/// Single-attribute numeric comparison. A missing or non-numeric attribute
/// makes the predicate false.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributePredicate {
    pub key: String,
    pub cmp: Comparator,
    pub threshold: f64,
}

impl AttributePredicate {
    pub fn eval(&self, attributes: &BTreeMap<String, String>) -> bool {
        let Some(value) = attributes.get(&self.key).and_then(|v| v.trim().parse::<f64>().ok())
        else {
            return false;
        };
        match self.cmp {
            Comparator::Lt => value < self.threshold,
            Comparator::Le => value <= self.threshold,
            Comparator::Eq => value == self.threshold,
            Comparator::Ge => value >= self.threshold,
            Comparator::Gt => value > self.threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub id: GroupId,
    pub members: Vec<EidPrefix>,
    pub predicate: Option<AttributePredicate>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairPolicy {
    pub egress: Vec<LabelPref>,
    /// Names of re-encapsulation nodes, in traversal order.
    pub via: Vec<String>,
    pub ingress: Vec<LabelPref>,
}

/// Bootstrap-time egress preferences of one end-node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EgressPolicy {
    pub owner: EndpointId,
    pub labels: Vec<LabelPref>,
    pub version: u64,
}

/// Longest-prefix lookup over prefix-only groups plus a short list of
/// attribute-qualified groups that are checked first.
#[derive(Debug, Clone, Default)]
struct MembershipIndex {
    by_len: Vec<(u8, HashMap<u32, usize>)>,
    predicated: Vec<usize>,
}

impl MembershipIndex {
    fn build(groups: &[GroupSpec]) -> Self {
        let mut by_len: BTreeMap<u8, HashMap<u32, usize>> = BTreeMap::new();
        let mut predicated = Vec::new();
        for (i, g) in groups.iter().enumerate() {
            if g.predicate.is_some() {
                predicated.push(i);
                continue;
            }
            for p in &g.members {
                by_len.entry(p.mask_len()).or_default().entry(p.addr().0).or_insert(i);
            }
        }
        Self {
            by_len: by_len.into_iter().rev().collect(),
            predicated,
        }
    }

    fn resolve(&self, groups: &[GroupSpec], reg: &NodeRegistration) -> Option<usize> {
        let mut best: Option<(u8, usize)> = None;
        for &i in &self.predicated {
            let g = &groups[i];
            let Some(len) = g
                .members
                .iter()
                .filter(|p| p.contains(reg.eid))
                .map(EidPrefix::mask_len)
                .max()
            else {
                continue;
            };
            let holds = g.predicate.as_ref().is_some_and(|p| p.eval(&reg.attributes));
            if holds && best.is_none_or(|(b, _)| len > b) {
                best = Some((len, i));
            }
        }
        if let Some((_, i)) = best {
            return Some(i);
        }
        self.by_len.iter().find_map(|(len, map)| {
            let masked = if *len == 0 {
                0
            } else {
                reg.eid.0 & (u32::MAX << (32 - u32::from(*len)))
            };
            map.get(&masked).copied()
        })
    }
}

/// A validated northbound policy document.
#[derive(Debug, Clone, Default)]
pub struct PolicySet {
    groups: Vec<GroupSpec>,
    default_egress: BTreeMap<GroupId, Vec<LabelPref>>,
    default_ingress: BTreeMap<GroupId, Vec<LabelPref>>,
    pair_policies: BTreeMap<(GroupId, GroupId), PairPolicy>,
    index: MembershipIndex,
}

impl PartialEq for PolicySet {
    fn eq(&self, other: &Self) -> bool {
        self.groups == other.groups
            && self.default_egress == other.default_egress
            && self.default_ingress == other.default_ingress
            && self.pair_policies == other.pair_policies
    }
}

impl PolicySet {
    /// Builds a policy set from already-normalized parts, applying the same
    /// validation as the parser (without source positions).
    pub fn from_parts(
        groups: Vec<GroupSpec>,
        default_egress: BTreeMap<GroupId, Vec<LabelPref>>,
        default_ingress: BTreeMap<GroupId, Vec<LabelPref>>,
        pair_policies: BTreeMap<(GroupId, GroupId), PairPolicy>,
    ) -> Result<Self, PolicyError> {
        let err = |kind, msg: String| PolicyError::new(kind, 0, 0, msg);
        for (i, g) in groups.iter().enumerate() {
            if groups[..i].iter().any(|o| o.id == g.id) {
                return Err(err(
                    PolicyErrorKind::DuplicateDeclaration,
                    format!("group {} declared twice", g.id),
                ));
            }
        }
        if let Some((a, b)) = first_overlap(&groups) {
            return Err(err(
                PolicyErrorKind::OverlappingMembership,
                format!("groups {} and {} overlap", groups[a].id, groups[b].id),
            ));
        }
        let declared = |g: &GroupId| groups.iter().any(|s| &s.id == g);
        let referenced = default_egress
            .keys()
            .chain(default_ingress.keys())
            .chain(pair_policies.keys().flat_map(|(a, b)| [a, b]));
        for g in referenced {
            if !declared(g) {
                return Err(err(
                    PolicyErrorKind::UndeclaredGroup,
                    format!("group {g} is not declared"),
                ));
            }
        }
        Ok(Self::assemble(groups, default_egress, default_ingress, pair_policies))
    }

    pub(crate) fn assemble(
        groups: Vec<GroupSpec>,
        default_egress: BTreeMap<GroupId, Vec<LabelPref>>,
        default_ingress: BTreeMap<GroupId, Vec<LabelPref>>,
        pair_policies: BTreeMap<(GroupId, GroupId), PairPolicy>,
    ) -> Self {
        let index = MembershipIndex::build(&groups);
        Self {
            groups,
            default_egress,
            default_ingress,
            pair_policies,
            index,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn groups(&self) -> &[GroupSpec] {
        &self.groups
    }

    pub fn group(&self, id: &GroupId) -> Option<&GroupSpec> {
        self.groups.iter().find(|g| &g.id == id)
    }

    pub fn default_egress(&self, group: &GroupId) -> Option<&[LabelPref]> {
        self.default_egress.get(group).map(Vec::as_slice)
    }

    pub fn default_ingress(&self, group: &GroupId) -> Option<&[LabelPref]> {
        self.default_ingress.get(group).map(Vec::as_slice)
    }

    pub fn pair(&self, src: &GroupId, dst: &GroupId) -> Option<&PairPolicy> {
        self.pair_policies.get(&(src.clone(), dst.clone()))
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&GroupId, &GroupId, &PairPolicy)> {
        self.pair_policies.iter().map(|((a, b), p)| (a, b, p))
    }

    pub fn egress_defaults(&self) -> &BTreeMap<GroupId, Vec<LabelPref>> {
        &self.default_egress
    }

    pub fn ingress_defaults(&self) -> &BTreeMap<GroupId, Vec<LabelPref>> {
        &self.default_ingress
    }

    /// Replaces a group's default ingress list.
    pub fn set_default_ingress(&mut self, group: GroupId, labels: Vec<LabelPref>) {
        self.default_ingress.insert(group, labels);
    }

    /// Group of a registered node, or `None` when no membership matches.
    pub fn group_of(&self, reg: &NodeRegistration) -> Option<&GroupId> {
        self.index.resolve(&self.groups, reg).map(|i| &self.groups[i].id)
    }
}

fn first_overlap(groups: &[GroupSpec]) -> Option<(usize, usize)> {
    // Sorting by (address, length) puts every covering prefix before what it covers.
    let mut plain: Vec<(EidPrefix, usize)> = groups
        .iter()
        .enumerate()
        .filter(|(_, g)| g.predicate.is_none())
        .flat_map(|(i, g)| g.members.iter().map(move |p| (*p, i)))
        .collect();
    plain.sort_by_key(|(p, _)| (p.addr(), p.mask_len()));
    let mut open: Vec<(EidPrefix, usize)> = Vec::new();
    for (p, g) in plain {
        while open.last().is_some_and(|(o, _)| !o.overlaps(&p)) {
            open.pop();
        }
        if let Some((_, og)) = open.iter().find(|(_, og)| *og != g) {
            return Some(((*og).min(g), (*og).max(g)));
        }
        open.push((p, g));
    }
    None
}

/// The group a node belongs to under `policy`.
///
/// Attribute-qualified groups whose predicate holds win over prefix-only
/// groups; otherwise the longest covering prefix-only group is used.
pub fn resolve_group(reg: &NodeRegistration, policy: &PolicySet) -> Result<GroupId, IntentError> {
    policy.group_of(reg).cloned().ok_or(IntentError::NoGroup(reg.eid))
}

fn write_labels(f: &mut fmt::Formatter<'_>, labels: &[LabelPref]) -> fmt::Result {
    for (i, l) in labels.iter().enumerate() {
        if i > 0 {
            f.write_str(", ")?;
        }
        let shared = labels.iter().filter(|o| o.priority == l.priority).count() > 1;
        if l.priority == 1 && shared {
            write!(f, "{} w {}", l.label, l.weight)?;
        } else {
            write!(f, "{} prio {}", l.label, l.priority)?;
        }
    }
    Ok(())
}

/// Canonical policy text; parsing it yields an equal `PolicySet`.
impl fmt::Display for PolicySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for g in &self.groups {
            write!(f, "group {} {{ members: ", g.id)?;
            for (i, p) in g.members.iter().enumerate() {
                if i > 0 {
                    f.write_str(", ")?;
                }
                write!(f, "{p}")?;
            }
            if let Some(pred) = &g.predicate {
                write!(f, "; where {} {} {}", pred.key, pred.cmp.symbol(), pred.threshold)?;
            }
            f.write_str(" }\n")?;
        }
        for (dir, map) in [("egress", &self.default_egress), ("ingress", &self.default_ingress)] {
            for (g, labels) in map {
                write!(f, "default {dir} {g} {{ ")?;
                write_labels(f, labels)?;
                f.write_str(" }\n")?;
            }
        }
        for ((a, b), p) in &self.pair_policies {
            write!(f, "pair {a} -> {b} {{")?;
            let mut first = true;
            let mut sep = |f: &mut fmt::Formatter<'_>| {
                let s = if first { " " } else { "; " };
                first = false;
                f.write_str(s)
            };
            if !p.egress.is_empty() {
                sep(f)?;
                f.write_str("egress ")?;
                write_labels(f, &p.egress)?;
            }
            if !p.via.is_empty() {
                sep(f)?;
                write!(f, "via {}", p.via.join(", "))?;
            }
            if !p.ingress.is_empty() {
                sep(f)?;
                f.write_str("ingress ")?;
                write_labels(f, &p.ingress)?;
            }
            f.write_str(" }\n")?;
        }
        Ok(())
    }
}
