//! Domain types shared by the renderer, the NIB, the southbound protocol and
//! the data-plane agents, plus the deterministic locator selection used on
//! both sides of the control plane.

use std::collections::BTreeMap;
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Group name reserved for re-encapsulation nodes.
pub const REENCAP_POOL: &str = "re-encap-pool";
/// Group name reserved for proxy nodes.
pub const PROXY_POOL: &str = "proxy-pool";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("no usable locator: every candidate is down")]
    NoUsableLocator,
    #[error("no prefix covers {0}")]
    NoMatch(EndpointId),
    #[error("invalid address: {0}")]
    InvalidAddress(String),
    #[error("invalid prefix length {0}")]
    InvalidMaskLen(u32),
    #[error("prefix {addr}/{mask_len} has host bits set")]
    HostBitsSet { addr: Ipv4Addr, mask_len: u8 },
    #[error("invalid group name {0:?}")]
    InvalidGroupName(String),
    #[error("invalid registration for {eid}: {reason}")]
    InvalidRegistration { eid: EndpointId, reason: String },
}

macro_rules! dotted_quad {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
        pub struct $name(pub u32);

        impl $name {
            pub const fn new(a: u8, b: u8, c: u8, d: u8) -> Self {
                Self(u32::from_be_bytes([a, b, c, d]))
            }

            pub fn to_be_bytes(self) -> [u8; 4] {
                self.0.to_be_bytes()
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                fmt::Display::fmt(&Ipv4Addr::from(self.0), f)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                fmt::Display::fmt(self, f)
            }
        }

        impl FromStr for $name {
            type Err = ModelError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Ipv4Addr::from_str(s)
                    .map(|a| Self(u32::from(a)))
                    .map_err(|_| ModelError::InvalidAddress(s.to_string()))
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

dotted_quad!(
    /// Overlay identity of an end-node. Ordered numerically.
    EndpointId
);
dotted_quad!(
    /// Underlay reachability address.
    UnderlayAddr
);

/// An overlay prefix. Host bits below `mask_len` are always zero.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EidPrefix {
    addr: u32,
    mask_len: u8,
}

fn mask_for(len: u8) -> u32 {
    if len == 0 {
        0
    } else {
        u32::MAX << (32 - u32::from(len))
    }
}

impl EidPrefix {
    pub fn new(addr: EndpointId, mask_len: u32) -> Result<Self, ModelError> {
        if mask_len > 32 {
            return Err(ModelError::InvalidMaskLen(mask_len));
        }
        let mask_len = mask_len as u8;
        if addr.0 & !mask_for(mask_len) != 0 {
            return Err(ModelError::HostBitsSet {
                addr: Ipv4Addr::from(addr.0),
                mask_len,
            });
        }
        Ok(Self {
            addr: addr.0,
            mask_len,
        })
    }

    /// The /32 prefix holding exactly `eid`.
    pub fn host(eid: EndpointId) -> Self {
        Self {
            addr: eid.0,
            mask_len: 32,
        }
    }

    pub fn addr(&self) -> EndpointId {
        EndpointId(self.addr)
    }

    pub fn mask_len(&self) -> u8 {
        self.mask_len
    }

    pub fn contains(&self, eid: EndpointId) -> bool {
        eid.0 & mask_for(self.mask_len) == self.addr
    }

    /// True when one prefix covers the other.
    pub fn overlaps(&self, other: &EidPrefix) -> bool {
        let shorter = self.mask_len.min(other.mask_len);
        let m = mask_for(shorter);
        self.addr & m == other.addr & m
    }

    /// Number of addresses covered by the prefix.
    pub fn size(&self) -> u64 {
        1u64 << (32 - u32::from(self.mask_len))
    }
}

impl fmt::Display for EidPrefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", Ipv4Addr::from(self.addr), self.mask_len)
    }
}

impl fmt::Debug for EidPrefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for EidPrefix {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (addr, len) = s
            .split_once('/')
            .ok_or_else(|| ModelError::InvalidAddress(s.to_string()))?;
        let len: u32 = len
            .parse()
            .map_err(|_| ModelError::InvalidAddress(s.to_string()))?;
        EidPrefix::new(addr.parse()?, len)
    }
}

impl Serialize for EidPrefix {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EidPrefix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Longest prefix in `prefixes` covering `eid`.
pub fn prefix_match(eid: EndpointId, prefixes: &[EidPrefix]) -> Result<EidPrefix, ModelError> {
    let mut best: Option<EidPrefix> = None;
    for p in prefixes.iter().filter(|p| p.contains(eid)) {
        if best.is_none_or(|b| p.mask_len > b.mask_len) {
            best = Some(*p);
        }
    }
    best.ok_or(ModelError::NoMatch(eid))
}

/// Index into the active scenario's latency matrix.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SiteId(pub u16);

impl SiteId {
    pub fn index(self) -> usize {
        usize::from(self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkStatus {
    Up,
    Down,
}

impl LinkStatus {
    pub fn is_up(self) -> bool {
        self == LinkStatus::Up
    }
}

/// An underlay attachment of a node.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Locator {
    pub site: SiteId,
    pub underlay_addr: UnderlayAddr,
    pub label: String,
    /// 1 is the most preferred level.
    pub priority: u8,
    /// Share of traffic within a priority level, 0..=100.
    pub weight: u8,
    pub status: LinkStatus,
}

impl Locator {
    pub fn new(site: SiteId, underlay_addr: UnderlayAddr, label: impl Into<String>) -> Self {
        Self {
            site,
            underlay_addr,
            label: label.into(),
            priority: 1,
            weight: 100,
            status: LinkStatus::Up,
        }
    }

    pub fn with_priority(mut self, priority: u8, weight: u8) -> Self {
        self.priority = priority;
        self.weight = weight;
        self
    }

    pub fn with_status(mut self, status: LinkStatus) -> Self {
        self.status = status;
        self
    }
}

/// A policy group name. Cheap to clone.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GroupId(Arc<str>);

pub(crate) fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

impl GroupId {
    /// Accepts identifiers of the policy language and the two reserved pool names.
    pub fn new(name: &str) -> Result<Self, ModelError> {
        if is_ident(name) || name == REENCAP_POOL || name == PROXY_POOL {
            Ok(Self(Arc::from(name)))
        } else {
            Err(ModelError::InvalidGroupName(name.to_string()))
        }
    }

    pub fn reencap_pool() -> Self {
        Self(Arc::from(REENCAP_POOL))
    }

    pub fn proxy_pool() -> Self {
        Self(Arc::from(PROXY_POOL))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_reserved(&self) -> bool {
        &*self.0 == REENCAP_POOL || &*self.0 == PROXY_POOL
    }
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", &*self.0)
    }
}

impl Serialize for GroupId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for GroupId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        GroupId::new(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeRole {
    EndNode,
    ReEncap,
    Proxy,
}

/// What a node reports about itself when it joins the overlay.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRegistration {
    pub eid: EndpointId,
    pub group: GroupId,
    pub locators: Vec<Locator>,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
    pub role: NodeRole,
    /// Provisioned hardware identity; distinguishes a re-bootstrap from an EID collision.
    #[serde(default)]
    pub device_id: u64,
    /// Highest state-update sequence applied to this registration.
    #[serde(default)]
    pub update_seq: u64,
}

impl NodeRegistration {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |reason: &str| ModelError::InvalidRegistration {
            eid: self.eid,
            reason: reason.to_string(),
        };
        if self.locators.is_empty() {
            return Err(bad("no locators"));
        }
        if !self.locators.iter().any(|l| l.status.is_up()) {
            return Err(bad("no locator is up"));
        }
        for (i, l) in self.locators.iter().enumerate() {
            if self.locators[..i].iter().any(|o| o.label == l.label) {
                return Err(bad(&format!("duplicate interface label {}", l.label)));
            }
        }
        match self.role {
            NodeRole::ReEncap if self.group.as_str() != REENCAP_POOL => {
                Err(bad("re-encapsulation nodes belong to re-encap-pool"))
            }
            NodeRole::Proxy if self.group.as_str() != PROXY_POOL => {
                Err(bad("proxy nodes belong to proxy-pool"))
            }
            NodeRole::EndNode if self.group.is_reserved() => {
                Err(bad("end-nodes cannot join a reserved pool"))
            }
            _ => Ok(()),
        }
    }

    /// Name under which a re-encapsulation node is referenced by `via` clauses.
    pub fn hop_name(&self) -> Option<&str> {
        self.attributes.get("name").map(String::as_str)
    }
}

/// Source half of a record key.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceGroup {
    Any,
    Group(GroupId),
}

impl fmt::Display for SourceGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceGroup::Any => f.write_str("any"),
            SourceGroup::Group(g) => fmt::Display::fmt(g, f),
        }
    }
}

/// Records are keyed at IP granularity: source group and destination only.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RecordKey {
    pub dst: EndpointId,
    pub src: SourceGroup,
}

impl RecordKey {
    pub fn any(dst: EndpointId) -> Self {
        Self {
            dst,
            src: SourceGroup::Any,
        }
    }

    pub fn pair(src: GroupId, dst: EndpointId) -> Self {
        Self {
            dst,
            src: SourceGroup::Group(src),
        }
    }
}

impl fmt::Display for RecordKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.src, self.dst)
    }
}

/// One normalized entry of an interface label list.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelPref {
    pub label: String,
    pub priority: u8,
    pub weight: u8,
}

impl LabelPref {
    pub fn new(label: impl Into<String>, priority: u8, weight: u8) -> Self {
        Self {
            label: label.into(),
            priority,
            weight,
        }
    }
}

/// Rendered per-destination state served by the NIB.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingRecord {
    pub key: RecordKey,
    pub ingress_locators: Vec<Locator>,
    /// Re-encapsulation hops to traverse before the destination.
    pub hop_chain: Vec<EndpointId>,
    /// Per-destination egress override carried by pair policies.
    #[serde(default)]
    pub egress_hint: Vec<LabelPref>,
    pub ttl_s: u32,
    pub version: u64,
    pub negative: bool,
}

impl MappingRecord {
    pub fn negative(key: RecordKey, ttl_s: u32, version: u64) -> Self {
        Self {
            key,
            ingress_locators: Vec::new(),
            hop_chain: Vec::new(),
            egress_hint: Vec::new(),
            ttl_s,
            version,
            negative: true,
        }
    }

    /// Equality ignoring the version stamp.
    pub fn same_content(&self, other: &MappingRecord) -> bool {
        self.key == other.key
            && self.ingress_locators == other.ingress_locators
            && self.hop_chain == other.hop_chain
            && self.egress_hint == other.egress_hint
            && self.ttl_s == other.ttl_s
            && self.negative == other.negative
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlayPacket {
    pub src: EndpointId,
    pub dst: EndpointId,
    pub size_bytes: u32,
    pub flow_tag: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncapsulatedPacket {
    pub outer_src: Locator,
    pub outer_dst: Locator,
    pub remaining_hops: Vec<EndpointId>,
    pub inner: OverlayPacket,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME)
    })
}

/// FNV-1a over the big-endian source EID followed by the destination EID.
pub fn balance_hash(src: EndpointId, dst: EndpointId) -> u64 {
    let mut buf = [0u8; 8];
    buf[..4].copy_from_slice(&src.to_be_bytes());
    buf[4..].copy_from_slice(&dst.to_be_bytes());
    fnv1a64(&buf)
}

/// Picks the locator to use for a `(src, dst)` flow.
///
/// The preferred level is the lowest priority number held by any up locator.
/// Within that level the hash of `balance_key`, reduced modulo the level's
/// total weight (counting down members too), points at a weighted slot. If
/// that slot's locator is down, the next up locator of the level in cyclic
/// list order is used, so taking down a locator that was not selected never
/// moves a flow.
pub fn select_locator(
    locators: &[Locator],
    balance_key: (EndpointId, EndpointId),
) -> Result<&Locator, ModelError> {
    let level = locators
        .iter()
        .filter(|l| l.status.is_up())
        .map(|l| l.priority)
        .min()
        .ok_or(ModelError::NoUsableLocator)?;
    let members: Vec<&Locator> = locators.iter().filter(|l| l.priority == level).collect();
    let hash = balance_hash(balance_key.0, balance_key.1);
    let total: u64 = members.iter().map(|l| u64::from(l.weight)).sum();
    let slot = if total == 0 {
        (hash % members.len() as u64) as usize
    } else {
        let mut r = hash % total;
        let mut idx = 0;
        for (i, l) in members.iter().enumerate() {
            let w = u64::from(l.weight);
            if r < w {
                idx = i;
                break;
            }
            r -= w;
        }
        idx
    };
    (0..members.len())
        .map(|off| members[(slot + off) % members.len()])
        .find(|l| l.status.is_up())
        .ok_or(ModelError::NoUsableLocator)
}

/// Splits 100 evenly over `n` entries, remainder to the first ones.
pub fn even_weights(n: usize) -> Vec<u8> {
    if n == 0 {
        return Vec::new();
    }
    let base = 100 / n;
    let rem = 100 % n;
    (0..n).map(|i| (base + usize::from(i < rem)) as u8).collect()
}

/// Reorders and re-weights a node's locators by a label list.
///
/// Listed labels come first with the list's priority and weight. Locators the
/// list does not mention follow as a single fallback level one below the
/// least preferred listed level. Returns the labels the node does not have.
pub fn apply_label_list(locators: &[Locator], prefs: &[LabelPref]) -> (Vec<Locator>, Vec<String>) {
    if prefs.is_empty() {
        return (locators.to_vec(), Vec::new());
    }
    let mut out = Vec::with_capacity(locators.len());
    let mut unknown = Vec::new();
    for p in prefs {
        match locators.iter().find(|l| l.label == p.label) {
            Some(l) => out.push(Locator {
                priority: p.priority,
                weight: p.weight,
                ..l.clone()
            }),
            None => unknown.push(p.label.clone()),
        }
    }
    let rest: Vec<&Locator> = locators
        .iter()
        .filter(|l| !prefs.iter().any(|p| p.label == l.label))
        .collect();
    let fallback = prefs.iter().map(|p| p.priority).max().unwrap_or(0).saturating_add(1);
    let weights = even_weights(rest.len());
    for (l, w) in rest.into_iter().zip(weights) {
        out.push(Locator {
            priority: fallback,
            weight: w,
            ..l.clone()
        });
    }
    (out, unknown)
}
