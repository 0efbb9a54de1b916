//! Cluster coordination: the registration journal shared by all controller
//! nodes, and heartbeat-based membership.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::intent::HopDirectory;
use crate::model::{EndpointId, NodeRegistration, NodeRole};
use crate::simnet::SimTime;

/// Durable cluster state: every registration ever written plus the current
/// policy text. Partitions are rebuilt from it after a failure.
#[derive(Debug, Clone, Default)]
pub struct CoordinationStore {
    regs: Vec<NodeRegistration>,
    index: HashMap<EndpointId, usize>,
    policy_text: String,
    policy_version: u64,
    hops: HopDirectory,
    infra: BTreeMap<EndpointId, usize>,
    /// Allocated addresses whose registration may not have landed yet.
    leases: HashMap<EndpointId, u64>,
}

impl CoordinationStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reserve(&mut self, n: usize) {
        self.regs.reserve(n);
        self.index.reserve(n);
    }

    pub fn upsert_registration(&mut self, reg: NodeRegistration) {
        let infra = reg.role != NodeRole::EndNode;
        if reg.role == NodeRole::ReEncap {
            if let Some(name) = reg.hop_name() {
                self.hops.insert(name, reg.eid);
            }
        }
        let i = match self.index.get(&reg.eid) {
            Some(&i) => {
                self.regs[i] = reg;
                i
            }
            None => {
                self.index.insert(reg.eid, self.regs.len());
                self.regs.push(reg);
                self.regs.len() - 1
            }
        };
        if infra {
            self.infra.insert(self.regs[i].eid, i);
        }
    }

    pub fn lease(&mut self, eid: EndpointId, device: u64) {
        self.leases.insert(eid, device);
    }

    /// True when neither a registration nor a lease ties `eid` to another device.
    pub fn is_free_for(&self, eid: EndpointId, device: u64) -> bool {
        self.registration(eid).is_none_or(|r| r.device_id == device)
            && self.leases.get(&eid).is_none_or(|d| *d == device)
    }

    pub fn registration(&self, eid: EndpointId) -> Option<&NodeRegistration> {
        self.index.get(&eid).map(|&i| &self.regs[i])
    }

    pub fn registrations(&self) -> &[NodeRegistration] {
        &self.regs
    }

    pub fn hops(&self) -> &HopDirectory {
        &self.hops
    }

    /// Registered nodes of `role`, in EID order.
    pub fn infra(&self, role: NodeRole) -> Vec<&NodeRegistration> {
        self.infra
            .values()
            .map(|&i| &self.regs[i])
            .filter(|r| r.role == role)
            .collect()
    }

    pub fn set_policy(&mut self, text: &str) -> u64 {
        self.policy_text = text.to_string();
        self.policy_version += 1;
        self.policy_version
    }

    pub fn policy_text(&self) -> &str {
        &self.policy_text
    }

    pub fn policy_version(&self) -> u64 {
        self.policy_version
    }
}

/// One node's view of which peers are alive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MembershipView {
    pub epoch: u64,
    pub live: BTreeSet<u32>,
    last_heard: BTreeMap<u32, SimTime>,
    interval: SimTime,
    misses: u32,
}

impl MembershipView {
    pub fn new(members: impl IntoIterator<Item = u32>, now: SimTime, interval: SimTime, misses: u32) -> Self {
        let live: BTreeSet<u32> = members.into_iter().collect();
        let last_heard = live.iter().map(|&m| (m, now)).collect();
        Self {
            epoch: 0,
            live,
            last_heard,
            interval,
            misses,
        }
    }

    pub fn heard(&mut self, id: u32, now: SimTime) {
        if self.live.contains(&id) {
            self.last_heard.insert(id, now);
        }
    }

    pub fn add(&mut self, id: u32, now: SimTime) {
        self.live.insert(id);
        self.last_heard.insert(id, now);
    }

    pub fn remove(&mut self, id: u32) {
        self.live.remove(&id);
        self.last_heard.remove(&id);
    }

    /// Peers (other than `me`) silent for `misses` whole intervals; they are
    /// removed from the live set.
    pub fn check(&mut self, me: u32, now: SimTime) -> Vec<u32> {
        let limit = SimTime(self.interval.0 * u64::from(self.misses));
        let dead: Vec<u32> = self
            .last_heard
            .iter()
            .filter(|(id, t)| **id != me && now.saturating_sub(**t) > limit)
            .map(|(id, _)| *id)
            .collect();
        if !dead.is_empty() {
            self.epoch += 1;
        }
        for d in &dead {
            self.remove(*d);
        }
        dead
    }

    /// Lowest live id.
    pub fn leader(&self) -> Option<u32> {
        self.live.iter().next().copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GroupId, Locator, SiteId, UnderlayAddr};

    #[test]
    fn peer_dead_after_three_missed_intervals() {
        let hb = SimTime::from_secs(2);
        let mut v = MembershipView::new([0, 1, 2], SimTime::ZERO, hb, 3);
        v.heard(1, SimTime::from_secs(2));
        v.heard(2, SimTime::from_secs(2));
        assert!(v.check(0, SimTime::from_secs(8)).is_empty());
        v.heard(2, SimTime::from_secs(8));
        // Node 1 last heard at 2 s; 3 intervals later it is gone.
        assert_eq!(v.check(0, SimTime::from_millis(8_250)), vec![1]);
        assert_eq!(v.epoch, 1);
        assert_eq!(v.leader(), Some(0));
        assert!(v.check(0, SimTime::from_secs(9)).is_empty());
        assert_eq!(v.epoch, 1);
    }

    #[test]
    fn journal_tracks_hops_and_infra() {
        let mut c = CoordinationStore::new();
        let mut r = NodeRegistration {
            eid: EndpointId(5),
            group: GroupId::reencap_pool(),
            locators: vec![Locator::new(SiteId(0), UnderlayAddr(1), "eth")],
            attributes: [("name".to_string(), "Firewall".to_string())].into(),
            role: NodeRole::ReEncap,
            device_id: 1,
            update_seq: 0,
        };
        c.upsert_registration(r.clone());
        r.update_seq = 1;
        c.upsert_registration(r);
        assert_eq!(c.registrations().len(), 1);
        assert_eq!(c.hops().resolve("Firewall"), Some(EndpointId(5)));
        assert_eq!(c.infra(NodeRole::ReEncap).len(), 1);
        assert_eq!(c.registration(EndpointId(5)).unwrap().update_seq, 1);
    }

    #[test]
    fn leases_hold_an_address_before_it_is_registered() {
        let mut c = CoordinationStore::new();
        let e = EndpointId(9);
        assert!(c.is_free_for(e, 1));
        c.lease(e, 1);
        assert!(c.is_free_for(e, 1));
        assert!(!c.is_free_for(e, 2));
    }
}
