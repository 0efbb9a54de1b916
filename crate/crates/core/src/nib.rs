//! Partitioned Network Information Base.
//!
//! Keys are routed by a hash of the destination EID only, so every record
//! for one destination lives in the same partition as that node's
//! registration.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    fnv1a64, EndpointId, GroupId, MappingRecord, NodeRegistration, RecordKey, SiteId, SourceGroup,
    UnderlayAddr,
};
use crate::simnet::SimTime;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NibError {
    #[error("stale version for {key}: stored {stored}, offered {offered}")]
    StaleVersion {
        key: RecordKey,
        stored: u64,
        offered: u64,
    },
    #[error("{0} is not registered")]
    NotRegistered(EndpointId),
    #[error("snapshot line {line}: {message}")]
    Snapshot { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PartitionId {
    pub index: u32,
    pub home_site: SiteId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionRange {
    /// First hash value of the range; the range ends where the next begins.
    pub start: u64,
    pub owner: PartitionId,
}

/// Assignment of the 64-bit key-hash space to partitions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionMap {
    pub epoch: u64,
    ranges: Vec<PartitionRange>,
}

/// murmur3 finalizer.
fn fmix64(mut k: u64) -> u64 {
    k ^= k >> 33;
    k = k.wrapping_mul(0xff51_afd7_ed55_8ccd);
    k ^= k >> 33;
    k = k.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    k ^= k >> 33;
    k
}

/// Position of a destination in the partition hash space.
pub fn key_hash(dst: EndpointId) -> u64 {
    fmix64(fnv1a64(&dst.to_be_bytes()))
}

fn equal_starts(n: usize) -> Vec<u64> {
    (0..n).map(|i| ((i as u128) << 64).checked_div(n as u128).unwrap_or(0) as u64).collect()
}

impl PartitionMap {
    pub fn single(owner: PartitionId) -> Self {
        Self {
            epoch: 0,
            ranges: vec![PartitionRange { start: 0, owner }],
        }
    }

    /// Equal-width ranges, one per owner, in the given order.
    pub fn equal(owners: &[PartitionId]) -> Self {
        assert!(!owners.is_empty(), "a partition map needs an owner");
        let ranges = equal_starts(owners.len())
            .into_iter()
            .zip(owners)
            .map(|(start, owner)| PartitionRange { start, owner: *owner })
            .collect();
        Self { epoch: 0, ranges }
    }

    pub fn from_ranges(epoch: u64, mut ranges: Vec<PartitionRange>) -> Self {
        ranges.sort_by_key(|r| r.start);
        assert!(ranges.first().is_some_and(|r| r.start == 0), "ranges must start at 0");
        ranges.dedup_by_key(|r| r.start);
        Self { epoch, ranges }
    }

    pub fn ranges(&self) -> &[PartitionRange] {
        &self.ranges
    }

    /// `[start, end)` bounds of range `i`; the last range ends at 2^64.
    pub fn bounds(&self, i: usize) -> (u64, u128) {
        let start = self.ranges[i].start;
        let end = self.ranges.get(i + 1).map_or(1u128 << 64, |r| u128::from(r.start));
        (start, end)
    }

    pub fn owner_of_hash(&self, h: u64) -> PartitionId {
        let i = match self.ranges.binary_search_by_key(&h, |r| r.start) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        self.ranges[i].owner
    }

    pub fn partition_for(&self, dst: EndpointId) -> PartitionId {
        self.owner_of_hash(key_hash(dst))
    }

    pub fn owners(&self) -> Vec<PartitionId> {
        let mut v: Vec<PartitionId> = self.ranges.iter().map(|r| r.owner).collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn owns(&self, p: PartitionId, dst: EndpointId) -> bool {
        self.partition_for(dst) == p
    }

    /// Hands every range of `from` to `to`; epoch + 1.
    pub fn reassign(&self, from: PartitionId, to: PartitionId) -> Self {
        let ranges = self
            .ranges
            .iter()
            .map(|r| PartitionRange {
                start: r.start,
                owner: if r.owner == from { to } else { r.owner },
            })
            .collect();
        Self {
            epoch: self.epoch + 1,
            ranges,
        }
    }

    /// Divides every range of `dead` into equal slices, one per survivor;
    /// epoch + 1.
    pub fn split(&self, dead: PartitionId, survivors: &[PartitionId]) -> Self {
        assert!(!survivors.is_empty(), "no survivor to take over");
        let mut ranges = Vec::with_capacity(self.ranges.len() + survivors.len());
        for i in 0..self.ranges.len() {
            let r = self.ranges[i];
            if r.owner != dead {
                ranges.push(r);
                continue;
            }
            let (start, end) = self.bounds(i);
            let width = end - u128::from(start);
            let n = survivors.len() as u128;
            for (k, s) in survivors.iter().enumerate() {
                let sub = u128::from(start) + width * k as u128 / n;
                ranges.push(PartitionRange {
                    start: sub as u64,
                    owner: *s,
                });
            }
        }
        ranges.dedup_by_key(|r| r.start);
        let mut merged: Vec<PartitionRange> = Vec::with_capacity(ranges.len());
        for r in ranges {
            if merged.last().is_some_and(|m| m.owner == r.owner) {
                continue;
            }
            merged.push(r);
        }
        Self {
            epoch: self.epoch + 1,
            ranges: merged,
        }
    }
}

/// Where notifications for a subscribed key go.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Requester {
    pub eid: EndpointId,
    pub reply_to: UnderlayAddr,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequesterEntry {
    pub key: RecordKey,
    pub requester: Requester,
    pub expires_at: SimTime,
}

#[derive(Debug, Clone, Default)]
struct DstRecords {
    any: Option<MappingRecord>,
    by_group: Vec<MappingRecord>,
}

impl DstRecords {
    fn get(&self, src: &SourceGroup) -> Option<&MappingRecord> {
        match src {
            SourceGroup::Any => self.any.as_ref(),
            SourceGroup::Group(g) => self.by_group.iter().find(|r| key_group(&r.key) == Some(g)),
        }
    }

    fn is_empty(&self) -> bool {
        self.any.is_none() && self.by_group.is_empty()
    }
}

fn key_group(k: &RecordKey) -> Option<&GroupId> {
    match &k.src {
        SourceGroup::Any => None,
        SourceGroup::Group(g) => Some(g),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum SnapshotLine {
    Registration(NodeRegistration),
    Record(MappingRecord),
}

/// A notification owed after a write: `requester` asked for `key` and the
/// record it resolves to is now `record`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Notification {
    pub requester: Requester,
    pub key: RecordKey,
    pub record: MappingRecord,
}

/// One partition: a serial store of records, registrations and requesters.
#[derive(Debug, Clone)]
pub struct NibPartition {
    pub id: PartitionId,
    negative_ttl_s: u32,
    records: HashMap<EndpointId, DstRecords>,
    record_count: usize,
    tombstones: HashMap<RecordKey, u64>,
    registrations: HashMap<EndpointId, NodeRegistration>,
    requesters: HashMap<EndpointId, Vec<RequesterEntry>>,
}

impl NibPartition {
    pub fn new(id: PartitionId, negative_ttl_s: u32) -> Self {
        Self {
            id,
            negative_ttl_s,
            records: HashMap::new(),
            record_count: 0,
            tombstones: HashMap::new(),
            registrations: HashMap::new(),
            requesters: HashMap::new(),
        }
    }

    pub fn record_count(&self) -> usize {
        self.record_count
    }

    pub fn registration_count(&self) -> usize {
        self.registrations.len()
    }

    pub fn reserve(&mut self, dsts: usize) {
        self.records.reserve(dsts);
        self.registrations.reserve(dsts);
    }

    /// Version of the live record for `key`, or of its tombstone.
    pub fn stored_version(&self, key: &RecordKey) -> Option<u64> {
        self.records
            .get(&key.dst)
            .and_then(|d| d.get(&key.src))
            .map(|r| r.version)
            .or_else(|| self.tombstones.get(key).copied())
    }

    pub fn put_record(&mut self, rec: MappingRecord) -> Result<u64, NibError> {
        if let Some(stored) = self.stored_version(&rec.key) {
            if rec.version <= stored {
                return Err(NibError::StaleVersion {
                    key: rec.key.clone(),
                    stored,
                    offered: rec.version,
                });
            }
        }
        let version = rec.version;
        self.tombstones.remove(&rec.key);
        let slot = self.records.entry(rec.key.dst).or_default();
        match &rec.key.src {
            SourceGroup::Any => {
                if slot.any.is_none() {
                    self.record_count += 1;
                }
                slot.any = Some(rec);
            }
            SourceGroup::Group(g) => {
                match slot.by_group.iter_mut().find(|r| key_group(&r.key) == Some(g)) {
                    Some(old) => *old = rec,
                    None => {
                        slot.by_group.push(rec);
                        self.record_count += 1;
                    }
                }
            }
        }
        Ok(version)
    }

    /// Stores `rec` one version past whatever is stored for its key.
    pub fn upsert(&mut self, mut rec: MappingRecord) -> MappingRecord {
        rec.version = self.stored_version(&rec.key).map_or(1, |v| v + 1);
        self.put_record(rec.clone()).expect("version is fresh");
        rec
    }

    /// Removes the record, keeping its version as a tombstone.
    pub fn remove_record(&mut self, key: &RecordKey) -> Option<MappingRecord> {
        let slot = self.records.get_mut(&key.dst)?;
        let removed = match &key.src {
            SourceGroup::Any => slot.any.take(),
            SourceGroup::Group(g) => {
                let i = slot.by_group.iter().position(|r| key_group(&r.key) == Some(g))?;
                Some(slot.by_group.remove(i))
            }
        };
        if slot.is_empty() {
            self.records.remove(&key.dst);
        }
        if let Some(r) = &removed {
            self.record_count -= 1;
            self.tombstones.insert(key.clone(), r.version);
        }
        removed
    }

    /// The exact record for `key`, if stored.
    pub fn exact(&self, key: &RecordKey) -> Option<&MappingRecord> {
        self.records.get(&key.dst).and_then(|d| d.get(&key.src))
    }

    /// Pair record, else the destination's default record.
    pub fn lookup(&self, src: &SourceGroup, dst: EndpointId) -> Option<&MappingRecord> {
        let d = self.records.get(&dst)?;
        d.get(src).or(d.any.as_ref())
    }

    /// Pair record, else default record, else a negative record.
    pub fn get_record(&self, src: &SourceGroup, dst: EndpointId) -> MappingRecord {
        match self.lookup(src, dst) {
            Some(r) => r.clone(),
            None => MappingRecord::negative(
                RecordKey {
                    dst,
                    src: src.clone(),
                },
                self.negative_ttl_s,
                0,
            ),
        }
    }

    pub fn records(&self) -> impl Iterator<Item = &MappingRecord> {
        self.records
            .values()
            .flat_map(|d| d.any.iter().chain(d.by_group.iter()))
    }

    pub fn records_of(&self, dst: EndpointId) -> Vec<MappingRecord> {
        self.records
            .get(&dst)
            .map(|d| d.any.iter().chain(d.by_group.iter()).cloned().collect())
            .unwrap_or_default()
    }

    pub fn register_requester(&mut self, key: RecordKey, requester: Requester, now: SimTime, ttl_s: u32) {
        let expires_at = now + SimTime::from_secs(u64::from(ttl_s));
        let list = self.requesters.entry(key.dst).or_default();
        match list
            .iter_mut()
            .find(|e| e.key == key && e.requester.eid == requester.eid)
        {
            Some(e) => {
                e.requester = requester;
                e.expires_at = e.expires_at.max(expires_at);
            }
            None => list.push(RequesterEntry {
                key,
                requester,
                expires_at,
            }),
        }
    }

    /// Live requesters of exactly `key`, sorted.
    pub fn requesters_of(&self, key: &RecordKey, now: SimTime) -> Vec<Requester> {
        let mut v: Vec<Requester> = self
            .requesters
            .get(&key.dst)
            .into_iter()
            .flatten()
            .filter(|e| &e.key == key && e.expires_at > now)
            .map(|e| e.requester)
            .collect();
        v.sort();
        v
    }

    /// Live subscriptions on any key of `dst`.
    pub fn subscriptions(&self, dst: EndpointId, now: SimTime) -> Vec<RequesterEntry> {
        let mut v: Vec<RequesterEntry> = self
            .requesters
            .get(&dst)
            .into_iter()
            .flatten()
            .filter(|e| e.expires_at > now)
            .cloned()
            .collect();
        v.sort_by(|a, b| (&a.key, a.requester).cmp(&(&b.key, b.requester)));
        v
    }

    pub fn prune_requesters(&mut self, now: SimTime) {
        self.requesters.retain(|_, list| {
            list.retain(|e| e.expires_at > now);
            !list.is_empty()
        });
    }

    /// Applies record changes for one destination and reports, for every live
    /// subscription, the record it now resolves to if that changed.
    pub fn apply_changes(
        &mut self,
        upserts: Vec<MappingRecord>,
        removals: Vec<RecordKey>,
        now: SimTime,
    ) -> (Vec<MappingRecord>, Vec<Notification>) {
        let mut dsts: Vec<EndpointId> = upserts
            .iter()
            .map(|r| r.key.dst)
            .chain(removals.iter().map(|k| k.dst))
            .collect();
        dsts.sort();
        dsts.dedup();
        let before: Vec<(RequesterEntry, Option<(RecordKey, u64)>)> = dsts
            .iter()
            .flat_map(|d| self.subscriptions(*d, now))
            .map(|e| {
                let seen = self.lookup(&e.key.src, e.key.dst).map(|r| (r.key.clone(), r.version));
                (e, seen)
            })
            .collect();
        for k in &removals {
            self.remove_record(k);
        }
        let mut stored = Vec::with_capacity(upserts.len());
        for r in upserts {
            stored.push(self.upsert(r));
        }
        let mut notes = Vec::new();
        for (entry, seen) in before {
            let now_rec = self.get_record(&entry.key.src, entry.key.dst);
            let same = seen.is_some_and(|(k, v)| k == now_rec.key && v == now_rec.version);
            if !same {
                notes.push(Notification {
                    requester: entry.requester,
                    key: entry.key,
                    record: now_rec,
                });
            }
        }
        (stored, notes)
    }

    pub fn put_registration(&mut self, reg: NodeRegistration) {
        self.registrations.insert(reg.eid, reg);
    }

    pub fn get_registration(&self, eid: EndpointId) -> Result<&NodeRegistration, NibError> {
        self.registrations.get(&eid).ok_or(NibError::NotRegistered(eid))
    }

    pub fn get_registration_mut(&mut self, eid: EndpointId) -> Option<&mut NodeRegistration> {
        self.registrations.get_mut(&eid)
    }

    pub fn registrations(&self) -> impl Iterator<Item = &NodeRegistration> {
        self.registrations.values()
    }

    /// Drops everything whose destination `keep` rejects.
    pub fn retain(&mut self, mut keep: impl FnMut(EndpointId) -> bool) {
        self.records.retain(|eid, _| keep(*eid));
        self.record_count = self
            .records
            .values()
            .map(|d| usize::from(d.any.is_some()) + d.by_group.len())
            .sum();
        self.registrations.retain(|eid, _| keep(*eid));
        self.requesters.retain(|eid, _| keep(*eid));
        self.tombstones.retain(|k, _| keep(k.dst));
    }

    /// One canonical JSON object per line: registrations sorted by EID, then
    /// records sorted by key.
    pub fn dump(&self, mut w: impl Write) -> std::io::Result<()> {
        let mut regs: Vec<&NodeRegistration> = self.registrations.values().collect();
        regs.sort_by_key(|r| r.eid);
        for r in regs {
            serde_json::to_writer(&mut w, &SnapshotLine::Registration(r.clone()))?;
            w.write_all(b"\n")?;
        }
        let mut recs: Vec<&MappingRecord> = self.records().collect();
        recs.sort_by(|a, b| a.key.cmp(&b.key));
        for r in recs {
            serde_json::to_writer(&mut w, &SnapshotLine::Record(r.clone()))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn load(&mut self, r: impl BufRead) -> Result<usize, NibError> {
        let mut n = 0;
        for (i, line) in r.lines().enumerate() {
            let err = |message: String| NibError::Snapshot { line: i + 1, message };
            let line = line.map_err(|e| err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<SnapshotLine>(&line).map_err(|e| err(e.to_string()))? {
                SnapshotLine::Registration(reg) => self.put_registration(reg),
                SnapshotLine::Record(rec) => {
                    self.put_record(rec).map_err(|e| err(e.to_string()))?;
                }
            }
            n += 1;
        }
        Ok(n)
    }
}
