//! The symmetric controller node: southbound server, bootstrap server,
//! northbound ingestion and the embedded coordination subsystem.
//!
//! Handlers never block. A request that needs state held by another
//! partition becomes a [`Job`] parked under an internal request id until the
//! owner answers (or the internal timeout fires). Processing cost is modelled
//! as a fixed delay per NIB operation: the accumulated delay `acc` is carried
//! through a job and applied to the sends it produces.

pub mod coordination;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::agent::{BootMsg, BootstrapConfig, Hello, InfraNode};
use crate::intent::{
    parse_policy, render_delta_with, render_destination, render_group, EgressPolicy, PolicyError,
    PolicySet, RecordChange, RenderOptions,
};
use crate::model::{
    EndpointId, GroupId, Locator, MappingRecord, NodeRegistration, NodeRole, RecordKey,
    SiteId, SourceGroup, UnderlayAddr,
};
use crate::nib::{NibPartition, Notification, PartitionId, PartitionMap, Requester};
use crate::simnet::{Outbox, SimTime};
use crate::southbound::{
    self, Envelope, Message, NonceCounter, RegistrationDelta, Wire, ACK_DUPLICATE,
    ACK_NOT_REGISTERED,
};

pub use coordination::{CoordinationStore, MembershipView};

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    /// Cost of one NIB operation.
    pub proc: SimTime,
    pub heartbeat: SimTime,
    pub failure_check: SimTime,
    pub miss_limit: u32,
    pub internal_timeout: SimTime,
    pub render: RenderOptions,
    pub spawn_on_failure: bool,
    pub refresh_s: u32,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            proc: SimTime::from_millis(2),
            heartbeat: SimTime::from_secs(2),
            failure_check: SimTime::from_millis(250),
            miss_limit: 3,
            internal_timeout: SimTime::from_secs(1),
            render: RenderOptions::default(),
            spawn_on_failure: true,
            refresh_s: 30,
        }
    }
}

/// A controller node as seen by its peers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Member {
    pub id: u32,
    pub addr: UnderlayAddr,
    pub site: SiteId,
    pub partition: PartitionId,
}

/// An operation executed by the partition that owns the key.
#[derive(Debug, Clone, PartialEq)]
pub enum PartitionOp {
    FetchRegistration {
        eid: EndpointId,
    },
    /// Reads a record; the requester, if any, is subscribed under the
    /// requested key.
    FetchRecord {
        src: SourceGroup,
        dst: EndpointId,
        subscribe: Option<Requester>,
    },
    WriteRecords {
        upserts: Vec<MappingRecord>,
        removals: Vec<RecordKey>,
    },
    WriteRegistration {
        reg: NodeRegistration,
    },
    ApplyUpdate {
        eid: EndpointId,
        delta: RegistrationDelta,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum UpdateOutcome {
    Applied(Written),
    Duplicate,
    NotRegistered,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Written {
    pub stored: Vec<MappingRecord>,
    pub notifications: Vec<Notification>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PartitionReply {
    Registration(Option<NodeRegistration>),
    Record(MappingRecord),
    Written(Written),
    Registered(Result<Written, String>),
    Updated(UpdateOutcome),
}

#[derive(Debug, Clone, PartialEq)]
pub enum InternalMsg {
    Request { id: u64, op: PartitionOp },
    Reply { id: u64, reply: PartitionReply },
    Heartbeat { from: u32, epoch: u64 },
    PartitionMapUpdate { pmap: PartitionMap, members: Vec<Member> },
    PolicyUpdate { text: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerTimer {
    Heartbeat,
    FailureCheck,
    InternalTimeout(u64),
}

/// Work the controller cannot do itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterRequest {
    /// Start a replacement node at `site` for the dead partition.
    Spawn { site: SiteId, replaces: PartitionId },
}

/// Handler context: the cluster journal plus collected outputs.
pub struct Ctx<'a> {
    pub now: SimTime,
    pub coord: &'a mut CoordinationStore,
    pub out: Outbox<Wire, ControllerTimer>,
    pub requests: Vec<ClusterRequest>,
}

impl<'a> Ctx<'a> {
    pub fn new(now: SimTime, coord: &'a mut CoordinationStore) -> Self {
        Self {
            now,
            coord,
            out: Outbox::default(),
            requests: Vec::new(),
        }
    }
}

/// Outcome of one northbound change.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChangeReport {
    pub id: u64,
    pub started: SimTime,
    pub changed: Vec<RecordKey>,
    pub notified: Vec<(RecordKey, Requester)>,
    /// Time from receipt until the notification for the key is sent.
    pub latency_ms: Vec<(RecordKey, f64)>,
    pub errors: Vec<String>,
    /// Partition writes still unacknowledged.
    pub outstanding: usize,
}

impl ChangeReport {
    pub fn is_complete(&self) -> bool {
        self.outstanding == 0
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ControllerStats {
    pub state_requests: u64,
    pub negative_replies: u64,
    pub internal_timeouts: u64,
    pub notifies_sent: u64,
    pub bootstraps: u64,
    pub rejected: u64,
    pub malformed: u64,
}

#[derive(Debug, Clone)]
enum Job {
    Retrieval {
        requester: Requester,
        nonce: u64,
        hint: Option<GroupId>,
        dst: EndpointId,
    },
    Bootstrap {
        to: UnderlayAddr,
        nonce: u64,
        config: Box<BootstrapConfig>,
        reg: Option<NodeRegistration>,
    },
    Update {
        to: UnderlayAddr,
        nonce: u64,
        eid: EndpointId,
        delta: Option<RegistrationDelta>,
    },
    Northbound {
        report: usize,
        owner: PartitionId,
        op: Option<PartitionOp>,
        keys: Vec<RecordKey>,
    },
}

enum Step {
    Op(PartitionId, PartitionOp),
    Done,
}

pub struct Controller {
    pub id: u32,
    pub site: SiteId,
    pub addr: UnderlayAddr,
    pub partition: PartitionId,
    pub pmap: PartitionMap,
    pub members: Vec<Member>,
    pub membership: MembershipView,
    pub nib: NibPartition,
    pub stats: ControllerStats,
    policy: PolicySet,
    cfg: ControllerConfig,
    nonces: NonceCounter,
    next_job: u64,
    jobs: HashMap<u64, Job>,
    reports: Vec<ChangeReport>,
}

impl Controller {
    pub fn new(
        me: Member,
        members: Vec<Member>,
        pmap: PartitionMap,
        policy_text: &str,
        cfg: ControllerConfig,
        now: SimTime,
    ) -> Result<Self, PolicyError> {
        let policy = parse_policy(policy_text)?;
        let membership = MembershipView::new(members.iter().map(|m| m.id), now, cfg.heartbeat, cfg.miss_limit);
        Ok(Self {
            id: me.id,
            site: me.site,
            addr: me.addr,
            partition: me.partition,
            pmap,
            members,
            membership,
            nib: NibPartition::new(me.partition, cfg.render.negative_ttl_s),
            stats: ControllerStats::default(),
            policy,
            cfg,
            nonces: NonceCounter::seeded(0xC0_0000 + u64::from(me.id)),
            next_job: 0,
            jobs: HashMap::new(),
            reports: Vec::new(),
        })
    }

    pub fn member(&self) -> Member {
        Member {
            id: self.id,
            addr: self.addr,
            site: self.site,
            partition: self.partition,
        }
    }

    pub fn policy(&self) -> &PolicySet {
        &self.policy
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn reports(&self) -> &[ChangeReport] {
        &self.reports
    }

    pub fn pending_jobs(&self) -> usize {
        self.jobs.len()
    }

    /// Arms the periodic timers.
    pub fn start(&mut self, ctx: &mut Ctx) {
        ctx.out.timer(self.cfg.heartbeat, ControllerTimer::Heartbeat);
        ctx.out.timer(self.cfg.failure_check, ControllerTimer::FailureCheck);
    }

    /// Fills the local partition with every journaled node it owns.
    pub fn rebuild(&mut self, coord: &CoordinationStore, now: SimTime) {
        let (me, pmap) = (self.partition, self.pmap.clone());
        self.nib.retain(|e| pmap.owns(me, e));
        self.repopulate(coord, now, |e| pmap.owns(me, e));
    }

    fn repopulate(&mut self, coord: &CoordinationStore, now: SimTime, take: impl Fn(EndpointId) -> bool) {
        for reg in coord.registrations().iter().filter(|r| take(r.eid)) {
            self.nib.put_registration(reg.clone());
            rerender(&mut self.nib, &self.policy, coord, &self.cfg.render, reg, now);
        }
    }

    fn locator(&self) -> Locator {
        Locator::new(self.site, self.addr, "ctl")
    }

    fn peer(&self, p: PartitionId) -> Option<Member> {
        self.members.iter().find(|m| m.partition == p).copied()
    }

    fn south(&mut self, to: UnderlayAddr, message: Message, delay: SimTime, ctx: &mut Ctx) {
        let env = Envelope {
            sender: self.locator(),
            timestamp: ctx.now + delay,
            message,
        };
        ctx.out.send(self.addr, to, Wire::South(southbound::encode(&env)), delay);
    }

    fn internal(&self, to: UnderlayAddr, msg: InternalMsg, delay: SimTime, ctx: &mut Ctx) {
        ctx.out.send(self.addr, to, Wire::Internal(Box::new(msg)), delay);
    }

    fn notify(&mut self, notes: Vec<Notification>, delay: SimTime, ctx: &mut Ctx) {
        for n in notes {
            let nonce = self.nonces.fresh();
            self.stats.notifies_sent += 1;
            self.south(
                n.requester.reply_to,
                Message::Notify {
                    key: n.key,
                    record: n.record,
                    nonce,
                },
                delay,
                ctx,
            );
        }
    }

    /// Pushes freshly stored records to every re-encapsulation node.
    fn push_to_reencap(&mut self, stored: &[MappingRecord], delay: SimTime, ctx: &mut Ctx) {
        let targets: Vec<UnderlayAddr> = ctx
            .coord
            .infra(NodeRole::ReEncap)
            .iter()
            .filter_map(|r| r.locators.iter().find(|l| l.status.is_up()).map(|l| l.underlay_addr))
            .collect();
        for to in targets {
            for rec in stored.iter().filter(|r| !r.negative) {
                let nonce = self.nonces.fresh();
                self.south(
                    to,
                    Message::Notify {
                        key: rec.key.clone(),
                        record: rec.clone(),
                        nonce,
                    },
                    delay,
                    ctx,
                );
            }
        }
    }

    pub fn on_wire(&mut self, from: UnderlayAddr, wire: Wire, ctx: &mut Ctx) {
        match wire {
            Wire::South(bytes) => match southbound::decode(&bytes) {
                Ok(env) => self.on_south(from, env, ctx),
                Err(_) => self.stats.malformed += 1,
            },
            Wire::Boot(BootMsg::Hello(h)) => self.on_hello(from, h, ctx),
            Wire::Boot(BootMsg::ConfigAck { nonce }) => {
                ctx.out.send(self.addr, from, Wire::Boot(BootMsg::AckConfirm { nonce }), SimTime::ZERO);
            }
            Wire::Boot(_) | Wire::Data(_) => {}
            Wire::Internal(m) => self.on_internal(from, *m, ctx),
        }
    }

    fn on_south(&mut self, from: UnderlayAddr, env: Envelope, ctx: &mut Ctx) {
        match env.message {
            Message::StateRequest {
                src_eid,
                src_group_hint,
                dst_eid,
                nonce,
            } => {
                self.stats.state_requests += 1;
                let job = Job::Retrieval {
                    requester: Requester {
                        eid: src_eid,
                        reply_to: from,
                    },
                    nonce,
                    hint: src_group_hint,
                    dst: dst_eid,
                };
                self.drive(job, None, SimTime::ZERO, ctx);
            }
            Message::StateUpdate { eid, delta, nonce } => {
                let job = Job::Update {
                    to: from,
                    nonce,
                    eid,
                    delta: Some(delta),
                };
                self.drive(job, None, SimTime::ZERO, ctx);
            }
            _ => {}
        }
    }

    fn on_hello(&mut self, from: UnderlayAddr, h: Hello, ctx: &mut Ctx) {
        let p = self.cfg.proc;
        let nonce = h.nonce;
        match self.prepare_bootstrap(h, ctx.coord) {
            Ok((reg, config)) => {
                let job = Job::Bootstrap {
                    to: from,
                    nonce,
                    config: Box::new(config),
                    reg: Some(reg),
                };
                self.drive(job, None, p, ctx);
            }
            Err(reason) => {
                self.stats.rejected += 1;
                ctx.out.send(self.addr, from, Wire::Boot(BootMsg::Rejected { nonce, reason }), p);
            }
        }
    }

    fn prepare_bootstrap(
        &self,
        h: Hello,
        coord: &mut CoordinationStore,
    ) -> Result<(NodeRegistration, BootstrapConfig), String> {
        let eid = match h.eid {
            Some(e) => e,
            None => {
                let e = self.allocate(h.group_hint.as_ref(), h.device_id, coord)?;
                coord.lease(e, h.device_id);
                e
            }
        };
        let mut reg = NodeRegistration {
            eid,
            group: h.group_hint.clone().unwrap_or_else(GroupId::proxy_pool),
            locators: h.locators,
            attributes: h.attributes,
            role: h.role,
            device_id: h.device_id,
            update_seq: h.update_seq,
        };
        let group = render_group(&self.policy, &reg).ok_or_else(|| format!("{eid} matches no group"))?;
        reg.group = group.clone();
        reg.validate().map_err(|e| e.to_string())?;
        let egress = render_destination(&self.policy, &reg, &group, coord.hops(), &self.cfg.render)
            .egress
            .unwrap_or(EgressPolicy {
                owner: eid,
                labels: Vec::new(),
                version: 1,
            });
        let infra = |role| {
            coord
                .infra(role)
                .into_iter()
                .map(|r| InfraNode {
                    eid: r.eid,
                    locators: r.locators.clone(),
                })
                .collect()
        };
        let config = BootstrapConfig {
            assigned: eid,
            group,
            controllers: self.controller_list(),
            egress,
            reencap_nodes: infra(NodeRole::ReEncap),
            proxy_nodes: infra(NodeRole::Proxy),
            refresh_s: self.cfg.refresh_s,
        };
        Ok((reg, config))
    }

    /// First free address of the hinted group's first prefix.
    fn allocate(&self, hint: Option<&GroupId>, device: u64, coord: &CoordinationStore) -> Result<EndpointId, String> {
        let g = hint.ok_or("no address requested and no group hint")?;
        let spec = self.policy.group(g).ok_or_else(|| format!("unknown group {g}"))?;
        let prefix = spec.members.first().ok_or_else(|| format!("group {g} has no prefix"))?;
        let span = prefix.size().min(1 << 16);
        (1..span)
            .map(|i| EndpointId(prefix.addr().0.wrapping_add(i as u32)))
            .find(|e| coord.is_free_for(*e, device))
            .ok_or_else(|| format!("group {g} has no free address"))
    }

    /// This node first, then the other live nodes by id.
    fn controller_list(&self) -> Vec<Locator> {
        let mut out = vec![self.locator()];
        let mut rest: Vec<&Member> = self
            .members
            .iter()
            .filter(|m| m.id != self.id && self.membership.live.contains(&m.id))
            .collect();
        rest.sort_by_key(|m| m.id);
        out.extend(rest.into_iter().map(|m| Locator::new(m.site, m.addr, "ctl")));
        out
    }

    fn on_internal(&mut self, from: UnderlayAddr, msg: InternalMsg, ctx: &mut Ctx) {
        match msg {
            InternalMsg::Request { id, op } => {
                let reply = self.serve(op, ctx);
                let delay = SimTime(self.cfg.proc.0 * 2);
                self.internal(from, InternalMsg::Reply { id, reply }, delay, ctx);
            }
            InternalMsg::Reply { id, reply } => {
                if let Some(job) = self.jobs.remove(&id) {
                    self.drive(job, Some(reply), self.cfg.proc, ctx);
                }
            }
            InternalMsg::Heartbeat { from, .. } => self.membership.heard(from, ctx.now),
            InternalMsg::PartitionMapUpdate { pmap, members } => self.install_pmap(pmap, members, ctx),
            InternalMsg::PolicyUpdate { text } => {
                if let Ok(p) = parse_policy(&text) {
                    self.policy = p;
                }
            }
        }
    }

    /// Runs `job` until it finishes or parks on a remote partition.
    fn drive(&mut self, mut job: Job, mut reply: Option<PartitionReply>, mut acc: SimTime, ctx: &mut Ctx) {
        loop {
            match self.step(&mut job, reply.take(), acc, ctx) {
                Step::Done => return,
                Step::Op(owner, op) if owner == self.partition => {
                    reply = Some(self.serve(op, ctx));
                    acc += self.cfg.proc;
                }
                Step::Op(owner, op) => {
                    let Some(peer) = self.peer(owner) else {
                        self.stats.internal_timeouts += 1;
                        return;
                    };
                    let id = self.next_job;
                    self.next_job += 1;
                    self.internal(peer.addr, InternalMsg::Request { id, op }, acc, ctx);
                    ctx.out.timer(acc + self.cfg.internal_timeout, ControllerTimer::InternalTimeout(id));
                    self.jobs.insert(id, job);
                    return;
                }
            }
        }
    }

    fn step(&mut self, job: &mut Job, reply: Option<PartitionReply>, acc: SimTime, ctx: &mut Ctx) -> Step {
        match job {
            Job::Retrieval {
                requester,
                nonce,
                hint,
                dst,
            } => match reply {
                None => Step::Op(
                    self.pmap.partition_for(requester.eid),
                    PartitionOp::FetchRegistration { eid: requester.eid },
                ),
                Some(PartitionReply::Registration(reg)) => {
                    let src = reg
                        .and_then(|r| render_group(&self.policy, &r))
                        .or_else(|| hint.clone())
                        .map_or(SourceGroup::Any, SourceGroup::Group);
                    Step::Op(
                        self.pmap.partition_for(*dst),
                        PartitionOp::FetchRecord {
                            src,
                            dst: *dst,
                            subscribe: Some(*requester),
                        },
                    )
                }
                Some(PartitionReply::Record(record)) => {
                    let message = if record.negative {
                        self.stats.negative_replies += 1;
                        Message::NegativeReply {
                            dst: *dst,
                            ttl_s: record.ttl_s,
                            nonce: *nonce,
                        }
                    } else {
                        Message::StateReply { record, nonce: *nonce }
                    };
                    self.south(requester.reply_to, message, acc, ctx);
                    Step::Done
                }
                Some(_) => Step::Done,
            },
            Job::Bootstrap { to, nonce, config, reg } => match reply {
                None => {
                    let reg = reg.take().expect("registration present at start");
                    Step::Op(self.pmap.partition_for(reg.eid), PartitionOp::WriteRegistration { reg })
                }
                Some(PartitionReply::Registered(Ok(w))) => {
                    self.stats.bootstraps += 1;
                    let msg = BootMsg::Config {
                        nonce: *nonce,
                        config: (**config).clone(),
                    };
                    ctx.out.send(self.addr, *to, Wire::Boot(msg), acc);
                    self.push_to_reencap(&w.stored, acc, ctx);
                    self.notify(w.notifications, acc, ctx);
                    Step::Done
                }
                Some(PartitionReply::Registered(Err(reason))) => {
                    self.stats.rejected += 1;
                    let msg = BootMsg::Rejected { nonce: *nonce, reason };
                    ctx.out.send(self.addr, *to, Wire::Boot(msg), acc);
                    Step::Done
                }
                Some(_) => Step::Done,
            },
            Job::Update { to, nonce, eid, delta } => match reply {
                None => Step::Op(
                    self.pmap.partition_for(*eid),
                    PartitionOp::ApplyUpdate {
                        eid: *eid,
                        delta: delta.take().expect("delta present at start"),
                    },
                ),
                Some(PartitionReply::Updated(outcome)) => {
                    let flags = match outcome {
                        UpdateOutcome::Applied(w) => {
                            self.push_to_reencap(&w.stored, acc, ctx);
                            self.notify(w.notifications, acc, ctx);
                            0
                        }
                        UpdateOutcome::Duplicate => ACK_DUPLICATE,
                        UpdateOutcome::NotRegistered => ACK_NOT_REGISTERED,
                    };
                    self.south(*to, Message::Ack { nonce: *nonce, flags }, acc, ctx);
                    Step::Done
                }
                Some(_) => Step::Done,
            },
            Job::Northbound { report, owner, op, keys } => match reply {
                None => Step::Op(*owner, op.take().expect("op present at start")),
                Some(PartitionReply::Written(w)) => {
                    let ms = (ctx.now + acc - self.reports[*report].started).as_millis_f64();
                    for k in keys.iter() {
                        ctx.out.metric("update_ms", ms, acc);
                        self.reports[*report].latency_ms.push((k.clone(), ms));
                    }
                    for n in &w.notifications {
                        self.reports[*report].notified.push((n.key.clone(), n.requester));
                    }
                    self.reports[*report].outstanding -= 1;
                    self.push_to_reencap(&w.stored, acc, ctx);
                    self.notify(w.notifications, acc, ctx);
                    Step::Done
                }
                Some(_) => Step::Done,
            },
        }
    }

    /// Executes `op` against the local partition.
    fn serve(&mut self, op: PartitionOp, ctx: &mut Ctx) -> PartitionReply {
        let now = ctx.now;
        match op {
            PartitionOp::FetchRegistration { eid } => {
                PartitionReply::Registration(self.nib.get_registration(eid).ok().cloned())
            }
            PartitionOp::FetchRecord { src, dst, subscribe } => {
                let record = self.nib.get_record(&src, dst);
                if let Some(r) = subscribe {
                    self.nib
                        .register_requester(RecordKey { dst, src }, r, now, record.ttl_s);
                }
                PartitionReply::Record(record)
            }
            PartitionOp::WriteRecords { upserts, removals } => {
                let (stored, notifications) = self.nib.apply_changes(upserts, removals, now);
                PartitionReply::Written(Written { stored, notifications })
            }
            PartitionOp::WriteRegistration { reg } => {
                if let Ok(old) = self.nib.get_registration(reg.eid) {
                    if old.device_id != reg.device_id && old.locators.iter().any(|l| l.status.is_up()) {
                        return PartitionReply::Registered(Err(format!(
                            "{} is registered to another device",
                            reg.eid
                        )));
                    }
                }
                self.nib.put_registration(reg.clone());
                ctx.coord.upsert_registration(reg.clone());
                let w = rerender(&mut self.nib, &self.policy, ctx.coord, &self.cfg.render, &reg, now);
                PartitionReply::Registered(Ok(w))
            }
            PartitionOp::ApplyUpdate { eid, delta } => {
                let Ok(current) = self.nib.get_registration(eid) else {
                    return PartitionReply::Updated(UpdateOutcome::NotRegistered);
                };
                if delta.seq <= current.update_seq {
                    return PartitionReply::Updated(UpdateOutcome::Duplicate);
                }
                let mut reg = current.clone();
                apply_delta(&mut reg, &delta);
                self.nib.put_registration(reg.clone());
                ctx.coord.upsert_registration(reg.clone());
                let w = rerender(&mut self.nib, &self.policy, ctx.coord, &self.cfg.render, &reg, now);
                PartitionReply::Updated(UpdateOutcome::Applied(w))
            }
        }
    }

    /// Ingests a new policy document and starts writing the changed records
    /// to their owners. Returns the index of the change report.
    pub fn apply_northbound(&mut self, text: &str, ctx: &mut Ctx) -> Result<usize, PolicyError> {
        let new = parse_policy(text)?;
        let delta = render_delta_with(&self.policy, &new, ctx.coord.registrations(), &self.cfg.render);
        self.policy = new;
        ctx.coord.set_policy(text);
        let peers: Vec<UnderlayAddr> = self.members.iter().filter(|m| m.id != self.id).map(|m| m.addr).collect();
        for to in peers {
            self.internal(to, InternalMsg::PolicyUpdate { text: text.to_string() }, SimTime::ZERO, ctx);
        }
        let mut by_owner: BTreeMap<PartitionId, (Vec<MappingRecord>, Vec<RecordKey>)> = BTreeMap::new();
        for (key, change) in delta.changes.iter() {
            let slot = by_owner.entry(self.pmap.partition_for(key.dst)).or_default();
            match change {
                RecordChange::Upsert(r) => slot.0.push(r.clone()),
                RecordChange::Remove => slot.1.push(key.clone()),
            }
        }
        let report = self.reports.len();
        self.reports.push(ChangeReport {
            id: report as u64,
            started: ctx.now,
            changed: delta.changes.keys().cloned().collect(),
            errors: delta.errors.iter().map(|e| e.to_string()).collect(),
            outstanding: by_owner.len(),
            ..ChangeReport::default()
        });
        for (owner, (upserts, removals)) in by_owner {
            let keys = upserts.iter().map(|r| r.key.clone()).chain(removals.iter().cloned()).collect();
            let job = Job::Northbound {
                report,
                owner,
                op: Some(PartitionOp::WriteRecords { upserts, removals }),
                keys,
            };
            self.drive(job, None, self.cfg.proc, ctx);
        }
        Ok(report)
    }

    pub fn on_timer(&mut self, timer: ControllerTimer, ctx: &mut Ctx) {
        match timer {
            ControllerTimer::Heartbeat => {
                let epoch = self.pmap.epoch;
                let peers: Vec<UnderlayAddr> = self
                    .members
                    .iter()
                    .filter(|m| m.id != self.id && self.membership.live.contains(&m.id))
                    .map(|m| m.addr)
                    .collect();
                for to in peers {
                    self.internal(to, InternalMsg::Heartbeat { from: self.id, epoch }, SimTime::ZERO, ctx);
                }
                ctx.out.timer(self.cfg.heartbeat, ControllerTimer::Heartbeat);
            }
            ControllerTimer::FailureCheck => {
                let dead = self.membership.check(self.id, ctx.now);
                if !dead.is_empty() && self.membership.leader() == Some(self.id) {
                    for d in dead {
                        self.on_peer_failure(d, ctx);
                    }
                }
                ctx.out.timer(self.cfg.failure_check, ControllerTimer::FailureCheck);
            }
            ControllerTimer::InternalTimeout(id) => {
                if self.jobs.remove(&id).is_some() {
                    self.stats.internal_timeouts += 1;
                    ctx.out.metric("internal_timeout", 1.0, SimTime::ZERO);
                }
            }
        }
    }

    /// Leader only: replace or split the dead node's ranges.
    fn on_peer_failure(&mut self, dead: u32, ctx: &mut Ctx) {
        let Some(gone) = self.members.iter().find(|m| m.id == dead).copied() else {
            return;
        };
        if self.cfg.spawn_on_failure {
            ctx.requests.push(ClusterRequest::Spawn {
                site: gone.site,
                replaces: gone.partition,
            });
            return;
        }
        let survivors: Vec<PartitionId> = self
            .members
            .iter()
            .filter(|m| m.id != dead && self.membership.live.contains(&m.id))
            .map(|m| m.partition)
            .collect();
        let pmap = self.pmap.split(gone.partition, &survivors);
        let members: Vec<Member> = self.members.iter().filter(|m| m.id != dead).copied().collect();
        self.broadcast_pmap(pmap, members, ctx);
    }

    /// Leader only: a replacement for `replaces` is up as `fresh`.
    pub fn on_spawned(&mut self, replaces: PartitionId, fresh: Member, ctx: &mut Ctx) {
        let pmap = self.pmap.reassign(replaces, fresh.partition);
        let mut members: Vec<Member> = self.members.iter().filter(|m| m.partition != replaces).copied().collect();
        members.push(fresh);
        self.broadcast_pmap(pmap, members, ctx);
    }

    /// Next free partition index, for spawning.
    pub fn next_partition_index(&self) -> u32 {
        self.members.iter().map(|m| m.partition.index + 1).max().unwrap_or(0)
    }

    fn broadcast_pmap(&mut self, pmap: PartitionMap, members: Vec<Member>, ctx: &mut Ctx) {
        for m in members.iter().filter(|m| m.id != self.id) {
            let msg = InternalMsg::PartitionMapUpdate {
                pmap: pmap.clone(),
                members: members.clone(),
            };
            self.internal(m.addr, msg, self.cfg.proc, ctx);
        }
        self.install_pmap(pmap, members, ctx);
    }

    fn install_pmap(&mut self, pmap: PartitionMap, members: Vec<Member>, ctx: &mut Ctx) {
        if pmap.epoch <= self.pmap.epoch {
            return;
        }
        let old = std::mem::replace(&mut self.pmap, pmap);
        let now = ctx.now;
        for m in &members {
            if !self.membership.live.contains(&m.id) {
                self.membership.add(m.id, now);
            }
        }
        let ids: Vec<u32> = self.membership.live.iter().copied().collect();
        for id in ids {
            if !members.iter().any(|m| m.id == id) {
                self.membership.remove(id);
            }
        }
        self.membership.epoch = self.membership.epoch.max(self.pmap.epoch);
        self.members = members;
        let me = self.partition;
        let new = self.pmap.clone();
        self.nib.retain(|e| new.owns(me, e));
        self.repopulate(ctx.coord, now, |e| new.owns(me, e) && !old.owns(me, e));
    }
}

fn apply_delta(reg: &mut NodeRegistration, delta: &RegistrationDelta) {
    for c in &delta.locators {
        if let Some(l) = reg.locators.iter_mut().find(|l| l.label == c.label) {
            l.status = c.status;
        }
    }
    for a in &delta.attributes {
        match &a.value {
            Some(v) => {
                reg.attributes.insert(a.key.clone(), v.clone());
            }
            None => {
                reg.attributes.remove(&a.key);
            }
        }
    }
    reg.update_seq = delta.seq;
}

/// Re-renders the records keyed on `reg` and writes only what changed.
fn rerender(
    nib: &mut NibPartition,
    policy: &PolicySet,
    coord: &CoordinationStore,
    opts: &RenderOptions,
    reg: &NodeRegistration,
    now: SimTime,
) -> Written {
    let existing = nib.records_of(reg.eid);
    let fresh = match render_group(policy, reg) {
        Some(g) if !policy.is_empty() => render_destination(policy, reg, &g, coord.hops(), opts).records,
        _ => Vec::new(),
    };
    let upserts: Vec<MappingRecord> = fresh
        .iter()
        .filter(|r| !existing.iter().any(|e| e.key == r.key && e.same_content(r)))
        .cloned()
        .collect();
    let removals: Vec<RecordKey> = existing
        .iter()
        .filter(|e| !fresh.iter().any(|r| r.key == e.key))
        .map(|e| e.key.clone())
        .collect();
    if upserts.is_empty() && removals.is_empty() {
        return Written::default();
    }
    let (stored, notifications) = nib.apply_changes(upserts, removals, now);
    Written { stored, notifications }
}
