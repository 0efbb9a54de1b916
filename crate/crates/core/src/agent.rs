//! The data-plane node: bootstrap, mapping cache with buffer-or-redirect
//! resolution, encapsulation, peer notification, periodic re-request and
//! controller failover. The same state machine runs re-encapsulation and
//! proxy nodes.

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::intent::EgressPolicy;
use crate::model::{
    apply_label_list, select_locator, EncapsulatedPacket, EndpointId, GroupId, LinkStatus, Locator,
    MappingRecord, NodeRole, OverlayPacket, RecordKey, SourceGroup, UnderlayAddr,
};
use crate::simnet::{Outbox, SimTime};
use crate::southbound::{
    self, Envelope, LocatorChange, Message, NonceCounter, RegistrationDelta, RetransmitPolicy,
    RetryState, RetryStep, Wire, ACK_NOT_REGISTERED,
};

/// What an end-node does with traffic for a destination it has no state for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissMode {
    #[default]
    Buffer,
    Redirect,
}

/// An infrastructure node and where to reach it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfraNode {
    pub eid: EndpointId,
    pub locators: Vec<Locator>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub assigned: EndpointId,
    pub group: GroupId,
    /// Serving controller first.
    pub controllers: Vec<Locator>,
    pub egress: EgressPolicy,
    pub reencap_nodes: Vec<InfraNode>,
    pub proxy_nodes: Vec<InfraNode>,
    pub refresh_s: u32,
}

impl BootstrapConfig {
    pub fn is_valid(&self) -> bool {
        !self.controllers.is_empty() && self.refresh_s > 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hello {
    pub device_id: u64,
    pub eid: Option<EndpointId>,
    pub group_hint: Option<GroupId>,
    pub locators: Vec<Locator>,
    pub attributes: BTreeMap<String, String>,
    pub role: NodeRole,
    pub update_seq: u64,
    pub nonce: u64,
}

/// The reliable configuration exchange: hello, config, ack, confirm.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum BootMsg {
    Hello(Hello),
    Config { nonce: u64, config: BootstrapConfig },
    Rejected { nonce: u64, reason: String },
    ConfigAck { nonce: u64 },
    AckConfirm { nonce: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentTimer {
    Request { nonce: u64, sends: u32 },
    Update { nonce: u64, sends: u32 },
    Boot { nonce: u64, sends: u32 },
    Refresh,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub name: String,
    pub device_id: u64,
    pub role: NodeRole,
    pub eid: Option<EndpointId>,
    pub group: Option<GroupId>,
    pub interfaces: Vec<Locator>,
    pub attributes: BTreeMap<String, String>,
    /// Provisioned controller addresses, tried in order.
    pub controllers: Vec<UnderlayAddr>,
    pub miss_mode: MissMode,
    pub buffer_cap: usize,
    pub peer_window: SimTime,
    pub retransmit: RetransmitPolicy,
    pub refresh_tick: SimTime,
    /// Keep an [`AgentEvent`] log.
    pub log_events: bool,
}

impl AgentConfig {
    pub fn new(name: &str, device_id: u64, interfaces: Vec<Locator>, controllers: Vec<UnderlayAddr>) -> Self {
        Self {
            name: name.to_string(),
            device_id,
            role: NodeRole::EndNode,
            eid: None,
            group: None,
            interfaces,
            attributes: BTreeMap::new(),
            controllers,
            miss_mode: MissMode::Buffer,
            buffer_cap: 64,
            peer_window: SimTime::from_secs(120),
            retransmit: RetransmitPolicy::default(),
            refresh_tick: SimTime::from_secs(1),
            log_events: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AgentEvent {
    Encapsulated {
        at: SimTime,
        dst: EndpointId,
        key: RecordKey,
        version: u64,
        fetched_at: SimTime,
        outer_src: Locator,
        outer_dst: UnderlayAddr,
        hops: Vec<EndpointId>,
        flow_tag: u64,
    },
    Redirected {
        at: SimTime,
        dst: EndpointId,
        flow_tag: u64,
    },
    ToProxy {
        at: SimTime,
        dst: EndpointId,
        flow_tag: u64,
    },
    Delivered {
        at: SimTime,
        src: EndpointId,
        dst: EndpointId,
        flow_tag: u64,
        outer_src: Locator,
    },
    /// A re-encapsulation node forwarded a packet.
    Forwarded {
        at: SimTime,
        hop: EndpointId,
        dst: EndpointId,
        flow_tag: u64,
        next: UnderlayAddr,
    },
    ProxyEgress {
        at: SimTime,
        src: EndpointId,
        dst: EndpointId,
        flow_tag: u64,
        nat: (UnderlayAddr, u16),
    },
    Notified {
        at: SimTime,
        key: RecordKey,
        version: u64,
        applied: bool,
    },
    PeerUpdate {
        at: SimTime,
        peer: EndpointId,
    },
    Dropped {
        at: SimTime,
        dst: EndpointId,
        flow_tag: u64,
        reason: &'static str,
    },
    Bootstrapped {
        at: SimTime,
        eid: EndpointId,
        controller: UnderlayAddr,
    },
    Rejected {
        at: SimTime,
        reason: String,
    },
    Failover {
        at: SimTime,
        from: UnderlayAddr,
        to: UnderlayAddr,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheEntry {
    pub record: MappingRecord,
    pub fetched_at: SimTime,
    pub next_refresh: SimTime,
    pub used: bool,
}

impl CacheEntry {
    fn new(record: MappingRecord, fetched_at: SimTime) -> Self {
        let half = SimTime::from_millis(u64::from(record.ttl_s) * 500);
        Self {
            record,
            fetched_at,
            next_refresh: fetched_at + half,
            used: false,
        }
    }

    pub fn expires_at(&self) -> SimTime {
        self.fetched_at + SimTime::from_secs(u64::from(self.record.ttl_s))
    }

    pub fn is_fresh(&self, now: SimTime) -> bool {
        now < self.expires_at()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AgentStats {
    pub requests: u64,
    pub replies: u64,
    pub negatives: u64,
    pub notifies: u64,
    pub buffered: u64,
    pub redirected: u64,
    pub dropped: u64,
    pub failovers: u64,
    pub unresolved: u64,
}

#[derive(Debug, Clone)]
struct Outstanding {
    controller: UnderlayAddr,
    retry: RetryState,
    sends: u32,
    tries: usize,
    first_sent: SimTime,
    refresh: bool,
    redirect: bool,
    buffer: VecDeque<OverlayPacket>,
}

#[derive(Debug, Clone)]
struct PendingUpdate {
    delta: RegistrationDelta,
    controller: UnderlayAddr,
    retry: RetryState,
    sends: u32,
    tries: usize,
}

#[derive(Debug, Clone)]
enum Phase {
    Idle,
    Hello {
        nonce: u64,
        targets: Vec<UnderlayAddr>,
        target: usize,
        retry: RetryState,
        sends: u32,
        started: SimTime,
    },
    Confirm {
        nonce: u64,
        retry: RetryState,
        sends: u32,
        started: SimTime,
        controller: UnderlayAddr,
    },
    Ready,
}

pub type AgentOutbox = Outbox<Wire, AgentTimer>;

pub struct Agent {
    pub cfg: AgentConfig,
    pub stats: AgentStats,
    interfaces: Vec<Locator>,
    phase: Phase,
    config: Option<BootstrapConfig>,
    eid: Option<EndpointId>,
    active: usize,
    update_seq: u64,
    nonces: NonceCounter,
    cache: BTreeMap<EndpointId, CacheEntry>,
    /// Pending resolutions keyed by (source, destination).
    pending: BTreeMap<(EndpointId, EndpointId), Outstanding>,
    by_nonce: HashMap<u64, (EndpointId, EndpointId)>,
    updates: BTreeMap<u64, PendingUpdate>,
    peers: BTreeMap<EndpointId, (SimTime, UnderlayAddr)>,
    /// Re-encapsulation state: pushed or requested records.
    pushed: BTreeMap<RecordKey, MappingRecord>,
    resolved: HashMap<(EndpointId, EndpointId), RecordKey>,
    nat: BTreeMap<EndpointId, (UnderlayAddr, u16)>,
    refresh_armed: bool,
    log: Vec<AgentEvent>,
}

impl Agent {
    pub fn new(cfg: AgentConfig) -> Self {
        let nonces = NonceCounter::seeded(cfg.device_id);
        Self {
            interfaces: cfg.interfaces.clone(),
            eid: cfg.eid,
            cfg,
            stats: AgentStats::default(),
            phase: Phase::Idle,
            config: None,
            active: 0,
            update_seq: 0,
            nonces,
            cache: BTreeMap::new(),
            pending: BTreeMap::new(),
            by_nonce: HashMap::new(),
            updates: BTreeMap::new(),
            peers: BTreeMap::new(),
            pushed: BTreeMap::new(),
            resolved: HashMap::new(),
            nat: BTreeMap::new(),
            refresh_armed: false,
            log: Vec::new(),
        }
    }

    pub fn eid(&self) -> Option<EndpointId> {
        self.eid
    }

    pub fn config(&self) -> Option<&BootstrapConfig> {
        self.config.as_ref()
    }

    pub fn is_ready(&self) -> bool {
        matches!(self.phase, Phase::Ready)
    }

    pub fn interfaces(&self) -> &[Locator] {
        &self.interfaces
    }

    pub fn cache(&self) -> &BTreeMap<EndpointId, CacheEntry> {
        &self.cache
    }

    pub fn pushed_state(&self) -> &BTreeMap<RecordKey, MappingRecord> {
        &self.pushed
    }

    pub fn nat_table(&self) -> &BTreeMap<EndpointId, (UnderlayAddr, u16)> {
        &self.nat
    }

    pub fn log(&self) -> &[AgentEvent] {
        &self.log
    }

    pub fn take_log(&mut self) -> Vec<AgentEvent> {
        std::mem::take(&mut self.log)
    }

    pub fn pending_requests(&self) -> usize {
        self.pending.len()
    }

    pub fn active_controller(&self) -> Option<UnderlayAddr> {
        self.controllers().get(self.active).copied()
    }

    pub fn recent_peers(&self, now: SimTime) -> Vec<EndpointId> {
        self.peers
            .iter()
            .filter(|(_, (t, _))| now.saturating_sub(*t) <= self.cfg.peer_window)
            .map(|(e, _)| *e)
            .collect()
    }

    fn controllers(&self) -> Vec<UnderlayAddr> {
        match &self.config {
            Some(c) => c.controllers.iter().map(|l| l.underlay_addr).collect(),
            None => self.cfg.controllers.clone(),
        }
    }

    fn record(&mut self, ev: AgentEvent) {
        if self.cfg.log_events {
            self.log.push(ev);
        }
    }

    fn control_locator(&self) -> Locator {
        self.interfaces
            .iter()
            .find(|l| l.status.is_up())
            .unwrap_or(&self.interfaces[0])
            .clone()
    }

    fn south(&mut self, to: UnderlayAddr, message: Message, now: SimTime, out: &mut AgentOutbox) {
        let sender = self.control_locator();
        let from = sender.underlay_addr;
        let env = Envelope {
            sender,
            timestamp: now,
            message,
        };
        out.send(from, to, Wire::South(southbound::encode(&env)), SimTime::ZERO);
    }

    fn boot_send(&self, to: UnderlayAddr, msg: BootMsg, out: &mut AgentOutbox) {
        out.send(self.control_locator().underlay_addr, to, Wire::Boot(msg), SimTime::ZERO);
    }

    // ---- bootstrap ----

    /// Bootstraps against the provisioned controller list.
    pub fn start(&mut self, now: SimTime, out: &mut AgentOutbox) {
        let targets = self.cfg.controllers.clone();
        self.bootstrap_via(targets, now, out);
    }

    /// Bootstraps (again) against `targets`, in order.
    pub fn bootstrap_via(&mut self, targets: Vec<UnderlayAddr>, now: SimTime, out: &mut AgentOutbox) {
        assert!(!targets.is_empty(), "no controller to bootstrap against");
        let nonce = self.nonces.fresh();
        let (retry, wait) = RetryState::start(&self.cfg.retransmit, now);
        self.send_hello(targets[0], nonce, out);
        out.timer(wait, AgentTimer::Boot { nonce, sends: 1 });
        self.phase = Phase::Hello {
            nonce,
            targets,
            target: 0,
            retry,
            sends: 1,
            started: now,
        };
    }

    fn send_hello(&self, to: UnderlayAddr, nonce: u64, out: &mut AgentOutbox) {
        let hello = Hello {
            device_id: self.cfg.device_id,
            eid: self.eid,
            group_hint: self.cfg.group.clone(),
            locators: self.interfaces.clone(),
            attributes: self.cfg.attributes.clone(),
            role: self.cfg.role,
            update_seq: self.update_seq,
            nonce,
        };
        self.boot_send(to, BootMsg::Hello(hello), out);
    }

    fn on_boot(&mut self, from: UnderlayAddr, msg: BootMsg, now: SimTime, out: &mut AgentOutbox) {
        match (msg, &self.phase) {
            (BootMsg::Config { nonce, config }, Phase::Hello { nonce: n, started, .. }) if nonce == *n => {
                let started = *started;
                if !config.is_valid() {
                    return;
                }
                self.eid = Some(config.assigned);
                self.config = Some(config);
                self.active = 0;
                self.boot_send(from, BootMsg::ConfigAck { nonce }, out);
                let (retry, wait) = RetryState::start(&self.cfg.retransmit, now);
                out.timer(wait, AgentTimer::Boot { nonce, sends: 1 });
                self.phase = Phase::Confirm {
                    nonce,
                    retry,
                    sends: 1,
                    started,
                    controller: from,
                };
            }
            (BootMsg::Rejected { nonce, reason }, Phase::Hello { nonce: n, .. }) if nonce == *n => {
                self.record(AgentEvent::Rejected { at: now, reason });
                out.metric("bootstrap_rejected", 1.0, SimTime::ZERO);
                self.phase = Phase::Idle;
            }
            (BootMsg::AckConfirm { nonce }, Phase::Confirm { nonce: n, started, .. }) if nonce == *n => {
                let ms = (now - *started).as_millis_f64();
                out.metric("bootstrap_ms", ms, SimTime::ZERO);
                let eid = self.eid.expect("assigned");
                self.record(AgentEvent::Bootstrapped {
                    at: now,
                    eid,
                    controller: from,
                });
                self.phase = Phase::Ready;
                if !self.refresh_armed {
                    self.refresh_armed = true;
                    out.timer(self.cfg.refresh_tick, AgentTimer::Refresh);
                }
            }
            _ => {}
        }
    }

    fn on_boot_timeout(&mut self, nonce: u64, sends: u32, now: SimTime, out: &mut AgentOutbox) {
        let policy = self.cfg.retransmit.clone();
        match &mut self.phase {
            Phase::Hello {
                nonce: n,
                targets,
                target,
                retry,
                sends: s,
                ..
            } if *n == nonce && *s == sends => match retry.on_timeout(&policy) {
                RetryStep::Resend(wait) => {
                    *s += 1;
                    let (to, s) = (targets[*target], *s);
                    self.send_hello(to, nonce, out);
                    out.timer(wait, AgentTimer::Boot { nonce, sends: s });
                }
                RetryStep::Exhausted => {
                    if *target + 1 < targets.len() {
                        *target += 1;
                        let (r, wait) = RetryState::start(&policy, now);
                        *retry = r;
                        *s += 1;
                        let (to, s) = (targets[*target], *s);
                        self.send_hello(to, nonce, out);
                        out.timer(wait, AgentTimer::Boot { nonce, sends: s });
                    } else {
                        out.metric("bootstrap_failed", 1.0, SimTime::ZERO);
                        self.phase = Phase::Idle;
                    }
                }
            },
            Phase::Confirm {
                nonce: n,
                retry,
                sends: s,
                controller,
                ..
            } if *n == nonce && *s == sends => match retry.on_timeout(&policy) {
                RetryStep::Resend(wait) => {
                    *s += 1;
                    let (to, s) = (*controller, *s);
                    self.boot_send(to, BootMsg::ConfigAck { nonce }, out);
                    out.timer(wait, AgentTimer::Boot { nonce, sends: s });
                }
                // The config is installed; the confirm only closes the exchange.
                RetryStep::Exhausted => self.phase = Phase::Ready,
            },
            _ => {}
        }
    }

    // ---- data path ----

    /// Sends one overlay packet originated by this node.
    pub fn send_packet(&mut self, pkt: OverlayPacket, now: SimTime, out: &mut AgentOutbox) {
        if !self.is_ready() {
            self.drop_packet(&pkt, "not-bootstrapped", now);
            return;
        }
        let dst = pkt.dst;
        if let Some(e) = self.cache.get_mut(&dst) {
            if e.is_fresh(now) {
                e.used = true;
                let (record, fetched_at) = (e.record.clone(), e.fetched_at);
                self.emit(pkt, &record, fetched_at, now, out);
                return;
            }
            self.cache.remove(&dst);
        }
        let src = self.eid.expect("ready");
        let cap = self.cfg.buffer_cap;
        let mode = self.cfg.miss_mode;
        if let Some(p) = self.pending.get_mut(&(src, dst)) {
            if p.redirect || mode == MissMode::Redirect {
                self.redirect(pkt, now, out);
            } else if p.buffer.len() < cap {
                p.buffer.push_back(pkt);
                self.stats.buffered += 1;
            } else {
                p.redirect = true;
                self.redirect(pkt, now, out);
            }
            return;
        }
        self.request(src, dst, false, now, out);
        match mode {
            MissMode::Buffer => {
                self.stats.buffered += 1;
                self.pending.get_mut(&(src, dst)).expect("just added").buffer.push_back(pkt);
            }
            MissMode::Redirect => self.redirect(pkt, now, out),
        }
    }

    fn drop_packet(&mut self, pkt: &OverlayPacket, reason: &'static str, now: SimTime) {
        self.stats.dropped += 1;
        self.record(AgentEvent::Dropped {
            at: now,
            dst: pkt.dst,
            flow_tag: pkt.flow_tag,
            reason,
        });
    }

    fn request(&mut self, src: EndpointId, dst: EndpointId, refresh: bool, now: SimTime, out: &mut AgentOutbox) {
        let Some(controller) = self.active_controller() else {
            return;
        };
        let nonce = self.nonces.fresh();
        let (retry, wait) = RetryState::start(&self.cfg.retransmit, now);
        self.send_request(src, dst, nonce, controller, now, out);
        out.timer(wait, AgentTimer::Request { nonce, sends: 1 });
        self.by_nonce.insert(nonce, (src, dst));
        self.pending.insert(
            (src, dst),
            Outstanding {
                controller,
                retry,
                sends: 1,
                tries: 1,
                first_sent: now,
                refresh,
                redirect: false,
                buffer: VecDeque::new(),
            },
        );
    }

    fn send_request(
        &mut self,
        src: EndpointId,
        dst: EndpointId,
        nonce: u64,
        to: UnderlayAddr,
        now: SimTime,
        out: &mut AgentOutbox,
    ) {
        self.stats.requests += 1;
        let hint = match self.cfg.role {
            NodeRole::EndNode => self.config.as_ref().map(|c| c.group.clone()),
            _ => None,
        };
        let msg = Message::StateRequest {
            src_eid: src,
            src_group_hint: hint,
            dst_eid: dst,
            nonce,
        };
        self.south(to, msg, now, out);
    }

    fn on_request_timeout(&mut self, nonce: u64, sends: u32, now: SimTime, out: &mut AgentOutbox) {
        let Some(&slot) = self.by_nonce.get(&nonce) else {
            return;
        };
        let policy = self.cfg.retransmit.clone();
        let controllers = self.controllers();
        let Some(p) = self.pending.get_mut(&slot) else {
            return;
        };
        if p.sends != sends {
            return;
        }
        match p.retry.on_timeout(&policy) {
            RetryStep::Resend(wait) => {
                p.sends += 1;
                let (to, s) = (p.controller, p.sends);
                self.send_request(slot.0, slot.1, nonce, to, now, out);
                out.timer(wait, AgentTimer::Request { nonce, sends: s });
            }
            RetryStep::Exhausted => {
                let used_active = controllers.get(self.active) == Some(&p.controller);
                if used_active && !controllers.is_empty() {
                    let from = controllers[self.active];
                    self.active = (self.active + 1) % controllers.len();
                    self.stats.failovers += 1;
                    out.metric("failover", 1.0, SimTime::ZERO);
                    self.log_failover(from, controllers[self.active], now);
                }
                let p = self.pending.get_mut(&slot).expect("present");
                if p.tries < controllers.len() {
                    p.tries += 1;
                    p.controller = controllers[self.active];
                    let (r, wait) = RetryState::start(&policy, now);
                    p.retry = r;
                    p.sends += 1;
                    let (to, s) = (p.controller, p.sends);
                    self.send_request(slot.0, slot.1, nonce, to, now, out);
                    out.timer(wait, AgentTimer::Request { nonce, sends: s });
                } else {
                    let p = self.pending.remove(&slot).expect("present");
                    self.by_nonce.remove(&nonce);
                    self.stats.unresolved += 1;
                    out.metric("unresolved", p.buffer.len() as f64, SimTime::ZERO);
                    for pkt in p.buffer {
                        self.drop_packet(&pkt, "unresolved", now);
                    }
                }
            }
        }
    }

    fn log_failover(&mut self, from: UnderlayAddr, to: UnderlayAddr, now: SimTime) {
        self.record(AgentEvent::Failover { at: now, from, to });
    }

    /// Sends toward the first re-encapsulation node, which resolves the rest.
    fn redirect(&mut self, pkt: OverlayPacket, now: SimTime, out: &mut AgentOutbox) {
        let Some(r) = self.config.as_ref().and_then(|c| c.reencap_nodes.first()).cloned() else {
            self.drop_packet(&pkt, "no-reencap-node", now);
            return;
        };
        let key = (pkt.src, pkt.dst);
        let (Ok(src), Ok(dst)) = (self.egress_locator(&[], key), select_locator(&r.locators, key)) else {
            self.drop_packet(&pkt, "no-usable-locator", now);
            return;
        };
        let dst = dst.clone();
        self.stats.redirected += 1;
        self.record(AgentEvent::Redirected {
            at: now,
            dst: pkt.dst,
            flow_tag: pkt.flow_tag,
        });
        let enc = EncapsulatedPacket {
            outer_src: src.clone(),
            outer_dst: dst.clone(),
            remaining_hops: vec![r.eid],
            inner: pkt,
        };
        out.send(src.underlay_addr, dst.underlay_addr, Wire::Data(enc), SimTime::ZERO);
    }

    /// Own locators ordered by `hint`, or by the egress policy when empty.
    fn egress_locator(
        &self,
        hint: &[crate::model::LabelPref],
        key: (EndpointId, EndpointId),
    ) -> Result<Locator, crate::model::ModelError> {
        let labels = if !hint.is_empty() {
            hint
        } else {
            self.config.as_ref().map_or(&[][..], |c| c.egress.labels.as_slice())
        };
        let (ordered, _) = apply_label_list(&self.interfaces, labels);
        select_locator(&ordered, key).cloned()
    }

    fn infra_locator(&self, eid: EndpointId, key: (EndpointId, EndpointId)) -> Option<Locator> {
        let c = self.config.as_ref()?;
        let node = c.reencap_nodes.iter().chain(&c.proxy_nodes).find(|n| n.eid == eid)?;
        select_locator(&node.locators, key).ok().cloned()
    }

    fn emit(&mut self, pkt: OverlayPacket, record: &MappingRecord, fetched_at: SimTime, now: SimTime, out: &mut AgentOutbox) {
        debug_assert!(now < fetched_at + SimTime::from_secs(u64::from(record.ttl_s)));
        let key = (pkt.src, pkt.dst);
        if record.negative {
            let Some(proxy) = self.config.as_ref().and_then(|c| c.proxy_nodes.first()).cloned() else {
                self.drop_packet(&pkt, "no-proxy", now);
                return;
            };
            let (Ok(src), Ok(dst)) = (self.egress_locator(&[], key), select_locator(&proxy.locators, key)) else {
                self.drop_packet(&pkt, "no-usable-locator", now);
                return;
            };
            let dst = dst.clone();
            self.record(AgentEvent::ToProxy {
                at: now,
                dst: pkt.dst,
                flow_tag: pkt.flow_tag,
            });
            let enc = EncapsulatedPacket {
                outer_src: src.clone(),
                outer_dst: dst.clone(),
                remaining_hops: Vec::new(),
                inner: pkt,
            };
            out.send(src.underlay_addr, dst.underlay_addr, Wire::Data(enc), SimTime::ZERO);
            return;
        }
        let src = match self.egress_locator(&record.egress_hint, key) {
            Ok(l) => l,
            Err(_) => {
                self.drop_packet(&pkt, "no-usable-locator", now);
                return;
            }
        };
        let ingress = select_locator(&record.ingress_locators, key).ok().cloned();
        let next = match record.hop_chain.first() {
            Some(h) => self.infra_locator(*h, key),
            None => ingress.clone(),
        };
        let Some(next) = next else {
            self.drop_packet(&pkt, "no-usable-locator", now);
            return;
        };
        if let Some(i) = &ingress {
            self.peers.insert(pkt.dst, (now, i.underlay_addr));
        }
        self.record(AgentEvent::Encapsulated {
            at: now,
            dst: pkt.dst,
            key: record.key.clone(),
            version: record.version,
            fetched_at,
            outer_src: src.clone(),
            outer_dst: next.underlay_addr,
            hops: record.hop_chain.clone(),
            flow_tag: pkt.flow_tag,
        });
        let enc = EncapsulatedPacket {
            outer_src: src.clone(),
            outer_dst: next.clone(),
            remaining_hops: record.hop_chain.clone(),
            inner: pkt,
        };
        out.send(src.underlay_addr, next.underlay_addr, Wire::Data(enc), SimTime::ZERO);
    }

    fn on_data(&mut self, mut p: EncapsulatedPacket, now: SimTime, out: &mut AgentOutbox) {
        let me = self.eid;
        match self.cfg.role {
            NodeRole::ReEncap => {
                if p.remaining_hops.first().copied() == me && me.is_some() {
                    p.remaining_hops.remove(0);
                }
                if Some(p.inner.dst) == me {
                    self.deliver(p, now);
                    return;
                }
                self.reencap_forward(p, now, out);
            }
            NodeRole::Proxy if Some(p.inner.dst) != me => {
                let next_port = 40_000 + self.nat.len() as u16;
                let addr = p.outer_dst.underlay_addr;
                let nat = *self.nat.entry(p.inner.src).or_insert((addr, next_port));
                self.record(AgentEvent::ProxyEgress {
                    at: now,
                    src: p.inner.src,
                    dst: p.inner.dst,
                    flow_tag: p.inner.flow_tag,
                    nat,
                });
            }
            _ => {
                if p.remaining_hops.is_empty() && Some(p.inner.dst) == me {
                    self.deliver(p, now);
                } else {
                    self.drop_packet(&p.inner, "misrouted", now);
                }
            }
        }
    }

    fn deliver(&mut self, p: EncapsulatedPacket, now: SimTime) {
        self.peers.insert(p.inner.src, (now, p.outer_src.underlay_addr));
        self.record(AgentEvent::Delivered {
            at: now,
            src: p.inner.src,
            dst: p.inner.dst,
            flow_tag: p.inner.flow_tag,
            outer_src: p.outer_src,
        });
    }

    /// Re-encapsulation: the packet arrives with this node already popped.
    fn reencap_forward(&mut self, p: EncapsulatedPacket, now: SimTime, out: &mut AgentOutbox) {
        let key = (p.inner.src, p.inner.dst);
        let next = match p.remaining_hops.first() {
            Some(h) => self.infra_locator(*h, key),
            None => match self.reencap_record(key.0, key.1) {
                Some(rec) if !rec.negative => select_locator(&rec.ingress_locators, key).ok().cloned(),
                Some(_) => None,
                None => {
                    self.hold(p, now, out);
                    return;
                }
            },
        };
        let Some(next) = next else {
            self.drop_packet(&p.inner, "no-usable-locator", now);
            return;
        };
        let src = self.control_locator();
        self.record(AgentEvent::Forwarded {
            at: now,
            hop: self.eid.unwrap_or(EndpointId(0)),
            dst: p.inner.dst,
            flow_tag: p.inner.flow_tag,
            next: next.underlay_addr,
        });
        let enc = EncapsulatedPacket {
            outer_src: src.clone(),
            outer_dst: next.clone(),
            remaining_hops: p.remaining_hops,
            inner: p.inner,
        };
        out.send(src.underlay_addr, next.underlay_addr, Wire::Data(enc), SimTime::ZERO);
    }

    /// No state: hold the packet and ask a controller.
    fn hold(&mut self, p: EncapsulatedPacket, now: SimTime, out: &mut AgentOutbox) {
        let slot = (p.inner.src, p.inner.dst);
        if !self.pending.contains_key(&slot) {
            self.request(slot.0, slot.1, false, now, out);
        }
        match self.pending.get_mut(&slot) {
            Some(o) => o.buffer.push_back(p.inner),
            None => self.drop_packet(&p.inner, "no-controller", now),
        }
    }

    fn reencap_record(&self, src: EndpointId, dst: EndpointId) -> Option<&MappingRecord> {
        if let Some(k) = self.resolved.get(&(src, dst)) {
            return self.pushed.get(k);
        }
        let mut it = self
            .pushed
            .range(RecordKey::any(dst)..)
            .take_while(|(k, _)| k.dst == dst)
            .map(|(_, r)| r);
        let first = it.next()?;
        // Several source groups: only the controller knows which one applies.
        match it.next() {
            None => Some(first),
            Some(_) => None,
        }
    }

    // ---- replies and pushes ----

    pub fn on_wire(&mut self, from: UnderlayAddr, wire: Wire, now: SimTime, out: &mut AgentOutbox) {
        match wire {
            Wire::South(bytes) => {
                if let Ok(env) = southbound::decode(&bytes) {
                    self.on_south(env, now, out);
                }
            }
            Wire::Boot(m) => self.on_boot(from, m, now, out),
            Wire::Data(p) => self.on_data(p, now, out),
            Wire::Internal(_) => {}
        }
    }

    fn on_south(&mut self, env: Envelope, now: SimTime, out: &mut AgentOutbox) {
        match env.message {
            Message::StateReply { record, nonce } => {
                self.stats.replies += 1;
                self.on_answer(nonce, record, now, out);
            }
            Message::NegativeReply { dst, ttl_s, nonce } => {
                self.stats.negatives += 1;
                let src = match &self.config {
                    Some(c) if self.cfg.role == NodeRole::EndNode => SourceGroup::Group(c.group.clone()),
                    _ => SourceGroup::Any,
                };
                let record = MappingRecord::negative(RecordKey { dst, src }, ttl_s, 0);
                self.on_answer(nonce, record, now, out);
            }
            Message::Notify { key, record, .. } => self.on_notify(key, record, env.timestamp, now),
            Message::StateUpdate { eid, delta, .. } => {
                if let Some(e) = self.cache.get_mut(&eid) {
                    for c in &delta.locators {
                        for l in e.record.ingress_locators.iter_mut().filter(|l| l.label == c.label) {
                            l.status = c.status;
                        }
                    }
                }
                self.record(AgentEvent::PeerUpdate { at: now, peer: eid });
            }
            Message::Ack { nonce, flags } => {
                if self.updates.remove(&nonce).is_some() && flags & ACK_NOT_REGISTERED != 0 {
                    if let Some(c) = self.active_controller() {
                        self.bootstrap_via(vec![c], now, out);
                    }
                }
            }
            Message::StateRequest { .. } => {}
        }
    }

    fn on_answer(&mut self, nonce: u64, record: MappingRecord, now: SimTime, out: &mut AgentOutbox) {
        let Some(slot) = self.by_nonce.remove(&nonce) else {
            return;
        };
        let Some(p) = self.pending.remove(&slot) else {
            return;
        };
        if !p.refresh {
            out.metric("retrieval_ms", (now - p.first_sent).as_millis_f64(), SimTime::ZERO);
        }
        let fetched_at = p.first_sent;
        if self.cfg.role == NodeRole::ReEncap {
            self.resolved.insert(slot, record.key.clone());
            self.store_pushed(record);
            for inner in p.buffer {
                let enc = EncapsulatedPacket {
                    outer_src: self.control_locator(),
                    outer_dst: self.control_locator(),
                    remaining_hops: Vec::new(),
                    inner,
                };
                self.reencap_forward(enc, now, out);
            }
            return;
        }
        let dst = slot.1;
        let keep_current = self
            .cache
            .get(&dst)
            .is_some_and(|e| e.record.key == record.key && e.record.version > record.version && e.is_fresh(now));
        if !keep_current {
            self.cache.insert(dst, CacheEntry::new(record, fetched_at));
        }
        let e = self.cache.get_mut(&dst).expect("installed");
        if !p.buffer.is_empty() {
            e.used = true;
        }
        let (record, fetched_at) = (e.record.clone(), e.fetched_at);
        for pkt in p.buffer {
            self.emit(pkt, &record, fetched_at, now, out);
        }
    }

    fn store_pushed(&mut self, record: MappingRecord) {
        match self.pushed.get(&record.key) {
            Some(cur) if cur.version >= record.version => {}
            _ => {
                self.pushed.insert(record.key.clone(), record);
            }
        }
    }

    fn on_notify(&mut self, key: RecordKey, record: MappingRecord, sent_at: SimTime, now: SimTime) {
        self.stats.notifies += 1;
        let version = record.version;
        let applied = match self.cfg.role {
            NodeRole::ReEncap => {
                let before = self.pushed.get(&record.key).map(|r| r.version);
                self.store_pushed(record);
                before.is_none_or(|v| v < version)
            }
            NodeRole::Proxy => false,
            NodeRole::EndNode => match self.cache.get_mut(&key.dst) {
                Some(e) if e.record.key != record.key || record.version > e.record.version => {
                    let used = e.used;
                    *e = CacheEntry::new(record, sent_at);
                    e.used = used;
                    true
                }
                _ => false,
            },
        };
        self.record(AgentEvent::Notified {
            at: now,
            key,
            version,
            applied,
        });
    }

    // ---- timers ----

    pub fn on_timer(&mut self, timer: AgentTimer, now: SimTime, out: &mut AgentOutbox) {
        match timer {
            AgentTimer::Request { nonce, sends } => self.on_request_timeout(nonce, sends, now, out),
            AgentTimer::Update { nonce, sends } => self.on_update_timeout(nonce, sends, now, out),
            AgentTimer::Boot { nonce, sends } => self.on_boot_timeout(nonce, sends, now, out),
            AgentTimer::Refresh => {
                self.refresh_tick(now, out);
                out.timer(self.cfg.refresh_tick, AgentTimer::Refresh);
            }
        }
    }

    /// Re-requests entries due for refresh that were used since the last
    /// one; evicts the rest once due.
    pub fn refresh_tick(&mut self, now: SimTime, out: &mut AgentOutbox) {
        let Some(src) = self.eid else {
            return;
        };
        let due: Vec<EndpointId> = self
            .cache
            .iter()
            .filter(|(_, e)| e.next_refresh <= now || !e.is_fresh(now))
            .map(|(d, _)| *d)
            .collect();
        for dst in due {
            let e = self.cache.get_mut(&dst).expect("listed");
            if !e.used || e.record.negative || !e.is_fresh(now) {
                self.cache.remove(&dst);
                continue;
            }
            e.used = false;
            e.next_refresh = SimTime::MAX;
            if !self.pending.contains_key(&(src, dst)) {
                self.request(src, dst, true, now, out);
            }
        }
    }

    // ---- locator changes ----

    /// Applies a local interface change. Returns false when nothing changed.
    pub fn locator_change(&mut self, label: &str, status: LinkStatus, now: SimTime, out: &mut AgentOutbox) -> bool {
        let Some(l) = self.interfaces.iter_mut().find(|l| l.label == label) else {
            return false;
        };
        if l.status == status {
            return false;
        }
        l.status = status;
        self.update_seq += 1;
        let delta = RegistrationDelta {
            locators: vec![LocatorChange {
                label: label.to_string(),
                status,
            }],
            attributes: Vec::new(),
            seq: self.update_seq,
        };
        let Some(eid) = self.eid else {
            return true;
        };
        if let Some(c) = self.active_controller() {
            let nonce = self.nonces.fresh();
            let (retry, wait) = RetryState::start(&self.cfg.retransmit, now);
            self.send_update(c, eid, delta.clone(), nonce, now, out);
            out.timer(wait, AgentTimer::Update { nonce, sends: 1 });
            self.updates.insert(
                nonce,
                PendingUpdate {
                    delta: delta.clone(),
                    controller: c,
                    retry,
                    sends: 1,
                    tries: 1,
                },
            );
        }
        let peers: Vec<UnderlayAddr> = self
            .peers
            .values()
            .filter(|(t, _)| now.saturating_sub(*t) <= self.cfg.peer_window)
            .map(|(_, a)| *a)
            .collect();
        for to in peers {
            let nonce = self.nonces.fresh();
            self.send_update(to, eid, delta.clone(), nonce, now, out);
        }
        true
    }

    fn send_update(
        &mut self,
        to: UnderlayAddr,
        eid: EndpointId,
        delta: RegistrationDelta,
        nonce: u64,
        now: SimTime,
        out: &mut AgentOutbox,
    ) {
        self.south(to, Message::StateUpdate { eid, delta, nonce }, now, out);
    }

    fn on_update_timeout(&mut self, nonce: u64, sends: u32, now: SimTime, out: &mut AgentOutbox) {
        let policy = self.cfg.retransmit.clone();
        let controllers = self.controllers();
        let Some(eid) = self.eid else {
            return;
        };
        let Some(u) = self.updates.get_mut(&nonce) else {
            return;
        };
        if u.sends != sends {
            return;
        }
        match u.retry.on_timeout(&policy) {
            RetryStep::Resend(wait) => {
                u.sends += 1;
                let (to, d, s) = (u.controller, u.delta.clone(), u.sends);
                self.send_update(to, eid, d, nonce, now, out);
                out.timer(wait, AgentTimer::Update { nonce, sends: s });
            }
            RetryStep::Exhausted => {
                if controllers.get(self.active) == Some(&u.controller) && !controllers.is_empty() {
                    let from = controllers[self.active];
                    self.active = (self.active + 1) % controllers.len();
                    self.stats.failovers += 1;
                    self.log_failover(from, controllers[self.active], now);
                }
                let u = self.updates.get_mut(&nonce).expect("present");
                if u.tries < controllers.len() {
                    u.tries += 1;
                    u.controller = controllers[self.active];
                    let (r, wait) = RetryState::start(&policy, now);
                    u.retry = r;
                    u.sends += 1;
                    let (to, d, s) = (u.controller, u.delta.clone(), u.sends);
                    self.send_update(to, eid, d, nonce, now, out);
                    out.timer(wait, AgentTimer::Update { nonce, sends: s });
                } else {
                    self.updates.remove(&nonce);
                    out.metric("update_dropped", 1.0, SimTime::ZERO);
                }
            }
        }
    }
}
