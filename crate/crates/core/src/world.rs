//! A deployment on the simulator: controller nodes and agents bound to
//! underlay addresses, and the loop that feeds them events.

use thiserror::Error;

use crate::agent::{Agent, AgentConfig, AgentOutbox, AgentTimer};
use crate::controller::{
    ClusterRequest, Controller, ControllerConfig, ControllerTimer, CoordinationStore, Ctx, Member,
};
use crate::intent::{PolicyError, RenderOptions};
use crate::model::{Locator, MappingRecord, NodeRegistration, OverlayPacket, SiteId, UnderlayAddr};
use crate::nib::{PartitionId, PartitionMap};
use crate::simnet::scenario::Scenario;
use crate::simnet::{Action, Event, LatencyMatrix, MetricsLog, Outbox, SimTime, Simulator};
use crate::southbound::Wire;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeTimer {
    Ctrl(ControllerTimer),
    Agent(AgentTimer),
    /// Agent power-on: run its bootstrap.
    Start,
}

pub enum Node {
    Controller(Box<Controller>),
    Agent(Box<Agent>),
    /// Records every datagram delivered to it; used to drive controllers directly.
    Tap(Vec<(SimTime, UnderlayAddr, Wire)>),
}

#[derive(Debug, Error)]
pub enum WorldError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("{0}")]
    Scenario(String),
}

pub struct World {
    pub sim: Simulator<Wire, NodeTimer>,
    pub nodes: Vec<Node>,
    pub coord: CoordinationStore,
    pub metrics: MetricsLog,
    /// Simulator node of each controller id.
    pub ctrl_nodes: Vec<usize>,
    ctrl_cfg: ControllerConfig,
    next_addr: u32,
}

impl World {
    pub fn new(matrix: LatencyMatrix, seed: u64, ctrl_cfg: ControllerConfig, policy_text: &str) -> Result<Self, WorldError> {
        crate::intent::parse_policy(policy_text)?;
        let mut coord = CoordinationStore::new();
        coord.set_policy(policy_text);
        Ok(Self {
            sim: Simulator::new(matrix, seed),
            nodes: Vec::new(),
            coord,
            metrics: MetricsLog::default(),
            ctrl_nodes: Vec::new(),
            ctrl_cfg,
            next_addr: 0,
        })
    }

    /// Builds the deployment a scenario describes; agents power on at t = 0
    /// (infrastructure nodes) and t = 0.5 s (end-nodes).
    pub fn from_scenario(sc: &Scenario, policy_text: &str) -> Result<Self, WorldError> {
        let cfg = ControllerConfig {
            proc: SimTime::from_millis_f64(sc.proc_ms),
            spawn_on_failure: sc.spawn_on_failure,
            ..ControllerConfig::default()
        };
        let mut w = World::new(sc.matrix.clone(), sc.seed, cfg, policy_text)?;
        w.sim.set_loss(sc.loss);
        let site = |name: &str| sc.matrix.site(name).map_err(|e| WorldError::Scenario(e.to_string()));
        let sites = sc.controllers.iter().map(|c| site(&c.site)).collect::<Result<Vec<_>, _>>()?;
        w.add_controllers(&sites);
        let mut agents = Vec::new();
        for (i, a) in sc.agents.iter().enumerate() {
            let home = site(&a.site)?;
            let mut interfaces = Vec::new();
            for (k, f) in a.interfaces.iter().enumerate() {
                let s = match &f.site {
                    Some(n) => site(n)?,
                    None => home,
                };
                let addr = f.underlay.unwrap_or_else(|| w.alloc_addr());
                interfaces.push(Locator::new(s, addr, f.label.clone()).with_priority(1 + k as u8, 100));
            }
            let mut controllers = Vec::new();
            for c in &a.controllers {
                let s = site(c)?;
                let addr = w
                    .controller_at(s)
                    .ok_or_else(|| WorldError::Scenario(format!("agent {}: no controller at {c}", a.name)))?;
                controllers.push(addr);
            }
            let group = match &a.group {
                Some(g) => Some(crate::model::GroupId::new(g).map_err(|e| WorldError::Scenario(e.to_string()))?),
                None => None,
            };
            let mut cfg = AgentConfig::new(&a.name, 1_000 + i as u64, interfaces, controllers);
            cfg.role = a.role;
            cfg.eid = a.eid;
            cfg.group = group;
            cfg.miss_mode = a.miss_mode;
            cfg.attributes = a.attributes.clone();
            let node = w.add_agent(cfg, home);
            let at = match a.role {
                crate::model::NodeRole::EndNode => SimTime::from_millis(500),
                _ => SimTime::ZERO,
            };
            w.sim.schedule_at(node, at, NodeTimer::Start);
            agents.push(node);
        }
        if let (Some(churn), Some(d)) = (&sc.churn, sc.duration_s) {
            for (t, node, up) in churn.schedule(&agents, SimTime::from_millis_f64(d * 1_000.0)) {
                w.sim.schedule_status(node, t, up);
            }
        }
        Ok(w)
    }

    pub fn controller_config(&self) -> &ControllerConfig {
        &self.ctrl_cfg
    }

    pub fn render_options(&self) -> RenderOptions {
        self.ctrl_cfg.render
    }

    pub fn now(&self) -> SimTime {
        self.sim.now()
    }

    /// A fresh underlay address in 100.64.0.0/10.
    pub fn alloc_addr(&mut self) -> UnderlayAddr {
        self.next_addr += 1;
        UnderlayAddr((100 << 24) | (64 << 16) | self.next_addr)
    }

    /// One controller node per site, each owning an equal hash range.
    pub fn add_controllers(&mut self, sites: &[SiteId]) {
        let base = self.ctrl_nodes.len() as u32;
        let members: Vec<Member> = sites
            .iter()
            .enumerate()
            .map(|(i, s)| Member {
                id: base + i as u32,
                addr: self.alloc_addr(),
                site: *s,
                partition: PartitionId {
                    index: base + i as u32,
                    home_site: *s,
                },
            })
            .collect();
        let pmap = PartitionMap::equal(&members.iter().map(|m| m.partition).collect::<Vec<_>>());
        for m in &members {
            let c = Controller::new(*m, members.clone(), pmap.clone(), self.coord.policy_text(), self.ctrl_cfg.clone(), self.now())
                .expect("policy validated at construction");
            self.install_controller(c);
        }
    }

    fn install_controller(&mut self, mut c: Controller) -> usize {
        let node = self.sim.add_node(c.site);
        self.sim.bind(node, c.addr, c.site);
        let mut ctx = Ctx::new(self.sim.now(), &mut self.coord);
        c.start(&mut ctx);
        let (out, reqs) = (ctx.out, ctx.requests);
        self.ctrl_nodes.push(node);
        self.nodes.push(Node::Controller(Box::new(c)));
        self.apply_ctrl(node, out, reqs);
        node
    }

    pub fn add_agent(&mut self, cfg: AgentConfig, site: SiteId) -> usize {
        let node = self.sim.add_node(site);
        for l in &cfg.interfaces {
            self.sim.bind(node, l.underlay_addr, l.site);
        }
        self.nodes.push(Node::Agent(Box::new(Agent::new(cfg))));
        node
    }

    pub fn add_tap(&mut self, site: SiteId) -> (usize, UnderlayAddr) {
        let node = self.sim.add_node(site);
        let addr = self.alloc_addr();
        self.sim.bind(node, addr, site);
        self.nodes.push(Node::Tap(Vec::new()));
        (node, addr)
    }

    pub fn tap_log(&self, node: usize) -> &[(SimTime, UnderlayAddr, Wire)] {
        match &self.nodes[node] {
            Node::Tap(log) => log,
            _ => panic!("node {node} is not a tap"),
        }
    }

    pub fn clear_tap(&mut self, node: usize) {
        if let Node::Tap(log) = &mut self.nodes[node] {
            log.clear();
        }
    }

    /// Sends `wire` as if from `from`, now.
    pub fn inject(&mut self, from: UnderlayAddr, to: UnderlayAddr, wire: Wire) {
        self.sim.send(from, to, wire, SimTime::ZERO);
    }

    pub fn controller_at(&self, site: SiteId) -> Option<UnderlayAddr> {
        self.controllers().find(|c| c.site == site && self.sim.is_up(self.ctrl_nodes[c.id as usize])).map(|c| c.addr)
    }

    pub fn controllers(&self) -> impl Iterator<Item = &Controller> {
        self.ctrl_nodes.iter().map(|&n| match &self.nodes[n] {
            Node::Controller(c) => &**c,
            _ => unreachable!("controller node"),
        })
    }

    pub fn controller(&self, id: u32) -> &Controller {
        match &self.nodes[self.ctrl_nodes[id as usize]] {
            Node::Controller(c) => c,
            _ => unreachable!("controller node"),
        }
    }

    pub fn controller_mut(&mut self, id: u32) -> &mut Controller {
        match &mut self.nodes[self.ctrl_nodes[id as usize]] {
            Node::Controller(c) => c,
            _ => unreachable!("controller node"),
        }
    }

    pub fn is_controller_up(&self, id: u32) -> bool {
        self.sim.is_up(self.ctrl_nodes[id as usize])
    }

    pub fn agent(&self, node: usize) -> &Agent {
        match &self.nodes[node] {
            Node::Agent(a) => a,
            _ => panic!("node {node} is not an agent"),
        }
    }

    pub fn agent_mut(&mut self, node: usize) -> &mut Agent {
        match &mut self.nodes[node] {
            Node::Agent(a) => a,
            _ => panic!("node {node} is not an agent"),
        }
    }

    /// Runs `f` on an agent now and applies what it emits.
    pub fn with_agent<R>(&mut self, node: usize, f: impl FnOnce(&mut Agent, SimTime, &mut AgentOutbox) -> R) -> R {
        let now = self.sim.now();
        let mut out = Outbox::default();
        let r = f(self.agent_mut(node), now, &mut out);
        self.apply_agent(node, out);
        r
    }

    /// Runs `f` on a controller now and applies what it emits.
    pub fn with_controller<R>(&mut self, id: u32, f: impl FnOnce(&mut Controller, &mut Ctx) -> R) -> R {
        let node = self.ctrl_nodes[id as usize];
        let mut ctx = Ctx::new(self.sim.now(), &mut self.coord);
        let Node::Controller(c) = &mut self.nodes[node] else {
            unreachable!("controller node")
        };
        let r = f(c, &mut ctx);
        let (out, reqs) = (ctx.out, ctx.requests);
        self.apply_ctrl(node, out, reqs);
        r
    }

    pub fn start_agent(&mut self, node: usize) {
        self.with_agent(node, |a, now, out| a.start(now, out));
    }

    pub fn send_packet(&mut self, node: usize, pkt: OverlayPacket) {
        self.with_agent(node, |a, now, out| a.send_packet(pkt, now, out));
    }

    pub fn northbound(&mut self, ctrl: u32, text: &str) -> Result<usize, PolicyError> {
        self.with_controller(ctrl, |c, ctx| c.apply_northbound(text, ctx))
    }

    /// Replaces a controller with a fresh instance rebuilt from the journal.
    /// Its timers keep running and drive the new instance.
    pub fn restart_controller(&mut self, id: u32) {
        let old = self.controller(id);
        let (me, members, pmap) = (old.member(), old.members.clone(), old.pmap.clone());
        let mut c = Controller::new(me, members, pmap, self.coord.policy_text(), self.ctrl_cfg.clone(), self.now())
            .expect("journal holds a valid policy");
        c.rebuild(&self.coord, self.now());
        let node = self.ctrl_nodes[id as usize];
        self.nodes[node] = Node::Controller(Box::new(c));
    }

    pub fn kill_controller(&mut self, id: u32, at: SimTime) {
        let node = self.ctrl_nodes[id as usize];
        self.sim.schedule_status(node, at, false);
    }

    /// Loads a pre-rendered NIB: registrations go to the journal, and both
    /// registrations and records to the partition that owns them.
    pub fn preload(&mut self, regs: Vec<NodeRegistration>, records: Vec<MappingRecord>) {
        self.coord.reserve(regs.len());
        let n = self.ctrl_nodes.len().max(1);
        for id in 0..self.ctrl_nodes.len() as u32 {
            self.controller_mut(id).nib.reserve(regs.len() / n + 1);
        }
        let owner = |w: &World, dst| {
            let p = w.controller(0).pmap.partition_for(dst);
            w.controllers().position(|c| c.partition == p).expect("owner exists") as u32
        };
        for reg in regs {
            let o = owner(self, reg.eid);
            self.controller_mut(o).nib.put_registration(reg.clone());
            self.coord.upsert_registration(reg);
        }
        for rec in records {
            let o = owner(self, rec.key.dst);
            self.controller_mut(o).nib.put_record(rec).expect("fresh partition");
        }
    }

    pub fn run_until(&mut self, until: SimTime) {
        while let Some((_, ev)) = self.sim.next_event(until) {
            self.dispatch(ev);
        }
        self.sim.advance_to(until);
    }

    pub fn run_for(&mut self, d: SimTime) {
        let t = self.sim.now() + d;
        self.run_until(t);
    }

    fn dispatch(&mut self, ev: Event<Wire, NodeTimer>) {
        let now = self.sim.now();
        match ev {
            Event::Deliver { node, from, payload, .. } => match &mut self.nodes[node] {
                Node::Controller(c) => {
                    let mut ctx = Ctx::new(now, &mut self.coord);
                    c.on_wire(from, payload, &mut ctx);
                    let (out, reqs) = (ctx.out, ctx.requests);
                    self.apply_ctrl(node, out, reqs);
                }
                Node::Agent(a) => {
                    let mut out = Outbox::default();
                    a.on_wire(from, payload, now, &mut out);
                    self.apply_agent(node, out);
                }
                Node::Tap(log) => log.push((now, from, payload)),
            },
            Event::Timer { node, timer } => match (&mut self.nodes[node], timer) {
                (Node::Controller(c), NodeTimer::Ctrl(t)) => {
                    let mut ctx = Ctx::new(now, &mut self.coord);
                    c.on_timer(t, &mut ctx);
                    let (out, reqs) = (ctx.out, ctx.requests);
                    self.apply_ctrl(node, out, reqs);
                }
                (Node::Agent(a), NodeTimer::Agent(t)) => {
                    let mut out = Outbox::default();
                    a.on_timer(t, now, &mut out);
                    self.apply_agent(node, out);
                }
                (Node::Agent(a), NodeTimer::Start) => {
                    let mut out = Outbox::default();
                    a.start(now, &mut out);
                    self.apply_agent(node, out);
                }
                _ => {}
            },
            Event::NodeStatus { .. } => {}
        }
    }

    fn apply_agent(&mut self, node: usize, out: AgentOutbox) {
        for a in out.actions {
            match a {
                Action::Send { from, to, payload, delay } => {
                    self.sim.send(from, to, payload, delay);
                }
                Action::Timer { delay, timer } => self.sim.schedule(node, delay, NodeTimer::Agent(timer)),
                Action::Metric { name, value, .. } => self.metrics.record(name, self.sim.now(), value),
            }
        }
    }

    fn apply_ctrl(&mut self, node: usize, out: Outbox<Wire, ControllerTimer>, reqs: Vec<ClusterRequest>) {
        for a in out.actions {
            match a {
                Action::Send { from, to, payload, delay } => {
                    self.sim.send(from, to, payload, delay);
                }
                Action::Timer { delay, timer } => self.sim.schedule(node, delay, NodeTimer::Ctrl(timer)),
                Action::Metric { name, value, .. } => self.metrics.record(name, self.sim.now(), value),
            }
        }
        for r in reqs {
            let ClusterRequest::Spawn { site, replaces } = r;
            self.spawn(node, site, replaces);
        }
    }

    /// Starts a replacement controller and lets the leader hand it the range.
    fn spawn(&mut self, leader_node: usize, site: SiteId, replaces: PartitionId) {
        let Node::Controller(leader) = &self.nodes[leader_node] else {
            return;
        };
        let index = leader.next_partition_index();
        let leader_id = leader.id;
        let fresh = Member {
            id: self.ctrl_nodes.len() as u32,
            addr: UnderlayAddr((100 << 24) | (64 << 16) | (self.next_addr + 1)),
            site,
            partition: PartitionId { index, home_site: site },
        };
        self.next_addr += 1;
        let mut members = leader.members.clone();
        members.push(fresh);
        let pmap = leader.pmap.clone();
        let c = Controller::new(fresh, members, pmap, self.coord.policy_text(), self.ctrl_cfg.clone(), self.now())
            .expect("journal holds a valid policy");
        self.install_controller(c);
        self.metrics.record("controller_spawned", self.sim.now(), f64::from(fresh.id));
        self.with_controller(leader_id, |c, ctx| c.on_spawned(replaces, fresh, ctx));
    }
}
