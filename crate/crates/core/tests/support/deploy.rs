//! Five-controller deployments on the bundled matrix, at jitter 0.

use std::collections::BTreeMap;

use edgeplane::agent::AgentConfig;
use edgeplane::controller::ControllerConfig;
use edgeplane::experiments::nibgen::{self, probe_eid, GeneratedNib};
use edgeplane::intent::{parse_policy, render};
use edgeplane::model::{EndpointId, GroupId, Locator, OverlayPacket, SiteId, UnderlayAddr};
use edgeplane::simnet::scenario::Scenario;
use edgeplane::simnet::SimTime;
use edgeplane::southbound::{decode, encode, Envelope, Message, Wire};
use edgeplane::world::World;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const BCN: SiteId = SiteId(0);
pub const IRL: SiteId = SiteId(1);
pub const FRA: SiteId = SiteId(2);
pub const VA: SiteId = SiteId(3);
pub const CA: SiteId = SiteId(4);
pub const OR: SiteId = SiteId(5);

/// Extra pair policies layered on the generated groups.
pub const PAIRS: &str = "
pair g0 -> g1 { ingress lte prio 1 }
pair Probe -> g2 { egress lte prio 1; ingress lte w 60, eth w 40 }
";

pub struct Deployment {
    pub world: World,
    pub nib: GeneratedNib,
    pub policy: String,
}

/// RTT in ms between two bundled sites.
pub fn rtt(a: SiteId, b: SiteId) -> f64 {
    Scenario::poc_aws().matrix.rtt(a, b).as_millis_f64()
}

pub fn deployment(nib_size: usize, groups: usize, seed: u64, spawn: bool) -> Deployment {
    let sc = Scenario::poc_aws();
    let mut matrix = sc.matrix.clone();
    matrix.jitter_ms = 0.0;
    let nib = nibgen::generate_nib(nib_size, groups, seed, 6);
    let policy = format!("{}{PAIRS}", nib.policy_text);
    let parsed = parse_policy(&policy).unwrap();
    let records = render(&parsed, &nib.regs).records.into_values().collect();
    let cfg = ControllerConfig {
        spawn_on_failure: spawn,
        ..ControllerConfig::default()
    };
    let mut world = World::new(matrix, seed, cfg, &policy).unwrap();
    world.add_controllers(&[IRL, FRA, VA, CA, OR]);
    world.preload(nib.regs.clone(), records);
    Deployment { world, nib, policy }
}

pub fn probe_group() -> GroupId {
    GroupId::new(nibgen::PROBE_GROUP).unwrap()
}

pub fn request(w: &mut World, from: UnderlayAddr, to: UnderlayAddr, src: EndpointId, dst: EndpointId, nonce: u64) {
    let env = Envelope {
        sender: Locator::new(BCN, from, "tap"),
        timestamp: w.now(),
        message: Message::StateRequest {
            src_eid: src,
            src_group_hint: Some(probe_group()),
            dst_eid: dst,
            nonce,
        },
    };
    w.inject(from, to, Wire::South(encode(&env)));
}

/// Southbound messages a tap received, in arrival order.
pub fn received(w: &World, tap: usize) -> Vec<(SimTime, Message)> {
    w.tap_log(tap)
        .iter()
        .filter_map(|(t, _, wire)| match wire {
            Wire::South(b) => Some((*t, decode(b).unwrap().message)),
            _ => None,
        })
        .collect()
}

pub fn with_probe(d: &mut Deployment, controllers: &[u32]) -> usize {
    let w = &mut d.world;
    let eid = probe_eid(&w.controller(0).pmap, w.controller(controllers[0]).partition);
    let (eth, lte) = (w.alloc_addr(), w.alloc_addr());
    let addrs = controllers.iter().map(|id| w.controller(*id).addr).collect();
    let mut cfg = AgentConfig::new(
        "probe",
        7,
        vec![Locator::new(BCN, eth, "eth"), Locator::new(BCN, lte, "lte").with_priority(2, 100)],
        addrs,
    );
    cfg.eid = Some(eid);
    cfg.group = Some(probe_group());
    let probe = w.add_agent(cfg, BCN);
    w.start_agent(probe);
    w.run_for(SimTime::from_secs(2));
    assert!(w.agent(probe).is_ready());
    probe
}

/// Sends one flow every 100 ms for 20 s and kills `victim` after 5 s.
pub fn flows_across_a_failure(spawn: bool, victim: u32) -> (Deployment, usize, Vec<EndpointId>, SimTime) {
    let mut d = deployment(20_000, 20, 11, spawn);
    let probe = with_probe(&mut d, &[0, 1, 2]);
    let src = d.world.agent(probe).eid().unwrap();
    let dsts: Vec<EndpointId> = d.nib.regs.iter().step_by(97).take(200).map(|r| r.eid).collect();
    let t0 = d.world.now();
    let kill_at = t0 + SimTime::from_secs(5);
    for (i, dst) in dsts.iter().enumerate() {
        let at = t0 + SimTime::from_millis(100 * i as u64);
        if at >= kill_at && d.world.is_controller_up(victim) {
            d.world.run_until(kill_at);
            d.world.kill_controller(victim, kill_at);
        }
        d.world.run_until(at);
        let pkt = OverlayPacket {
            src,
            dst: *dst,
            size_bytes: 64,
            flow_tag: i as u64,
        };
        d.world.send_packet(probe, pkt);
    }
    d.world.run_for(SimTime::from_secs(30));
    (d, probe, dsts, kill_at)
}

pub fn strip_nonce(m: Message) -> Message {
    match m {
        Message::StateReply { record, .. } => Message::StateReply { record, nonce: 0 },
        Message::NegativeReply { dst, ttl_s, .. } => Message::NegativeReply { dst, ttl_s, nonce: 0 },
        other => other,
    }
}

/// Registered and unregistered sources and destinations, mostly registered.
pub fn random_requests(d: &Deployment, n: usize, seed: u64) -> Vec<(EndpointId, EndpointId)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let regs: Vec<EndpointId> = d.nib.regs.iter().map(|r| r.eid).collect();
    (0..n)
        .map(|_| {
            let src = if rng.gen_bool(0.7) {
                regs[rng.gen_range(0..regs.len())]
            } else {
                EndpointId::new(172, 16, rng.gen(), rng.gen_range(1..255))
            };
            let dst = if rng.gen_bool(0.9) {
                regs[rng.gen_range(0..regs.len())]
            } else {
                EndpointId::new(10, 200, 0, rng.gen_range(1..255))
            };
            (src, dst)
        })
        .collect()
}

/// Sends every request to each controller in turn; replies keyed by nonce.
pub fn replay_everywhere(d: &mut Deployment, reqs: &[(EndpointId, EndpointId)]) -> Vec<BTreeMap<u64, Message>> {
    let (tap, me) = d.world.add_tap(BCN);
    let addrs: Vec<_> = d.world.controllers().map(|c| c.addr).collect();
    let mut answers = Vec::new();
    for to in addrs {
        d.world.clear_tap(tap);
        for (i, (s, t)) in reqs.iter().enumerate() {
            request(&mut d.world, me, to, *s, *t, i as u64 + 1);
        }
        d.world.run_for(SimTime::from_secs(2));
        let got: BTreeMap<u64, Message> = received(&d.world, tap)
            .into_iter()
            .map(|(_, m)| (m.nonce(), strip_nonce(m)))
            .collect();
        answers.push(got);
    }
    answers
}
