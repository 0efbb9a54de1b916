//! Northbound changes seen from the requesters' side.

use edgeplane::agent::{AgentConfig, AgentEvent};
use edgeplane::experiments::nibgen::{policy_text, IngressVariant};
use edgeplane::model::{EndpointId, Locator, OverlayPacket, RecordKey, SiteId};
use edgeplane::simnet::SimTime;
use edgeplane::world::World;

use super::deploy::{deployment, probe_group, Deployment, BCN, CA, FRA, IRL, OR, PAIRS, VA};

pub fn requester(w: &mut World, name: &str, device: u64, site: SiteId) -> usize {
    let ctrl = w.controller_at(site).unwrap_or_else(|| w.controller(0).addr);
    let eth = w.alloc_addr();
    let mut cfg = AgentConfig::new(name, device, vec![Locator::new(site, eth, "eth")], vec![ctrl]);
    cfg.group = Some(probe_group());
    let a = w.add_agent(cfg, site);
    w.start_agent(a);
    a
}

pub fn send(w: &mut World, a: usize, dst: EndpointId, tag: u64) {
    let src = w.agent(a).eid().unwrap_or_else(|| panic!("{} {:?}", w.agent(a).cfg.name, w.agent(a).log()));
    w.send_packet(
        a,
        OverlayPacket {
            src,
            dst,
            size_bytes: 64,
            flow_tag: tag,
        },
    );
}

/// The deployed policy with group `g` re-weighted.
pub fn reweighted(d: &Deployment, g: usize) -> String {
    let text = policy_text(d.nib.groups, |i| if i == g { IngressVariant::Weighted } else { IngressVariant::Primary });
    format!("{text}{PAIRS}")
}

/// Versions of the applied notifies for `dst`. They carry the key the agent
/// subscribed under, which need not be the record's key.
pub fn notifies(w: &World, a: usize, dst: EndpointId) -> Vec<u64> {
    w.agent(a)
        .log()
        .iter()
        .filter_map(|e| match e {
            AgentEvent::Notified { key, version, applied, .. } if key.dst == dst => {
                assert!(applied);
                Some(*version)
            }
            _ => None,
        })
        .collect()
}

/// First member of generated group `g`.
pub fn member_of(d: &Deployment, g: u32) -> EndpointId {
    d.nib.regs.iter().find(|r| r.eid.0 >> 10 == (10 << 14) | g).expect("group has members").eid
}

pub struct Fanout {
    pub requesters: usize,
    pub per_agent: Vec<Vec<u64>>,
    pub cached: Vec<u64>,
    pub bystander: u64,
    /// Notifications the controller's change report lists for the key.
    pub reported: usize,
    pub complete: bool,
}

/// Requesters spread over every site ask for one g3 member; then g3 is
/// re-weighted. A bystander holding another key watches.
pub fn fanout(seed: u64) -> Fanout {
    let mut d = deployment(4_000, 8, seed, false);
    let sites = [BCN, IRL, FRA, VA, CA, OR, BCN, CA];
    let agents: Vec<usize> = sites
        .iter()
        .enumerate()
        .map(|(i, s)| requester(&mut d.world, &format!("r{i}"), 100 + i as u64, *s))
        .collect();
    let bystander = requester(&mut d.world, "bystander", 99, FRA);
    d.world.run_for(SimTime::from_secs(2));
    let dst = member_of(&d, 3);
    let other = member_of(&d, 5);
    for (i, a) in agents.iter().enumerate() {
        send(&mut d.world, *a, dst, i as u64);
    }
    send(&mut d.world, bystander, other, 0);
    d.world.run_for(SimTime::from_secs(2));
    let text = reweighted(&d, 3);
    d.world.northbound(2, &text).unwrap();
    d.world.run_for(SimTime::from_secs(3));
    let report = d.world.controller(2).reports().last().unwrap();
    Fanout {
        requesters: agents.len(),
        per_agent: agents.iter().map(|a| notifies(&d.world, *a, dst)).collect(),
        cached: agents.iter().map(|a| d.world.agent(*a).cache()[&dst].record.version).collect(),
        bystander: d.world.agent(bystander).stats.notifies,
        reported: report.notified.iter().filter(|(k, _)| k.dst == dst).count(),
        complete: report.is_complete(),
    }
}

pub struct Staleness {
    /// Last encapsulation with the superseded version after the change.
    pub last_stale: Option<SimTime>,
    /// The first refresh tick past fetch + ttl/2, plus a second for the reply.
    pub bound: SimTime,
    pub notifies: u64,
    pub final_version: u64,
}

/// The owner restarts (dropping its subscriptions) just before a change, so
/// only the refresh schedule can replace the cached version. The agent sends
/// every 100 ms throughout.
pub fn staleness(seed: u64, lag_s: u64) -> Staleness {
    let mut d = deployment(2_000, 4, seed, false);
    let a = requester(&mut d.world, "r", 6, BCN);
    d.world.run_for(SimTime::from_secs(2));
    let dst = member_of(&d, 1);
    let owner = d.world.controllers().find(|c| c.pmap.owns(c.partition, dst)).unwrap().id;
    let tick = d.world.agent(a).cfg.refresh_tick;
    let mut tag = 0;
    let mut pump = |d: &mut Deployment, secs: u64| {
        for _ in 0..secs * 10 {
            tag += 1;
            send(&mut d.world, a, dst, tag);
            d.world.run_for(SimTime::from_millis(100));
        }
    };
    pump(&mut d, lag_s);
    let entry = d.world.agent(a).cache()[&dst].clone();
    let ttl = SimTime::from_secs(u64::from(entry.record.ttl_s));
    d.world.restart_controller(owner);
    let text = reweighted(&d, 1);
    d.world.northbound(0, &text).unwrap();
    let changed = d.world.now();
    pump(&mut d, 90);
    let due = entry.fetched_at + SimTime(ttl.0 / 2) + tick + SimTime::from_secs(1);
    let mut last_stale = None;
    for e in d.world.agent(a).log() {
        if let AgentEvent::Encapsulated { at, version, key, .. } = e {
            if *key == RecordKey::any(dst) && *at > changed && *version == entry.record.version {
                last_stale = Some(*at);
            }
        }
    }
    Staleness {
        last_stale,
        bound: due.max(changed + tick + SimTime::from_secs(1)),
        notifies: d.world.agent(a).stats.notifies,
        final_version: d.world.agent(a).cache()[&dst].record.version,
    }
}
