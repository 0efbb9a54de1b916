mod support;

use edgeplane::agent::AgentEvent;
use edgeplane::model::EndpointId;
use edgeplane::simnet::SimTime;
use support::deploy::{flows_across_a_failure, rtt, Deployment, BCN, CA, FRA, IRL, OR, VA};

const P: f64 = 2.0;

fn check(d: &Deployment, probe: usize, dsts: &[EndpointId]) {
    let a = d.world.agent(probe);
    assert_eq!(a.stats.unresolved, 0);
    assert_eq!(d.world.metrics.count("unresolved"), 0);
    assert!(a.stats.failovers >= 1);
    let mut done = vec![false; dsts.len()];
    for e in a.log() {
        if let AgentEvent::Encapsulated { flow_tag, .. } = e {
            done[*flow_tag as usize] = true;
        }
    }
    assert!(done.iter().all(|x| *x), "{} flows never sent", done.iter().filter(|x| !**x).count());
    // Exhausted retries, then a fresh retrieval at the next controller whose
    // registration and record lookups may each cross to the farthest peer.
    let far = [IRL, FRA, VA, CA, OR].iter().map(|s| rtt(FRA, *s)).fold(0.0, f64::max);
    let bound = 7_000.0 + rtt(BCN, FRA) + 2.0 * (far + 3.0 * P);
    let worst = d.world.metrics.values("retrieval_ms").iter().copied().fold(0.0, f64::max);
    assert!(worst <= bound, "worst {worst} ms, bound {bound} ms");
    assert!(worst > 1_000.0, "no flow waited on the dead controller");
}

#[test]
fn active_controller_dies_and_survivors_absorb_it() {
    let (d, probe, dsts, _) = flows_across_a_failure(false, 0);
    check(&d, probe, &dsts);
    assert_eq!(d.world.agent(probe).active_controller(), Some(d.world.controller(1).addr));
}

#[test]
fn active_controller_dies_and_is_replaced() {
    let (d, probe, dsts, _) = flows_across_a_failure(true, 0);
    check(&d, probe, &dsts);
    assert_eq!(d.world.metrics.count("controller_spawned"), 1);
}

#[test]
fn losing_a_partition_owner_leaves_no_flow_unresolved() {
    let (d, probe, dsts, kill_at) = flows_across_a_failure(false, 3);
    let a = d.world.agent(probe);
    assert_eq!(a.stats.unresolved, 0);
    let sent = a.log().iter().filter(|e| matches!(e, AgentEvent::Encapsulated { .. })).count();
    assert_eq!(sent, dsts.len());
    let late = d.world.metrics.values("retrieval_ms").iter().filter(|v| **v > 1_000.0).count();
    assert!(late > 0 && kill_at > SimTime::ZERO);
}

