//! The three measurement experiments, run on a five-controller deployment
//! with a pre-rendered NIB and one probe end-node.

pub mod cdf;
pub mod nibgen;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::AgentConfig;
use crate::controller::ControllerConfig;
use crate::model::{EndpointId, GroupId, Locator, OverlayPacket, SiteId, SourceGroup};
use crate::simnet::scenario::Scenario;
use crate::simnet::{MetricsLog, SimTime};
use crate::world::{World, WorldError};

pub use cdf::{emit_cdf, CdfSeries, Cluster};
pub use nibgen::{generate_nib, GeneratedNib};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Retrieval,
    Update,
    Bootstrap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub nib_size: usize,
    pub groups: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Overrides the scenario's jitter.
    pub jitter_ms: Option<f64>,
}

impl ExperimentSpec {
    /// Full-scale defaults from the scenario's experiment block.
    pub fn from_scenario(kind: ExperimentKind, sc: &Scenario) -> Self {
        let e = &sc.experiment;
        let iterations = match kind {
            ExperimentKind::Retrieval => e.retrieval_iters,
            ExperimentKind::Update => e.update_iters,
            ExperimentKind::Bootstrap => e.bootstrap_iters,
        };
        Self {
            kind,
            nib_size: e.nib_size,
            groups: e.groups,
            iterations,
            seed: sc.seed,
            jitter_ms: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("{0}")]
    Invalid(String),
}

/// Samples plus everything the run logged.
pub struct ExperimentRun {
    pub series: CdfSeries,
    pub metrics: MetricsLog,
    pub world: World,
    pub probe: usize,
}

/// A deployment with every scenario controller, the generated NIB loaded,
/// and the probe bootstrapped against the pinned controller.
pub struct Testbed {
    pub world: World,
    pub probe: usize,
    pub nib: GeneratedNib,
    pub pinned: u32,
}

impl Testbed {
    pub fn build(sc: &Scenario, spec: &ExperimentSpec) -> Result<Self, ExperimentError> {
        if spec.groups == 0 || spec.nib_size < spec.groups {
            return Err(ExperimentError::Invalid("need at least one member per group".into()));
        }
        let site = |n: &str| sc.matrix.site(n).map_err(|e| ExperimentError::Invalid(e.to_string()));
        let probe_site = site(&sc.experiment.probe_site)?;
        let pinned_site = site(&sc.experiment.pinned_controller)?;
        let mut matrix = sc.matrix.clone();
        if let Some(j) = spec.jitter_ms {
            matrix.jitter_ms = j;
        }
        let nib = generate_nib(spec.nib_size, spec.groups, spec.seed, matrix.sites.len());
        let cfg = ControllerConfig {
            proc: SimTime::from_millis_f64(sc.proc_ms),
            spawn_on_failure: sc.spawn_on_failure,
            ..ControllerConfig::default()
        };
        let mut world = World::new(matrix, spec.seed, cfg, &nib.policy_text)?;
        world.sim.set_loss(sc.loss);
        let sites = sc
            .controllers
            .iter()
            .map(|c| site(&c.site))
            .collect::<Result<Vec<SiteId>, _>>()?;
        world.add_controllers(&sites);
        world.preload(nib.regs.clone(), nib.records.clone());
        let pinned = world
            .controllers()
            .find(|c| c.site == pinned_site)
            .map(|c| c.id)
            .ok_or_else(|| ExperimentError::Invalid("no controller at the pinned site".into()))?;
        let home = world.controller(pinned).partition;
        let eid = nibgen::probe_eid(&world.controller(0).pmap, home);
        let eth = world.alloc_addr();
        let lte = world.alloc_addr();
        let mut cfg = AgentConfig::new(
            "probe",
            7,
            vec![
                Locator::new(probe_site, eth, "eth"),
                Locator::new(probe_site, lte, "lte").with_priority(2, 100),
            ],
            vec![world.controller(pinned).addr],
        );
        cfg.eid = Some(eid);
        cfg.group = Some(GroupId::new(nibgen::PROBE_GROUP).expect("valid"));
        cfg.log_events = false;
        let probe = world.add_agent(cfg, probe_site);
        world.start_agent(probe);
        world.run_for(SimTime::from_secs(2));
        if !world.agent(probe).is_ready() {
            return Err(ExperimentError::Invalid("probe failed to bootstrap".into()));
        }
        Ok(Self {
            world,
            probe,
            nib,
            pinned,
        })
    }

    pub fn into_run(self, series: CdfSeries) -> ExperimentRun {
        ExperimentRun {
            series,
            metrics: self.world.metrics.clone(),
            world: self.world,
            probe: self.probe,
        }
    }
}

pub fn run(sc: &Scenario, spec: &ExperimentSpec) -> Result<ExperimentRun, ExperimentError> {
    match spec.kind {
        ExperimentKind::Retrieval => run_retrieval(sc, spec),
        ExperimentKind::Update => run_update(sc, spec),
        ExperimentKind::Bootstrap => run_bootstrap(sc, spec),
    }
}

/// One single-packet flow per interval to a distinct random destination;
/// samples are miss-to-install latencies.
pub fn run_retrieval(sc: &Scenario, spec: &ExperimentSpec) -> Result<ExperimentRun, ExperimentError> {
    let mut tb = Testbed::build(sc, spec)?;
    let n = spec.iterations.min(tb.nib.regs.len());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED_0001);
    let dsts: Vec<EndpointId> = sample(&mut rng, tb.nib.regs.len(), n).iter().map(|i| tb.nib.regs[i].eid).collect();
    let src = tb.world.agent(tb.probe).eid().expect("bootstrapped");
    let interval = SimTime::from_millis_f64(sc.experiment.flow_interval_ms);
    let t0 = tb.world.now();
    let before = tb.world.metrics.count("retrieval_ms");
    for (i, dst) in dsts.into_iter().enumerate() {
        tb.world.run_until(t0 + SimTime(interval.0 * i as u64));
        let pkt = OverlayPacket {
            src,
            dst,
            size_bytes: 64,
            flow_tag: i as u64,
        };
        tb.world.send_packet(tb.probe, pkt);
    }
    tb.world.run_for(SimTime::from_secs(10));
    let samples = tb.world.metrics.values("retrieval_ms")[before..].to_vec();
    Ok(tb.into_run(CdfSeries::from_samples(samples)))
}

/// Northbound re-weightings of one group's ingress at the pinned
/// controller, until `iterations` per-key samples are collected.
pub fn run_update(sc: &Scenario, spec: &ExperimentSpec) -> Result<ExperimentRun, ExperimentError> {
    let mut tb = Testbed::build(sc, spec)?;
    let groups = tb.nib.groups;
    let mut variants: BTreeMap<usize, nibgen::IngressVariant> = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED_0002);
    let mut k = 0;
    while tb.world.metrics.count("update_ms") < spec.iterations {
        let g = rng.gen_range(0..groups);
        let v = variants.entry(g).or_default();
        *v = match v {
            nibgen::IngressVariant::Primary => nibgen::IngressVariant::Weighted,
            nibgen::IngressVariant::Weighted => nibgen::IngressVariant::Primary,
        };
        let text = nibgen::policy_text(groups, |i| variants.get(&i).copied().unwrap_or_default());
        tb.world
            .northbound(tb.pinned, &text)
            .map_err(|e| ExperimentError::Invalid(e.to_string()))?;
        tb.world.run_for(SimTime::from_secs(2));
        k += 1;
        if k > spec.iterations {
            return Err(ExperimentError::Invalid("updates produce no samples".into()));
        }
    }
    let mut samples = tb.world.metrics.values("update_ms");
    samples.truncate(spec.iterations);
    Ok(tb.into_run(CdfSeries::from_samples(samples)))
}

/// Repeated bootstraps of the probe, each against a random controller.
pub fn run_bootstrap(sc: &Scenario, spec: &ExperimentSpec) -> Result<ExperimentRun, ExperimentError> {
    let mut tb = Testbed::build(sc, spec)?;
    let before = tb.world.metrics.count("bootstrap_ms");
    let addrs: Vec<_> = tb.world.controllers().map(|c| c.addr).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED_0003);
    for _ in 0..spec.iterations {
        let to = addrs[rng.gen_range(0..addrs.len())];
        tb.world.with_agent(tb.probe, |a, now, out| a.bootstrap_via(vec![to], now, out));
        tb.world.run_for(SimTime::from_secs(2));
    }
    let samples = tb.world.metrics.values("bootstrap_ms")[before..].to_vec();
    Ok(tb.into_run(CdfSeries::from_samples(samples)))
}

/// Median wall-clock cost (ns) of one NIB lookup, over batches of random
/// reads against the owning partitions.
pub fn lookup_wallclock_ns(world: &World, dsts: &[EndpointId], batches: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ctrls: Vec<_> = world.controllers().collect();
    let pmap = &ctrls[0].pmap;
    let owner: BTreeMap<_, usize> = ctrls.iter().enumerate().map(|(i, c)| (c.partition, i)).collect();
    let mut per_batch = Vec::with_capacity(batches);
    let batch = 1_000;
    for _ in 0..batches {
        let picks: Vec<(usize, EndpointId)> = (0..batch)
            .map(|_| {
                let d = dsts[rng.gen_range(0..dsts.len())];
                (owner[&pmap.partition_for(d)], d)
            })
            .collect();
        let t = Instant::now();
        let mut versions = 0u64;
        for (o, d) in &picks {
            let r = ctrls[*o].nib.get_record(&SourceGroup::Any, *d);
            versions = versions.wrapping_add(std::hint::black_box(r).version);
        }
        std::hint::black_box(versions);
        per_batch.push(t.elapsed().as_nanos() as f64 / batch as f64);
    }
    CdfSeries::from_samples(per_batch).median()
}

/// Runs a scenario as described: agents bootstrap, then every end-node
/// sends one packet per second to a random other end-node.
pub fn run_scenario(sc: &Scenario, policy_text: &str) -> Result<World, ExperimentError> {
    let mut w = World::from_scenario(sc, policy_text)?;
    let duration = SimTime::from_millis_f64(sc.duration_s.unwrap_or(30.0) * 1_000.0);
    let ends: Vec<usize> = (0..w.nodes.len())
        .filter(|&n| matches!(&w.nodes[n], crate::world::Node::Agent(a) if a.cfg.role == crate::model::NodeRole::EndNode))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed ^ 0x5EED_0004);
    let mut t = SimTime::from_secs(2);
    let mut flow = 0u64;
    while t < duration {
        w.run_until(t);
        for &a in &ends {
            let Some(src) = w.agent(a).eid() else { continue };
            let others: Vec<EndpointId> = ends.iter().filter(|&&b| b != a).filter_map(|&b| w.agent(b).eid()).collect();
            if others.is_empty() {
                continue;
            }
            let dst = others[rng.gen_range(0..others.len())];
            flow += 1;
            w.send_packet(
                a,
                OverlayPacket {
                    src,
                    dst,
                    size_bytes: 512,
                    flow_tag: flow,
                },
            );
        }
        t += SimTime::from_secs(1);
    }
    w.run_until(duration);
    Ok(w)
}
