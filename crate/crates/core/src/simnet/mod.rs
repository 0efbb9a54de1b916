//! Deterministic discrete-event network simulator.
//!
//! Datagrams travel between underlay addresses; each address belongs to a
//! node placed at a site, and one-way delay is half the sites' RTT plus
//! optional uniform jitter. Timers share the same event queue.

pub mod scenario;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{SiteId, UnderlayAddr};

/// Simulated time, or a span of it, in microseconds.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us)
    }

    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000)
    }

    pub const fn from_secs(s: u64) -> Self {
        SimTime(s * 1_000_000)
    }

    pub fn from_millis_f64(ms: f64) -> Self {
        SimTime((ms * 1_000.0).round().max(0.0) as u64)
    }

    pub fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_millis_f64(self) -> f64 {
        self.0 as f64 / 1_000.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1_000_000.0
    }

    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, o: SimTime) -> SimTime {
        SimTime(self.0.saturating_add(o.0))
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, o: SimTime) {
        self.0 = self.0.saturating_add(o.0);
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, o: SimTime) -> SimTime {
        SimTime(self.0 - o.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}ms", self.as_millis_f64())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MatrixError {
    #[error("latency matrix must be square with one row per site")]
    Shape,
    #[error("rtt[{0}][{1}] differs from rtt[{1}][{0}]")]
    Asymmetric(usize, usize),
    #[error("rtt[{0}][{0}] must be zero")]
    Diagonal(usize),
    #[error("rtt[{0}][{1}] must be finite and non-negative")]
    Value(usize, usize),
    #[error("unknown site {0:?}")]
    UnknownSite(String),
}

/// Site-to-site average RTTs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyMatrix {
    pub sites: Vec<String>,
    pub rtt_ms: Vec<Vec<f64>>,
    #[serde(default)]
    pub jitter_ms: f64,
}

impl LatencyMatrix {
    pub fn new(sites: Vec<String>, rtt_ms: Vec<Vec<f64>>, jitter_ms: f64) -> Result<Self, MatrixError> {
        let m = Self {
            sites,
            rtt_ms,
            jitter_ms,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), MatrixError> {
        let n = self.sites.len();
        if self.rtt_ms.len() != n || self.rtt_ms.iter().any(|r| r.len() != n) {
            return Err(MatrixError::Shape);
        }
        for i in 0..n {
            if self.rtt_ms[i][i] != 0.0 {
                return Err(MatrixError::Diagonal(i));
            }
            for j in 0..n {
                let v = self.rtt_ms[i][j];
                if !v.is_finite() || v < 0.0 {
                    return Err(MatrixError::Value(i, j));
                }
                if v != self.rtt_ms[j][i] {
                    return Err(MatrixError::Asymmetric(i, j));
                }
            }
        }
        Ok(())
    }

    pub fn site(&self, name: &str) -> Result<SiteId, MatrixError> {
        self.sites
            .iter()
            .position(|s| s.eq_ignore_ascii_case(name))
            .map(|i| SiteId(i as u16))
            .ok_or_else(|| MatrixError::UnknownSite(name.to_string()))
    }

    pub fn name(&self, site: SiteId) -> &str {
        &self.sites[site.index()]
    }

    pub fn rtt(&self, a: SiteId, b: SiteId) -> SimTime {
        SimTime::from_millis_f64(self.rtt_ms[a.index()][b.index()])
    }

    /// Half the RTT, before jitter.
    pub fn one_way(&self, a: SiteId, b: SiteId) -> SimTime {
        SimTime((self.rtt_ms[a.index()][b.index()] * 500.0).round() as u64)
    }
}

/// Append-only named series of `(time, value)` samples.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    series: BTreeMap<String, Vec<(SimTime, f64)>>,
}

impl MetricsLog {
    pub fn record(&mut self, name: &str, at: SimTime, value: f64) {
        match self.series.get_mut(name) {
            Some(s) => {
                debug_assert!(s.last().is_none_or(|(t, _)| *t <= at));
                s.push((at, value));
            }
            None => {
                self.series.insert(name.to_string(), vec![(at, value)]);
            }
        }
    }

    pub fn series(&self, name: &str) -> &[(SimTime, f64)] {
        self.series.get(name).map_or(&[], Vec::as_slice)
    }

    pub fn values(&self, name: &str) -> Vec<f64> {
        self.series(name).iter().map(|(_, v)| *v).collect()
    }

    pub fn count(&self, name: &str) -> usize {
        self.series(name).len()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.series.keys().map(String::as_str)
    }

    /// Line-oriented dump: `name<TAB>time_us<TAB>value`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, s) in &self.series {
            for (t, v) in s {
                out.push_str(&format!("{name}\t{}\t{v}\n", t.0));
            }
        }
        out
    }
}

/// One thing the simulator delivers to the driving loop.
#[derive(Debug, Clone, PartialEq)]
pub enum Event<P, T> {
    Deliver {
        node: usize,
        from: UnderlayAddr,
        to: UnderlayAddr,
        payload: P,
    },
    Timer {
        node: usize,
        timer: T,
    },
    /// Churn or scripted failure; already applied to the node's state.
    NodeStatus {
        node: usize,
        up: bool,
    },
}

struct Queued<P, T> {
    at: SimTime,
    seq: u64,
    event: Event<P, T>,
}

impl<P, T> PartialEq for Queued<P, T> {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}
impl<P, T> Eq for Queued<P, T> {}
impl<P, T> PartialOrd for Queued<P, T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<P, T> Ord for Queued<P, T> {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap.
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct NetStats {
    pub sent: u64,
    pub delivered: u64,
    pub lost: u64,
    pub to_down_node: u64,
    pub unroutable: u64,
}

/// Outcome of [`Simulator::send`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendResult {
    Scheduled(SimTime),
    Dropped,
}

/// Event queue plus the underlay network model.
pub struct Simulator<P, T> {
    now: SimTime,
    seq: u64,
    queue: BinaryHeap<Queued<P, T>>,
    matrix: LatencyMatrix,
    loss: f64,
    rng: ChaCha8Rng,
    up: Vec<bool>,
    node_site: Vec<SiteId>,
    addrs: HashMap<UnderlayAddr, (usize, SiteId)>,
    pub stats: NetStats,
}

impl<P, T> Simulator<P, T> {
    pub fn new(matrix: LatencyMatrix, seed: u64) -> Self {
        Self {
            now: SimTime::ZERO,
            seq: 0,
            queue: BinaryHeap::new(),
            matrix,
            loss: 0.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            up: Vec::new(),
            node_site: Vec::new(),
            addrs: HashMap::new(),
            stats: NetStats::default(),
        }
    }

    pub fn set_loss(&mut self, loss: f64) {
        self.loss = loss.clamp(0.0, 1.0);
    }

    pub fn set_jitter_ms(&mut self, jitter: f64) {
        self.matrix.jitter_ms = jitter.max(0.0);
    }

    pub fn matrix(&self) -> &LatencyMatrix {
        &self.matrix
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn add_node(&mut self, site: SiteId) -> usize {
        assert!(site.index() < self.matrix.sites.len(), "site {site:?} outside the matrix");
        self.up.push(true);
        self.node_site.push(site);
        self.up.len() - 1
    }

    /// Binds an underlay address to `node`. The address may sit at a
    /// different site than the node's home (multi-homed end-nodes).
    pub fn bind(&mut self, node: usize, addr: UnderlayAddr, site: SiteId) {
        assert!(site.index() < self.matrix.sites.len(), "site {site:?} outside the matrix");
        self.addrs.insert(addr, (node, site));
    }

    pub fn unbind(&mut self, addr: UnderlayAddr) {
        self.addrs.remove(&addr);
    }

    pub fn owner_of(&self, addr: UnderlayAddr) -> Option<usize> {
        self.addrs.get(&addr).map(|(n, _)| *n)
    }

    pub fn node_count(&self) -> usize {
        self.up.len()
    }

    pub fn site_of(&self, node: usize) -> SiteId {
        self.node_site[node]
    }

    pub fn is_up(&self, node: usize) -> bool {
        self.up[node]
    }

    /// Takes effect immediately; queued deliveries to a down node are dropped
    /// when they come due.
    pub fn set_node_up(&mut self, node: usize, up: bool) {
        self.up[node] = up;
    }

    /// Schedules a status flip for later, reported as [`Event::NodeStatus`].
    pub fn schedule_status(&mut self, node: usize, at: SimTime, up: bool) {
        let at = at.max(self.now);
        self.push(at, Event::NodeStatus { node, up });
    }

    fn push(&mut self, at: SimTime, event: Event<P, T>) {
        self.seq += 1;
        self.queue.push(Queued {
            at,
            seq: self.seq,
            event,
        });
    }

    pub fn schedule(&mut self, node: usize, delay: SimTime, timer: T) {
        let at = self.now + delay;
        self.push(at, Event::Timer { node, timer });
    }

    pub fn schedule_at(&mut self, node: usize, at: SimTime, timer: T) {
        let at = at.max(self.now);
        self.push(at, Event::Timer { node, timer });
    }

    fn jitter(&mut self) -> i64 {
        let j = self.matrix.jitter_ms;
        if j <= 0.0 {
            return 0;
        }
        let us = (j * 1_000.0) as i64;
        self.rng.gen_range(-us..=us)
    }

    /// Sends `payload` from `from` to `to`, leaving after `delay`.
    pub fn send(&mut self, from: UnderlayAddr, to: UnderlayAddr, payload: P, delay: SimTime) -> SendResult {
        self.stats.sent += 1;
        let Some(&(_, src_site)) = self.addrs.get(&from) else {
            self.stats.unroutable += 1;
            return SendResult::Dropped;
        };
        let Some(&(node, dst_site)) = self.addrs.get(&to) else {
            self.stats.unroutable += 1;
            return SendResult::Dropped;
        };
        if self.loss > 0.0 && self.rng.gen::<f64>() < self.loss {
            self.stats.lost += 1;
            return SendResult::Dropped;
        }
        let base = self.matrix.one_way(src_site, dst_site).0 as i64;
        let jitter = self.jitter();
        let flight = (base + jitter).max(0) as u64;
        let at = self.now + delay + SimTime(flight);
        self.push(
            at,
            Event::Deliver {
                node,
                from,
                to,
                payload,
            },
        );
        SendResult::Scheduled(at)
    }

    /// Next event at or before `until`, advancing the clock. Deliveries and
    /// timers for down nodes are discarded along the way.
    pub fn next_event(&mut self, until: SimTime) -> Option<(SimTime, Event<P, T>)> {
        loop {
            if self.queue.peek().is_none_or(|q| q.at > until) {
                return None;
            }
            let q = self.queue.pop().expect("peeked");
            debug_assert!(q.at >= self.now, "causality");
            self.now = q.at;
            match q.event {
                Event::NodeStatus { node, up } => {
                    self.up[node] = up;
                    return Some((q.at, Event::NodeStatus { node, up }));
                }
                Event::Deliver { node, .. } if !self.up[node] => {
                    self.stats.to_down_node += 1;
                }
                Event::Timer { node, .. } if !self.up[node] => {}
                ev => {
                    if matches!(ev, Event::Deliver { .. }) {
                        self.stats.delivered += 1;
                    }
                    return Some((q.at, ev));
                }
            }
        }
    }

    /// Advances the clock to `t` once the queue holds nothing earlier.
    pub fn advance_to(&mut self, t: SimTime) {
        if self.queue.peek().is_none_or(|q| q.at >= t) && t > self.now {
            self.now = t;
        }
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    /// Drains events up to `until` through `handler`, then moves the clock
    /// to `until`.
    pub fn run_until(&mut self, until: SimTime, mut handler: impl FnMut(&mut Self, SimTime, Event<P, T>)) {
        while let Some((t, ev)) = self.next_event(until) {
            handler(self, t, ev);
        }
        self.advance_to(until);
    }
}

/// Exponential up/down intervals per node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChurnModel {
    pub mean_up_s: f64,
    pub mean_down_s: f64,
    pub seed: u64,
}

impl ChurnModel {
    /// Status flips for `nodes` within `[0, horizon)`; every node starts up.
    pub fn schedule(&self, nodes: &[usize], horizon: SimTime) -> Vec<(SimTime, usize, bool)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = Vec::new();
        let draw = |rng: &mut ChaCha8Rng, mean: f64| {
            let u: f64 = rng.gen_range(f64::EPSILON..1.0);
            SimTime::from_millis_f64(-u.ln() * mean * 1_000.0).max(SimTime(1))
        };
        for &n in nodes {
            let mut t = SimTime::ZERO;
            let mut up = true;
            loop {
                let mean = if up { self.mean_up_s } else { self.mean_down_s };
                t += draw(&mut rng, mean);
                if t >= horizon {
                    break;
                }
                up = !up;
                out.push((t, n, up));
            }
        }
        out.sort_by_key(|(t, n, _)| (*t, *n));
        out
    }
}

/// Output of a driven component (controller or agent): network sends, timers
/// and metric samples, applied by the loop after the handler returns.
#[derive(Debug, Clone, PartialEq)]
pub enum Action<P, T> {
    Send {
        from: UnderlayAddr,
        to: UnderlayAddr,
        payload: P,
        delay: SimTime,
    },
    Timer {
        delay: SimTime,
        timer: T,
    },
    Metric {
        name: &'static str,
        value: f64,
        delay: SimTime,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outbox<P, T> {
    pub actions: Vec<Action<P, T>>,
}

impl<P, T> Default for Outbox<P, T> {
    fn default() -> Self {
        Self { actions: Vec::new() }
    }
}

impl<P, T> Outbox<P, T> {
    pub fn send(&mut self, from: UnderlayAddr, to: UnderlayAddr, payload: P, delay: SimTime) {
        self.actions.push(Action::Send {
            from,
            to,
            payload,
            delay,
        });
    }

    pub fn timer(&mut self, delay: SimTime, timer: T) {
        self.actions.push(Action::Timer { delay, timer });
    }

    pub fn metric(&mut self, name: &'static str, value: f64, delay: SimTime) {
        self.actions.push(Action::Metric { name, value, delay });
    }

    pub fn sends(&self) -> impl Iterator<Item = (&UnderlayAddr, &P)> {
        self.actions.iter().filter_map(|a| match a {
            Action::Send { to, payload, .. } => Some((to, payload)),
            _ => None,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}
