//! Slotted listen-before-talk simulation of LAA eNBs and Wi-Fi APs on one channel.
//!
//! Time is kept in whole microseconds. After every busy period a node waits
//! `T_def + p·T_s` of idle channel, then counts its backoff down one slot at a time,
//! freezing whenever a transmission it can sense starts. Slot boundaries are measured
//! from the end of the last busy period the node sensed, so all nodes that sense the
//! same busy period share a slot grid.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const T_DEF_US: u64 = 16;
pub const T_SLOT_US: u64 = 9;
/// Compliant energy-detection threshold.
pub const CCA_DBM: f64 = -73.0;
pub const CARRIER_HZ: f64 = 5.0e9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("trace is empty")]
    EmptyTrace,
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("scenario parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, SimError>;

pub type NodeId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PriorityClass {
    C1,
    C2,
    C3,
    C4,
}

impl PriorityClass {
    pub const ALL: [PriorityClass; 4] = [Self::C1, Self::C2, Self::C3, Self::C4];

    pub fn from_index(i: u8) -> Option<Self> {
        Self::ALL.get((i as usize).checked_sub(1)?).copied()
    }

    pub fn index(self) -> u8 {
        self as u8 + 1
    }
}

impl std::fmt::Display for PriorityClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "C{}", self.index())
    }
}

impl std::str::FromStr for PriorityClass {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let digits = s.trim().trim_start_matches(['C', 'c']);
        digits
            .parse::<u8>()
            .ok()
            .and_then(Self::from_index)
            .ok_or_else(|| format!("bad priority class {s:?}"))
    }
}

/// Channel access parameters of one priority class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorityClassParams {
    pub class: PriorityClass,
    pub p: u32,
    pub q_min: u32,
    pub q_max: u32,
    pub t_mcop_us: u64,
}

impl PriorityClassParams {
    /// Downlink table. `long_mcop` selects 10 ms instead of 8 ms for C3/C4.
    pub fn downlink(class: PriorityClass, long_mcop: bool) -> Self {
        let long = if long_mcop { 10_000 } else { 8_000 };
        let (p, q_min, q_max, t_mcop_us) = match class {
            PriorityClass::C1 => (1, 4, 8, 2_000),
            PriorityClass::C2 => (1, 8, 16, 3_000),
            PriorityClass::C3 => (3, 16, 64, long),
            PriorityClass::C4 => (7, 16, 1024, long),
        };
        Self { class, p, q_min, q_max, t_mcop_us }
    }

    /// Contention window after `r` consecutive collisions.
    pub fn cw(&self, r: u32) -> u32 {
        let shifted = (self.q_min as u64) << r.min(31);
        shifted.min(self.q_max as u64) as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Enb,
    Ap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MisbehaviorPolicy {
    Compliant,
    /// With probability `1 − alpha` a draw comes from `{0..q_m−1}` instead.
    CwReduction { q_m: u32, alpha: f64 },
    NoCwGrowth,
    DeferReduction { p: u32 },
    CcaInflation { threshold_dbm: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrafficModel {
    Saturated,
    /// Frame arrivals per second.
    Poisson { lambda: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeConfig {
    pub node_id: NodeId,
    pub kind: NodeKind,
    pub position: [f64; 2],
    pub tx_power_dbm: f64,
    pub cca_threshold_dbm: f64,
    pub class: PriorityClassParams,
    pub traffic: TrafficModel,
    pub policy: MisbehaviorPolicy,
    /// Airtime of every frame this node sends.
    pub frame_us: u64,
}

impl NodeConfig {
    /// Threshold the node actually senses with.
    pub fn sensing_threshold_dbm(&self) -> f64 {
        match self.policy {
            MisbehaviorPolicy::CcaInflation { threshold_dbm } => threshold_dbm,
            _ => self.cca_threshold_dbm,
        }
    }

    fn defer_slots(&self) -> u32 {
        match self.policy {
            MisbehaviorPolicy::DeferReduction { p } => p,
            _ => self.class.p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SimError::Invalid(format!("node {}: {m}", self.node_id)));
        let c = &self.class;
        if !c.q_min.is_power_of_two() || !c.q_max.is_power_of_two() || c.q_min > c.q_max {
            return bad("q_min/q_max must be powers of two with q_min ≤ q_max".into());
        }
        if self.frame_us == 0 || self.frame_us > c.t_mcop_us {
            return bad(format!("frame_us {} outside (0, {}]", self.frame_us, c.t_mcop_us));
        }
        match self.policy {
            MisbehaviorPolicy::CwReduction { q_m, alpha } => {
                if q_m == 0 {
                    return bad("q_m must be at least 1".into());
                }
                if !(0.0..=1.0).contains(&alpha) {
                    return bad(format!("alpha {alpha} outside [0, 1]"));
                }
            }
            MisbehaviorPolicy::CcaInflation { threshold_dbm } if !threshold_dbm.is_finite() => {
                return bad("CCA threshold must be finite".into());
            }
            _ => {}
        }
        if let TrafficModel::Poisson { lambda } = self.traffic {
            if !(lambda > 0.0 && lambda.is_finite()) {
                return bad(format!("poisson rate {lambda} must be positive"));
            }
        }
        Ok(())
    }
}

/// Free-space path loss in dB at the simulation carrier. Distances under 1 m count as 1 m.
pub fn free_space_loss_db(distance_m: f64) -> f64 {
    let d = distance_m.max(1.0);
    20.0 * d.log10() + 20.0 * CARRIER_HZ.log10() - 147.55
}

pub fn distance(a: &NodeConfig, b: &NodeConfig) -> f64 {
    let dx = a.position[0] - b.position[0];
    let dy = a.position[1] - b.position[1];
    (dx * dx + dy * dy).sqrt()
}

/// Received power of `tx` at `rx` in dBm.
pub fn rx_power_dbm(tx: &NodeConfig, rx: &NodeConfig) -> f64 {
    tx.tx_power_dbm - free_space_loss_db(distance(tx, rx))
}

/// Directed "can sense" relation between nodes, indexed by position in the node list.
#[derive(Debug, Clone, PartialEq)]
pub struct InterferenceGraph {
    hears: Vec<Vec<bool>>,
}

impl InterferenceGraph {
    pub fn len(&self) -> usize {
        self.hears.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hears.is_empty()
    }

    /// Edge `tx → rx`: `rx` senses `tx`.
    pub fn senses(&self, rx: usize, tx: usize) -> bool {
        self.hears[rx][tx]
    }

    pub fn edge_count(&self) -> usize {
        self.hears.iter().map(|r| r.iter().filter(|&&b| b).count()).sum()
    }

    pub fn fully_connected(&self) -> bool {
        self.edge_count() == self.len() * self.len().saturating_sub(1)
    }
}

/// Edge X→Y iff X's power at Y reaches Y's sensing threshold.
pub fn interference_graph(nodes: &[NodeConfig]) -> InterferenceGraph {
    graph_with(nodes, |n| n.sensing_threshold_dbm())
}

fn graph_with(nodes: &[NodeConfig], threshold: impl Fn(&NodeConfig) -> f64) -> InterferenceGraph {
    let hears = nodes
        .iter()
        .enumerate()
        .map(|(y, rx)| {
            nodes
                .iter()
                .enumerate()
                .map(|(x, tx)| x != y && rx_power_dbm(tx, rx) >= threshold(rx))
                .collect()
        })
        .collect();
    InterferenceGraph { hears }
}

/// Nodes plus the sensing relation a run used.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub nodes: Vec<NodeConfig>,
    pub sensing: InterferenceGraph,
    /// Same relation at the compliant threshold; decides which overlaps destroy a frame.
    pub interference: InterferenceGraph,
}

impl Topology {
    pub fn new(nodes: Vec<NodeConfig>) -> Self {
        let sensing = interference_graph(&nodes);
        let interference = graph_with(&nodes, |n| n.cca_threshold_dbm);
        Self { nodes, sensing, interference }
    }

    pub fn index_of(&self, id: NodeId) -> Option<usize> {
        // Ids are usually 1, 2, ... in order.
        let guess = (id as usize).wrapping_sub(1);
        if self.nodes.get(guess).is_some_and(|n| n.node_id == id) {
            return Some(guess);
        }
        self.nodes.iter().position(|n| n.node_id == id)
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeConfig> {
        self.index_of(id).map(|i| &self.nodes[i])
    }

    /// Does `observer` sense transmissions of `tx`?
    pub fn senses(&self, observer: NodeId, tx: NodeId) -> bool {
        match (self.index_of(observer), self.index_of(tx)) {
            (Some(o), Some(t)) => self.sensing.senses(o, t),
            _ => false,
        }
    }
}

/// One transmission attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TxEvent {
    pub node_id: NodeId,
    pub t_s: u64,
    pub t_e: u64,
    pub class: PriorityClass,
    pub backoff_drawn: u32,
    pub cw_used: u32,
    pub retx_round: u32,
    pub collided: bool,
    pub queue_was_empty_gap: u64,
    /// Per-node frame counter; retransmissions repeat it.
    pub frame_seq: u64,
}

/// Column order of [`EventTrace::to_tsv`].
pub const TRACE_COLUMNS: [&str; 10] = [
    "node_id",
    "t_s_us",
    "t_e_us",
    "class",
    "backoff",
    "cw",
    "retx_round",
    "collided",
    "queue_empty_gap_us",
    "frame_seq",
];

#[derive(Debug, Clone, PartialEq)]
pub struct EventTrace {
    pub events: Vec<TxEvent>,
    pub topology: Topology,
    pub seed: u64,
    /// End of the last transmission.
    pub end_us: u64,
    /// Total time each Poisson node spent with an empty queue.
    pub idle_queue_us: BTreeMap<NodeId, u64>,
}

impl EventTrace {
    pub fn events_of(&self, node: NodeId) -> impl Iterator<Item = &TxEvent> {
        self.events.iter().filter(move |e| e.node_id == node)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        out.push_str(&TRACE_COLUMNS.join("\t"));
        out.push('\n');
        for e in &self.events {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                e.node_id,
                e.t_s,
                e.t_e,
                e.class,
                e.backoff_drawn,
                e.cw_used,
                e.retx_round,
                e.collided as u8,
                e.queue_was_empty_gap,
                e.frame_seq
            );
        }
        out
    }
}

/// `count(node events) / count(all events)`.
pub fn attempt_rate(trace: &EventTrace, node: NodeId) -> Result<f64> {
    if trace.events.is_empty() {
        return Err(SimError::EmptyTrace);
    }
    let n = trace.events_of(node).count();
    Ok(n as f64 / trace.events.len() as f64)
}

/// Fraction of the run a node spent with an empty transmit queue.
pub fn saturation_level(trace: &EventTrace, node: NodeId) -> Result<f64> {
    if trace.topology.node(node).is_none() {
        return Err(SimError::UnknownNode(node));
    }
    if trace.end_us == 0 {
        return Ok(0.0);
    }
    let idle = trace.idle_queue_us.get(&node).copied().unwrap_or(0);
    Ok((idle as f64 / trace.end_us as f64).min(1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelState {
    pub busy: bool,
    /// Visible transmissions in flight at the query time.
    pub active: Vec<TxEvent>,
}

/// What `observer` senses at time `t`.
pub fn ground_truth_channel(trace: &EventTrace, t: u64, observer: NodeId) -> ChannelState {
    let active: Vec<TxEvent> = trace
        .events
        .iter()
        .take_while(|e| e.t_s <= t)
        .filter(|e| e.t_e > t && e.node_id != observer && trace.topology.senses(observer, e.node_id))
        .cloned()
        .collect();
    ChannelState { busy: !active.is_empty(), active }
}

/// When a run stops accepting new transmissions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopCondition {
    TotalEvents(usize),
    /// Stop once the given node has started this many transmissions.
    NodeEvents { node: NodeId, count: usize },
}

pub fn run_sim(nodes: &[NodeConfig], seed: u64, n_events: usize) -> Result<EventTrace> {
    run_sim_until(nodes, seed, StopCondition::TotalEvents(n_events))
}

struct NodeState {
    rng: ChaCha8Rng,
    arrivals: ChaCha8Rng,
    q: u32,
    r: u32,
    counter: Option<u32>,
    drawn: u32,
    cw_used: u32,
    /// End of the latest sensed (or own) transmission.
    busy_until: u64,
    /// Grid origin of the current idle period while contending.
    origin: Option<u64>,
    transmitting: Option<usize>,
    queue: u64,
    next_arrival: Option<u64>,
    empty_since: Option<u64>,
    pending_gap: u64,
    idle_queue: u64,
    frame_seq: u64,
    events: usize,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Sim<'a> {
    nodes: &'a [NodeConfig],
    topo: Topology,
    st: Vec<NodeState>,
    events: Vec<TxEvent>,
    /// Transmissions in flight as (event index, node index).
    active: Vec<(usize, usize)>,
}

impl Sim<'_> {
    fn has_frame(&self, i: usize) -> bool {
        matches!(self.nodes[i].traffic, TrafficModel::Saturated) || self.st[i].queue > 0
    }

    fn draw_backoff(&mut self, i: usize) {
        let node = &self.nodes[i];
        let s = &mut self.st[i];
        let q = match node.policy {
            MisbehaviorPolicy::NoCwGrowth => node.class.q_min,
            _ => s.q,
        };
        let window = match node.policy {
            MisbehaviorPolicy::CwReduction { q_m, alpha } if !s.rng.random_bool(alpha) => q_m,
            _ => q,
        };
        let b = s.rng.random_range(0..window);
        s.counter = Some(b);
        s.drawn = b;
        s.cw_used = window;
    }

    fn ready_time(&self, i: usize) -> Option<u64> {
        let s = &self.st[i];
        let origin = s.origin?;
        let c = s.counter? as u64;
        Some(origin + T_DEF_US + (self.nodes[i].defer_slots() as u64 + c) * T_SLOT_US)
    }

    /// Put an idle, backlogged node on the slot grid at or after `now`.
    fn arm(&mut self, i: usize, now: u64) {
        if self.st[i].transmitting.is_some() || self.st[i].origin.is_some() || !self.has_frame(i) {
            return;
        }
        let idle_since = self.st[i].busy_until;
        if now < idle_since {
            return;
        }
        let k = (now - idle_since).div_ceil(T_SLOT_US);
        self.st[i].origin = Some(idle_since + k * T_SLOT_US);
    }

    fn freeze(&mut self, i: usize, t: u64) {
        let p = self.nodes[i].defer_slots() as u64;
        let s = &mut self.st[i];
        if let (Some(origin), Some(c)) = (s.origin, s.counter) {
            if t >= origin + T_DEF_US {
                let boundaries = (t - origin - T_DEF_US) / T_SLOT_US;
                let done = boundaries.saturating_sub(p).min(c as u64) as u32;
                s.counter = Some(c - done);
            }
        }
        s.origin = None;
    }

    fn start(&mut self, starters: &[usize], t: u64) {
        for &x in starters {
            let node = &self.nodes[x];
            let s = &mut self.st[x];
            let ev = TxEvent {
                node_id: node.node_id,
                t_s: t,
                t_e: t + node.frame_us,
                class: node.class.class,
                backoff_drawn: s.drawn,
                cw_used: s.cw_used,
                retx_round: s.r,
                collided: false,
                queue_was_empty_gap: std::mem::take(&mut s.pending_gap),
                frame_seq: s.frame_seq,
            };
            s.origin = None;
            s.counter = None;
            s.busy_until = s.busy_until.max(ev.t_e);
            s.transmitting = Some(self.events.len());
            s.events += 1;
            self.events.push(ev);
        }
        let fresh: Vec<(usize, usize)> =
            starters.iter().map(|&x| (self.st[x].transmitting.unwrap(), x)).collect();
        let interference = &self.topo.interference;
        for (k, &(e, x)) in fresh.iter().enumerate() {
            for &(a, z) in self.active.iter().chain(&fresh[k + 1..]) {
                if interference.senses(x, z) {
                    self.events[e].collided = true;
                }
                if interference.senses(z, x) {
                    self.events[a].collided = true;
                }
            }
        }
        self.active.extend_from_slice(&fresh);
        for y in 0..self.nodes.len() {
            if starters.contains(&y) {
                continue;
            }
            let mut heard_end = None;
            for &x in starters {
                if self.topo.sensing.senses(y, x) {
                    let te = t + self.nodes[x].frame_us;
                    heard_end = Some(heard_end.map_or(te, |h: u64| h.max(te)));
                }
            }
            if let Some(te) = heard_end {
                self.freeze(y, t);
                self.st[y].busy_until = self.st[y].busy_until.max(te);
            }
        }
    }

    fn finish(&mut self, t: u64) {
        let (done, still): (Vec<(usize, usize)>, Vec<(usize, usize)>) =
            self.active.iter().partition(|&&(e, _)| self.events[e].t_e <= t);
        self.active = still;
        for (e, x) in done {
            let collided = self.events[e].collided;
            let class = self.nodes[x].class;
            let s = &mut self.st[x];
            s.transmitting = None;
            if collided {
                s.r += 1;
                s.q = class.cw(s.r);
            } else {
                s.r = 0;
                s.q = class.q_min;
                s.frame_seq += 1;
                if s.queue > 0 {
                    s.queue -= 1;
                    if s.queue == 0 {
                        s.empty_since = Some(t);
                    }
                }
            }
            if self.has_frame(x) {
                self.draw_backoff(x);
            }
        }
    }

    fn arrive(&mut self, i: usize, t: u64) {
        let lambda = match self.nodes[i].traffic {
            TrafficModel::Poisson { lambda } => lambda,
            TrafficModel::Saturated => return,
        };
        let s = &mut self.st[i];
        let was_empty = s.queue == 0 && s.transmitting.is_none();
        s.queue += 1;
        let gap = Exp::new(lambda).expect("positive rate").sample(&mut s.arrivals) * 1e6;
        s.next_arrival = Some(t + (gap.round() as u64).max(1));
        if was_empty {
            if let Some(since) = s.empty_since.take() {
                s.pending_gap = t - since;
                s.idle_queue += t - since;
            }
            self.draw_backoff(i);
        }
    }
}

/// Runs the simulation until `stop` is met, then lets transmissions in flight finish.
pub fn run_sim_until(nodes: &[NodeConfig], seed: u64, stop: StopCondition) -> Result<EventTrace> {
    validate_nodes(nodes)?;
    match stop {
        StopCondition::TotalEvents(0) | StopCondition::NodeEvents { count: 0, .. } => {
            return Err(SimError::Invalid("event budget must be at least 1".into()));
        }
        StopCondition::NodeEvents { node, .. } if !nodes.iter().any(|n| n.node_id == node) => {
            return Err(SimError::UnknownNode(node));
        }
        _ => {}
    }
    let topo = Topology::new(nodes.to_vec());
    let st = nodes
        .iter()
        .map(|n| {
            let id = n.node_id as u64;
            let mut arrivals = ChaCha8Rng::seed_from_u64(mix(seed, id, 2));
            let next_arrival = match n.traffic {
                TrafficModel::Poisson { lambda } => {
                    let gap = Exp::new(lambda).expect("positive rate").sample(&mut arrivals) * 1e6;
                    Some((gap.round() as u64).max(1))
                }
                TrafficModel::Saturated => None,
            };
            NodeState {
                rng: ChaCha8Rng::seed_from_u64(mix(seed, id, 1)),
                arrivals,
                q: n.class.q_min,
                r: 0,
                counter: None,
                drawn: 0,
                cw_used: 0,
                busy_until: 0,
                origin: None,
                transmitting: None,
                queue: 0,
                next_arrival,
                empty_since: next_arrival.map(|_| 0),
                pending_gap: 0,
                idle_queue: 0,
                frame_seq: 0,
                events: 0,
            }
        })
        .collect();
    let mut sim = Sim { nodes, topo, st, events: Vec::new(), active: Vec::new() };
    for i in 0..nodes.len() {
        if sim.has_frame(i) {
            sim.draw_backoff(i);
            sim.arm(i, 0);
        }
    }

    let watched = match stop {
        StopCondition::NodeEvents { node, .. } => sim.topo.index_of(node),
        StopCondition::TotalEvents(_) => None,
    };
    let stopped = |sim: &Sim| match stop {
        StopCondition::TotalEvents(n) => sim.events.len() >= n,
        StopCondition::NodeEvents { count, .. } => sim.st[watched.unwrap()].events >= count,
    };

    loop {
        let accepting = !stopped(&sim);
        let next_end = sim.active.iter().map(|&(e, _)| sim.events[e].t_e).min();
        let next_arrival =
            if accepting { sim.st.iter().filter_map(|s| s.next_arrival).min() } else { None };
        let next_ready =
            if accepting { (0..nodes.len()).filter_map(|i| sim.ready_time(i)).min() } else { None };
        let Some(t) = [next_end, next_arrival, next_ready].into_iter().flatten().min() else {
            break;
        };
        if next_end == Some(t) {
            sim.finish(t);
        }
        if next_arrival == Some(t) {
            for i in 0..nodes.len() {
                if sim.st[i].next_arrival == Some(t) {
                    sim.arrive(i, t);
                }
            }
        }
        for i in 0..nodes.len() {
            sim.arm(i, t);
        }
        if accepting {
            let starters: Vec<usize> = (0..nodes.len()).filter(|&i| sim.ready_time(i) == Some(t)).collect();
            if !starters.is_empty() {
                sim.start(&starters, t);
            }
        }
    }

    let end_us = sim.events.iter().map(|e| e.t_e).max().unwrap_or(0);
    let mut idle_queue_us = BTreeMap::new();
    for (i, n) in nodes.iter().enumerate() {
        if let TrafficModel::Poisson { .. } = n.traffic {
            let s = &sim.st[i];
            let tail = s.empty_since.map_or(0, |since| end_us.saturating_sub(since));
            idle_queue_us.insert(n.node_id, s.idle_queue + tail);
        }
    }
    let Sim { topo, events, .. } = sim;
    Ok(EventTrace { events, topology: topo, seed, end_us, idle_queue_us })
}

pub fn validate_nodes(nodes: &[NodeConfig]) -> Result<()> {
    if nodes.is_empty() {
        return Err(SimError::Invalid("no nodes".into()));
    }
    let mut ids: Vec<NodeId> = nodes.iter().map(|n| n.node_id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(SimError::Invalid("duplicate node ids".into()));
    }
    nodes.iter().try_for_each(NodeConfig::validate)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn node(id: NodeId, kind: NodeKind, x: f64, class: PriorityClass) -> NodeConfig {
        let class = PriorityClassParams::downlink(class, false);
        NodeConfig {
            node_id: id,
            kind,
            position: [x, 0.0],
            tx_power_dbm: if kind == NodeKind::Enb { 23.0 } else { 20.0 },
            cca_threshold_dbm: CCA_DBM,
            class,
            traffic: TrafficModel::Saturated,
            policy: MisbehaviorPolicy::Compliant,
            frame_us: class.t_mcop_us,
        }
    }

    #[test]
    fn table_values() {
        let c3 = PriorityClassParams::downlink(PriorityClass::C3, false);
        assert_eq!((c3.p, c3.q_min, c3.q_max, c3.t_mcop_us), (3, 16, 64, 8000));
        assert_eq!(PriorityClassParams::downlink(PriorityClass::C4, true).t_mcop_us, 10_000);
        assert_eq!(c3.cw(1), 32);
        assert_eq!(c3.cw(5), 64);
    }

    #[test]
    fn single_node_never_collides() {
        let n = [node(1, NodeKind::Enb, 0.0, PriorityClass::C3)];
        let tr = run_sim(&n, 3, 500).unwrap();
        assert_eq!(tr.events.len(), 500);
        assert!(tr.events.iter().all(|e| !e.collided && e.retx_round == 0));
        assert_eq!(attempt_rate(&tr, 1).unwrap(), 1.0);
        for w in tr.events.windows(2) {
            let gap = w[1].t_s - w[0].t_e;
            assert_eq!(gap, T_DEF_US + (3 + w[1].backoff_drawn as u64) * T_SLOT_US);
        }
    }

    #[test]
    fn asymmetric_edge() {
        // eNB at 23 dBm, AP at 20 dBm: at ~170 m only the AP hears the eNB.
        let d = 10f64.powf((23.0 + 73.0 - (free_space_loss_db(1.0) - 0.0)) / 20.0) * 0.9;
        let nodes = [node(1, NodeKind::Enb, 0.0, PriorityClass::C3), node(2, NodeKind::Ap, d, PriorityClass::C3)];
        let g = interference_graph(&nodes);
        assert!(g.senses(1, 0));
        assert!(!g.senses(0, 1));
        assert_eq!(interference_graph(&nodes[..1]).edge_count(), 0);
    }

    #[test]
    fn no_overlap_without_collision() {
        let nodes: Vec<NodeConfig> = (0..4).map(|i| node(i, NodeKind::Ap, i as f64, PriorityClass::C3)).collect();
        let tr = run_sim(&nodes, 9, 3000).unwrap();
        for (k, a) in tr.events.iter().enumerate() {
            for b in tr.events[k + 1..].iter().take_while(|b| b.t_s < a.t_e) {
                assert_eq!(a.t_s, b.t_s, "overlap without simultaneous start");
                assert!(a.collided && b.collided);
            }
        }
    }

    #[test]
    fn empty_trace_rate_is_error() {
        let tr = EventTrace {
            events: vec![],
            topology: Topology::new(vec![]),
            seed: 0,
            end_us: 0,
            idle_queue_us: BTreeMap::new(),
        };
        assert_eq!(attempt_rate(&tr, 1), Err(SimError::EmptyTrace));
    }

    #[test]
    fn ground_truth_visibility() {
        let nodes = [node(1, NodeKind::Enb, 0.0, PriorityClass::C3), node(2, NodeKind::Ap, 5.0, PriorityClass::C3)];
        let tr = run_sim(&nodes, 1, 50).unwrap();
        let e = tr.events_of(1).next().unwrap().clone();
        let st = ground_truth_channel(&tr, e.t_s + 1, 2);
        assert!(st.busy);
        assert_eq!(st.active[0].node_id, 1);
    }

    #[test]
    fn poisson_idle_queue() {
        let mut n = node(1, NodeKind::Enb, 0.0, PriorityClass::C3);
        n.traffic = TrafficModel::Poisson { lambda: 5.0 };
        let tr = run_sim(&[n], 2, 200).unwrap();
        let eta = saturation_level(&tr, 1).unwrap();
        assert!(eta > 0.9 && eta <= 1.0, "{eta}");
        assert!(tr.events.iter().any(|e| e.queue_was_empty_gap > 0));
    }

    #[test]
    fn rejects_bad_policy() {
        let mut n = node(1, NodeKind::Enb, 0.0, PriorityClass::C3);
        n.policy = MisbehaviorPolicy::CwReduction { q_m: 0, alpha: 0.5 };
        assert!(matches!(run_sim(&[n], 1, 10), Err(SimError::Invalid(_))));
    }
}
