//! Central evaluation: merge monitor reports, infer who each eNB should defer to,
//! reconstruct its backoff draws and compare them with what the standard allows.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mac::{NodeId, PriorityClass, PriorityClassParams, T_DEF_US, T_SLOT_US};
use crate::monitor::{MonitorReport, ObservationVector};
use crate::signal::LocalId;

pub type GlobalId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HubError {
    #[error("local id {local_id} of monitor {monitor} matches several eNBs: {candidates:?}")]
    Ambiguous { monitor: NodeId, local_id: LocalId, candidates: Vec<(NodeId, LocalId)> },
    #[error("no usable observations")]
    InsufficientData,
    #[error("need at least {needed} observations, have {have}")]
    BelowMinimum { needed: usize, have: usize },
    #[error("invalid hub setting: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, HubError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HubConfig {
    /// Start-time tolerance between monitors, µs.
    pub epsilon_us: f64,
    /// Fraction of the smaller subset that must line up for two local IDs to merge.
    pub match_fraction: f64,
    /// Hidden-eNB threshold as overlaps per observation of the smaller set.
    pub gamma_int_rate: f64,
    pub delta: f64,
    /// Minimum number of usable estimates before a verdict is rendered.
    pub min_obs: usize,
    /// Use at most this many estimates per verdict (earliest first).
    pub max_obs: Option<usize>,
    /// How many of a monitor's latest flags count as "recent".
    pub recent_flags: usize,
    /// Keep estimates below zero in M instead of discarding them.
    pub keep_negative: bool,
    pub long_mcop: bool,
}

impl Default for HubConfig {
    fn default() -> Self {
        Self {
            epsilon_us: 1.0,
            match_fraction: 0.8,
            gamma_int_rate: 0.003,
            delta: 0.05,
            min_obs: 100,
            max_obs: None,
            recent_flags: 16,
            keep_negative: false,
            long_mcop: false,
        }
    }
}

impl HubConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_us >= 0.0) {
            return Err(HubError::Invalid("epsilon_us must be ≥ 0".into()));
        }
        if !(self.match_fraction > 0.0 && self.match_fraction <= 1.0) {
            return Err(HubError::Invalid("match_fraction must be in (0, 1]".into()));
        }
        if !(self.gamma_int_rate >= 0.0) || !(0.0..=1.0).contains(&self.delta) {
            return Err(HubError::Invalid("gamma_int_rate ≥ 0 and delta in [0, 1] required".into()));
        }
        if self.min_obs == 0 || self.max_obs == Some(0) {
            return Err(HubError::Invalid("observation counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedObservation {
    pub t_s: f64,
    pub t_e: f64,
    pub global_enb_id: GlobalId,
    pub class: PriorityClass,
    pub retx_round: u32,
    /// `(monitor, h)` for every monitor that reported this frame.
    pub hidden_flags: Vec<(NodeId, u8)>,
}

impl MergedObservation {
    fn duration(&self) -> f64 {
        self.t_e - self.t_s
    }
}

/// Observations attributed to one physical eNB.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedSet {
    pub global_id: GlobalId,
    /// Local IDs that were folded into this set.
    pub members: Vec<(NodeId, LocalId)>,
    pub observations: Vec<MergedObservation>,
}

struct Subset {
    source: NodeId,
    label: LocalId,
    obs: Vec<MergedObservation>,
}

fn subsets_from_reports(reports: &[MonitorReport]) -> Vec<Subset> {
    let mut map: BTreeMap<(NodeId, LocalId), Vec<MergedObservation>> = BTreeMap::new();
    for r in reports {
        for o in &r.observations {
            map.entry((r.monitor_id, o.local_id)).or_default().push(lift(o, r.monitor_id));
        }
    }
    map.into_iter()
        .map(|((source, label), mut obs)| {
            obs.sort_by(|a, b| a.t_s.total_cmp(&b.t_s));
            Subset { source, label, obs }
        })
        .collect()
}

fn lift(o: &ObservationVector, monitor: NodeId) -> MergedObservation {
    MergedObservation {
        t_s: o.t_s,
        t_e: o.t_e,
        global_enb_id: 0,
        class: o.class,
        retx_round: o.retx_round,
        hidden_flags: vec![(monitor, o.hidden)],
    }
}

fn same_frame(a: &MergedObservation, b: &MergedObservation, eps: f64) -> bool {
    (a.t_s - b.t_s).abs() <= eps && (a.duration() - b.duration()).abs() <= eps
}

/// Number of observations in `a` with a counterpart in `b` (both sorted by start).
fn matching_count(a: &[MergedObservation], b: &[MergedObservation], eps: f64) -> usize {
    a.iter()
        .filter(|x| {
            let k = b.partition_point(|y| y.t_s < x.t_s - eps);
            b[k..].iter().take_while(|y| y.t_s <= x.t_s + eps).any(|y| same_frame(x, y, eps))
        })
        .count()
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

fn merge_subsets(subsets: Vec<Subset>, eps: f64, fraction: f64) -> Result<Vec<MergedSet>> {
    let n = subsets.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in i + 1..n {
            // Already joined: the comparison cannot change the components.
            if subsets[i].source == subsets[j].source || find(&mut parent, i) == find(&mut parent, j) {
                continue;
            }
            let (a, b) = (&subsets[i].obs, &subsets[j].obs);
            let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
            if small.is_empty() {
                continue;
            }
            let need = (fraction * small.len() as f64).ceil() as usize;
            if matching_count(small, large, eps) >= need.max(1) {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                parent[ri] = rj;
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }
    for members in groups.values() {
        let mut seen = BTreeSet::new();
        for &m in members {
            let s = &subsets[m];
            if !seen.insert(s.source) {
                return Err(HubError::Ambiguous {
                    monitor: s.source,
                    local_id: s.label,
                    candidates: members.iter().map(|&k| (subsets[k].source, subsets[k].label)).collect(),
                });
            }
        }
    }

    let mut sets: Vec<MergedSet> = groups
        .into_values()
        .map(|members| {
            let mut all: Vec<MergedObservation> =
                members.iter().flat_map(|&m| subsets[m].obs.iter().cloned()).collect();
            all.sort_by(|a, b| a.t_s.total_cmp(&b.t_s));
            let mut merged: Vec<MergedObservation> = Vec::with_capacity(all.len());
            for o in all {
                let dup = merged.iter_mut().rev().take_while(|m| o.t_s - m.t_s <= eps).find(|m| {
                    same_frame(m, &o, eps)
                        && !o.hidden_flags.iter().any(|(k, _)| m.hidden_flags.iter().any(|(j, _)| j == k))
                });
                match dup {
                    Some(m) => {
                        m.hidden_flags.extend(o.hidden_flags);
                        m.hidden_flags.sort_unstable();
                        m.retx_round = m.retx_round.max(o.retx_round);
                    }
                    None => merged.push(o),
                }
            }
            let mut ids: Vec<(NodeId, LocalId)> =
                members.iter().map(|&m| (subsets[m].source, subsets[m].label)).collect();
            ids.sort_unstable();
            MergedSet { global_id: 0, members: ids, observations: merged }
        })
        .filter(|s| !s.observations.is_empty())
        .collect();
    sets.sort_by(|a, b| a.observations[0].t_s.total_cmp(&b.observations[0].t_s));
    for (k, s) in sets.iter_mut().enumerate() {
        s.global_id = k as GlobalId + 1;
        for o in s.observations.iter_mut() {
            o.global_enb_id = s.global_id;
        }
    }
    Ok(sets)
}

/// Groups local IDs of different monitors that describe the same eNB and collapses
/// duplicate observations. Global IDs are numbered from 1 by first appearance.
pub fn match_ids(reports: &[MonitorReport], epsilon_us: f64, match_fraction: f64) -> Result<Vec<MergedSet>> {
    merge_subsets(subsets_from_reports(reports), epsilon_us, match_fraction)
}

/// Runs the matching step again on sets that are already merged.
pub fn rematch(sets: &[MergedSet], epsilon_us: f64, match_fraction: f64) -> Result<Vec<MergedSet>> {
    let subsets = sets
        .iter()
        .map(|s| Subset { source: s.global_id, label: s.global_id, obs: s.observations.clone() })
        .collect();
    let mut out = merge_subsets(subsets, epsilon_us, match_fraction)?;
    // Keep the original provenance of sets that were not folded together.
    for s in out.iter_mut() {
        s.members = s
            .members
            .iter()
            .flat_map(|(g, _)| sets.iter().find(|x| x.global_id == *g).map(|x| x.members.clone()).unwrap_or_default())
            .collect();
        s.members.sort_unstable();
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Neighborhood {
    pub aps: BTreeSet<NodeId>,
    pub enbs: BTreeSet<GlobalId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NeighborhoodGraph {
    pub per_enb: BTreeMap<GlobalId, Neighborhood>,
}

/// Overlapping frame pairs between two eNBs, ignoring pairs that start in the same slot
/// (those are ordinary collisions between neighbours).
pub fn overlap_count(a: &[MergedObservation], b: &[MergedObservation], epsilon_us: f64) -> usize {
    let same_slot = T_SLOT_US as f64 / 2.0 + epsilon_us;
    let max_len = b.iter().map(|o| o.duration()).fold(0.0, f64::max);
    let mut count = 0;
    for x in a {
        let k = b.partition_point(|y| y.t_s < x.t_s - max_len);
        count += b[k..]
            .iter()
            .take_while(|y| y.t_s < x.t_e)
            .filter(|y| y.t_e > x.t_s && (y.t_s - x.t_s).abs() > same_slot)
            .count();
    }
    count
}

/// APs are one-hop when any of their recent flags for this eNB is 0; eNB pairs are
/// hidden from each other when they overlap more than `gamma_int_rate · min(n_a, n_b)`
/// times.
pub fn infer_enb_neighborhood(sets: &[MergedSet], cfg: &HubConfig) -> NeighborhoodGraph {
    let mut graph = NeighborhoodGraph::default();
    for s in sets {
        let mut flags: BTreeMap<NodeId, Vec<u8>> = BTreeMap::new();
        for o in &s.observations {
            for &(k, h) in &o.hidden_flags {
                flags.entry(k).or_default().push(h);
            }
        }
        let aps = flags
            .into_iter()
            .filter(|(_, hs)| hs.iter().rev().take(cfg.recent_flags.max(1)).any(|&h| h == 0))
            .map(|(k, _)| k)
            .collect();
        graph.per_enb.insert(s.global_id, Neighborhood { aps, enbs: BTreeSet::new() });
    }
    for (i, a) in sets.iter().enumerate() {
        for b in &sets[i + 1..] {
            let n = a.observations.len().min(b.observations.len()) as f64;
            let overlaps = overlap_count(&a.observations, &b.observations, cfg.epsilon_us) as f64;
            if overlaps <= cfg.gamma_int_rate * n {
                graph.per_enb.get_mut(&a.global_id).unwrap().enbs.insert(b.global_id);
                graph.per_enb.get_mut(&b.global_id).unwrap().enbs.insert(a.global_id);
            }
        }
    }
    graph
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    /// No earlier frame of the same eNB to measure from.
    NoPredecessor,
    /// Larger than the contention window allows: the queue was probably empty.
    Unsaturated,
    /// Below zero: something the eNB did not defer to was counted as a freeze.
    Negative,
    /// Every monitor was transmitting at some point of the gap, so an intermediate
    /// frame may be missing.
    Unobserved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackoffEstimate {
    pub t_s: f64,
    /// Rounded estimate in slots.
    pub b_hat: i64,
    pub raw: f64,
    /// Contention window the eNB should have used.
    pub q: u32,
    pub class: PriorityClass,
    pub retx_round: u32,
    /// Number of intermediate busy periods.
    pub intermediates: usize,
    pub excluded: Option<ExclusionReason>,
}

impl BackoffEstimate {
    pub fn usable(&self) -> bool {
        self.excluded.is_none()
    }
}

/// Busy intervals other than eNB A's own frames that A is expected to defer to.
#[derive(Debug, Clone, Default)]
pub struct ActivityLog {
    intervals: Vec<(f64, f64)>,
    max_len: f64,
    /// Per-monitor own transmissions, used to spot gaps nobody could observe.
    monitors: Vec<Vec<(f64, f64)>>,
}

impl ActivityLog {
    pub fn new(mut intervals: Vec<(f64, f64)>, monitors: Vec<Vec<(f64, f64)>>) -> Self {
        intervals.sort_by(|a, b| a.0.total_cmp(&b.0));
        let max_len = intervals.iter().map(|(s, e)| e - s).fold(0.0, f64::max);
        Self { intervals, max_len, monitors }
    }

    /// Activity one eNB should hear: self-reports of its one-hop APs plus frames of its
    /// one-hop eNBs.
    pub fn for_enb(enb: GlobalId, graph: &NeighborhoodGraph, sets: &[MergedSet], reports: &[MonitorReport]) -> Self {
        let hood = graph.per_enb.get(&enb).cloned().unwrap_or_default();
        let mut intervals = Vec::new();
        let mut monitors = Vec::new();
        for r in reports.iter().filter(|r| hood.aps.contains(&r.monitor_id)) {
            intervals.extend(r.activity.iter().copied());
            let mut own = r.activity.clone();
            own.sort_by(|a, b| a.0.total_cmp(&b.0));
            monitors.push(own);
        }
        for s in sets.iter().filter(|s| hood.enbs.contains(&s.global_id)) {
            intervals.extend(s.observations.iter().map(|o| (o.t_s, o.t_e)));
        }
        Self::new(intervals, monitors)
    }

    fn starting_in(&self, lo: f64, hi: f64) -> &[(f64, f64)] {
        let a = self.intervals.partition_point(|x| x.0 < lo);
        let b = self.intervals.partition_point(|x| x.0 < hi);
        &self.intervals[a..b]
    }

    /// End of the busy period that contains `[s, e)`.
    fn busy_end(&self, s: f64, e: f64) -> f64 {
        let mut end = e;
        let k = self.intervals.partition_point(|x| x.0 < s - self.max_len);
        for &(a, b) in &self.intervals[k..] {
            if a >= end {
                break;
            }
            if b > s {
                end = end.max(b);
            }
        }
        end
    }

    /// True when at some instant in `[lo, hi)` every one of at least two monitors was
    /// transmitting.
    fn all_monitors_busy(&self, lo: f64, hi: f64) -> bool {
        if self.monitors.len() < 2 {
            return false;
        }
        let mut edges: Vec<(f64, i32)> = Vec::new();
        for m in &self.monitors {
            let k = m.partition_point(|x| x.1 <= lo);
            for &(s, e) in m[k..].iter().take_while(|x| x.0 < hi) {
                edges.push((s.max(lo), 1));
                edges.push((e.min(hi), -1));
            }
        }
        edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut level = 0;
        for (_, d) in edges {
            level += d;
            if level as usize == self.monitors.len() {
                return true;
            }
        }
        false
    }
}

/// Reconstructs the backoff counter behind each frame of one eNB.
///
/// Time is measured from the end of the busy period holding the previous frame. Each
/// idle stretch that ends in an intermediate busy period contributes the whole slots
/// it could have counted down after deferring; the final stretch up to the frame
/// contributes the rest, rounded to the nearest slot.
pub fn estimate_backoff(set: &MergedSet, log: &ActivityLog, cfg: &HubConfig) -> Vec<BackoffEstimate> {
    let t_def = T_DEF_US as f64;
    let t_slot = T_SLOT_US as f64;
    let obs = &set.observations;
    let mut out = Vec::with_capacity(obs.len());
    for (i, o) in obs.iter().enumerate() {
        let params = PriorityClassParams::downlink(o.class, cfg.long_mcop);
        let q = params.cw(o.retx_round);
        let p = params.p as f64;
        let mut est = BackoffEstimate {
            t_s: o.t_s,
            b_hat: 0,
            raw: f64::NAN,
            q,
            class: o.class,
            retx_round: o.retx_round,
            intermediates: 0,
            excluded: Some(ExclusionReason::NoPredecessor),
        };
        if i == 0 {
            out.push(est);
            continue;
        }
        let prev = &obs[i - 1];
        let busy_end = log.busy_end(prev.t_s, prev.t_e);
        let mut cursor = busy_end;
        let mut slots = 0.0;
        let mut union: Option<(f64, f64)> = None;
        let close = |u: (f64, f64), cursor: &mut f64, slots: &mut f64, count: &mut usize| {
            let idle = u.0 - *cursor;
            let counted = ((idle - t_def) / t_slot + 1e-6).floor() - p;
            *slots += counted.max(0.0);
            *cursor = u.1;
            *count += 1;
        };
        for &(s, e) in log.starting_in(busy_end, o.t_s) {
            union = match union {
                Some((us, ue)) if s < ue => Some((us, ue.max(e))),
                Some(u) => {
                    close(u, &mut cursor, &mut slots, &mut est.intermediates);
                    Some((s, e))
                }
                None => Some((s, e)),
            };
        }
        if let Some(u) = union {
            close(u, &mut cursor, &mut slots, &mut est.intermediates);
        }
        let raw = slots + (o.t_s - cursor - t_def) / t_slot - p;
        est.raw = raw;
        est.b_hat = if raw > -0.5 { raw.round().max(0.0) as i64 } else { raw.round() as i64 };
        est.excluded = if log.all_monitors_busy(prev.t_s, o.t_s) {
            Some(ExclusionReason::Unobserved)
        } else if raw <= -0.5 && !cfg.keep_negative {
            Some(ExclusionReason::Negative)
        } else if est.b_hat > q as i64 - 1 {
            Some(ExclusionReason::Unsaturated)
        } else {
            None
        };
        out.push(est);
    }
    out
}

/// Probability masses on integer backoff values, sorted by value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackoffDistribution {
    pub support: Vec<i64>,
    pub mass: Vec<f64>,
}

impl BackoffDistribution {
    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(w: BTreeMap<i64, f64>) -> Result<Self> {
        let total: f64 = w.values().sum();
        if w.is_empty() || !(total > 0.0) {
            return Err(HubError::InsufficientData);
        }
        let (support, mass) = w.into_iter().map(|(k, v)| (k, v / total)).unzip();
        Ok(Self { support, mass })
    }

    pub fn mass_at(&self, x: i64) -> f64 {
        self.support.binary_search(&x).map(|k| self.mass[k]).unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// Two-column `value\tmass` listing.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("value\tmass\n");
        for (x, m) in self.support.iter().zip(&self.mass) {
            let _ = writeln!(out, "{x}\t{m}");
        }
        out
    }
}

/// Appearance frequency of each estimated backoff among usable estimates.
pub fn empirical_distribution(estimates: &[BackoffEstimate]) -> Result<BackoffDistribution> {
    let mut w = BTreeMap::new();
    for e in estimates.iter().filter(|e| e.usable()) {
        *w.entry(e.b_hat).or_insert(0.0) += 1.0;
    }
    BackoffDistribution::from_weights(w)
}

/// Mixture of uniform draws over the contention windows the eNB should have used.
pub fn expected_distribution(estimates: &[BackoffEstimate]) -> Result<BackoffDistribution> {
    let mut windows: BTreeMap<u32, f64> = BTreeMap::new();
    for e in estimates.iter().filter(|e| e.usable()) {
        *windows.entry(e.q).or_insert(0.0) += 1.0;
    }
    let n: f64 = windows.values().sum();
    let mut w = BTreeMap::new();
    for (&k, &count) in &windows {
        for x in 0..k as i64 {
            *w.entry(x).or_insert(0.0) += count / n / k as f64;
        }
    }
    BackoffDistribution::from_weights(w)
}

/// Jensen–Shannon divergence with base-2 logs, in `[0, 1]`.
pub fn js_divergence(m: &BackoffDistribution, w: &BackoffDistribution) -> f64 {
    let support: BTreeSet<i64> = m.support.iter().chain(&w.support).copied().collect();
    let kl_half = |p: f64, c: f64| if p > 0.0 { p * (p / c).log2() } else { 0.0 };
    let mut d = 0.0;
    for x in support {
        let (a, b) = (m.mass_at(x), w.mass_at(x));
        let c = 0.5 * (a + b);
        d += 0.5 * kl_half(a, c) + 0.5 * kl_half(b, c);
    }
    d.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorVerdict {
    pub enb_id: GlobalId,
    pub divergence: f64,
    pub delta: f64,
    pub misbehaving: bool,
    pub n_observations: usize,
}

pub fn render_verdict(
    enb_id: GlobalId,
    m: &BackoffDistribution,
    w: &BackoffDistribution,
    delta: f64,
    n: usize,
    min_obs: usize,
) -> Result<DetectorVerdict> {
    if n < min_obs {
        return Err(HubError::BelowMinimum { needed: min_obs, have: n });
    }
    let d = js_divergence(m, w);
    Ok(DetectorVerdict { enb_id, divergence: d, delta, misbehaving: d > delta, n_observations: n })
}

/// Everything the hub worked out about one eNB.
#[derive(Debug, Clone, PartialEq)]
pub struct EnbEvaluation {
    pub global_id: GlobalId,
    pub members: Vec<(NodeId, LocalId)>,
    pub neighborhood: Neighborhood,
    pub estimates: Vec<BackoffEstimate>,
    /// Usable estimates that went into M and W.
    pub n_used: usize,
    pub m: Option<BackoffDistribution>,
    pub w: Option<BackoffDistribution>,
    pub divergence: Option<f64>,
    pub verdict: Option<DetectorVerdict>,
}

fn evaluate_one(set: &MergedSet, graph: &NeighborhoodGraph, sets: &[MergedSet], reports: &[MonitorReport], cfg: &HubConfig) -> EnbEvaluation {
    let log = ActivityLog::for_enb(set.global_id, graph, sets, reports);
    let estimates = estimate_backoff(set, &log, cfg);
    let cap = cfg.max_obs.unwrap_or(usize::MAX);
    let used: Vec<BackoffEstimate> = estimates.iter().filter(|e| e.usable()).take(cap).cloned().collect();
    let m = empirical_distribution(&used).ok();
    let w = expected_distribution(&used).ok();
    let divergence = m.as_ref().zip(w.as_ref()).map(|(m, w)| js_divergence(m, w));
    let verdict = m
        .as_ref()
        .zip(w.as_ref())
        .and_then(|(m, w)| render_verdict(set.global_id, m, w, cfg.delta, used.len(), cfg.min_obs).ok());
    EnbEvaluation {
        global_id: set.global_id,
        members: set.members.clone(),
        neighborhood: graph.per_enb.get(&set.global_id).cloned().unwrap_or_default(),
        n_used: used.len(),
        estimates,
        m,
        w,
        divergence,
        verdict,
    }
}

/// Full hub pipeline over a batch of monitor reports; eNBs are evaluated in parallel.
pub fn evaluate(reports: &[MonitorReport], cfg: &HubConfig) -> Result<Vec<EnbEvaluation>> {
    cfg.validate()?;
    let sets = match_ids(reports, cfg.epsilon_us, cfg.match_fraction)?;
    let graph = infer_enb_neighborhood(&sets, cfg);
    Ok(sets.par_iter().map(|s| evaluate_one(s, &graph, &sets, reports, cfg)).collect())
}

pub const VERDICT_COLUMNS: [&str; 5] = ["enb_id", "n", "d_js", "delta", "verdict"];

/// One line per eNB; eNBs without enough data are listed as `insufficient`.
pub fn verdicts_to_tsv(evals: &[EnbEvaluation], delta: f64) -> String {
    let mut out = VERDICT_COLUMNS.join("\t");
    out.push('\n');
    for e in evals {
        let (d, label) = match (&e.verdict, e.divergence) {
            (Some(v), _) => (format!("{}", v.divergence), if v.misbehaving { "misbehaving" } else { "compliant" }),
            (None, Some(d)) => (format!("{d}"), "insufficient"),
            (None, None) => ("nan".to_string(), "insufficient"),
        };
        let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", e.global_id, e.n_used, d, delta, label);
    }
    out
}
