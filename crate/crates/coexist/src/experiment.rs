//! Scenario files, parameter sweeps and the simulate → monitor → evaluate harness.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::hub::{self, HubConfig};
use crate::mac::{
    self, EventTrace, MisbehaviorPolicy, NodeConfig, NodeId, NodeKind, PriorityClass, PriorityClassParams,
    StopCondition, TrafficModel,
};
use crate::monitor::{self, ErrorInjection, MonitorConfig, MonitorReport};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error("no runs in the {0} set")]
    EmptyRunSet(&'static str),
    #[error("run sets use different observation counts ({0:?} vs {1:?})")]
    MixedJ(Option<usize>, Option<usize>),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error(transparent)]
    Sim(#[from] mac::SimError),
    #[error(transparent)]
    Monitor(#[from] monitor::MonitorError),
    #[error(transparent)]
    Hub(#[from] hub::HubError),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Placement {
    /// Every node of the group at one spot.
    Point { at: [f64; 2] },
    /// `start`, `start + step`, ...
    Line { start: [f64; 2], step: [f64; 2] },
    /// Independently uniform in the rectangle, redrawn per seed.
    Uniform { min: [f64; 2], max: [f64; 2] },
}

impl Default for Placement {
    fn default() -> Self {
        Placement::Point { at: [0.0, 0.0] }
    }
}

fn one() -> usize {
    1
}
fn class3() -> u8 {
    3
}
fn nominal_cca() -> f64 {
    mac::CCA_DBM
}
fn saturated() -> TrafficModel {
    TrafficModel::Saturated
}
fn compliant() -> MisbehaviorPolicy {
    MisbehaviorPolicy::Compliant
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeGroup {
    pub kind: NodeKind,
    #[serde(default = "one")]
    pub count: usize,
    /// Priority class 1–4.
    #[serde(default = "class3")]
    pub class: u8,
    /// Defaults to 23 dBm for eNBs and 20 dBm for APs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tx_power_dbm: Option<f64>,
    #[serde(default = "nominal_cca")]
    pub cca_threshold_dbm: f64,
    #[serde(default)]
    pub placement: Placement,
    #[serde(default = "saturated")]
    pub traffic: TrafficModel,
    #[serde(default = "compliant")]
    pub policy: MisbehaviorPolicy,
    /// Defaults to the class T_MCOP.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_us: Option<u64>,
    #[serde(default)]
    pub long_mcop: bool,
}

/// Monitor knobs that make sense in a scenario file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonitorSettings {
    pub z: usize,
    pub noise_dbm: f64,
    pub errors: ErrorInjection,
}

impl Default for MonitorSettings {
    fn default() -> Self {
        let d = MonitorConfig::default();
        Self { z: d.z, noise_dbm: d.noise_dbm, errors: d.errors }
    }
}

fn default_seed() -> u64 {
    1
}
fn default_events() -> usize {
    100_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_events")]
    pub n_events: usize,
    #[serde(rename = "group")]
    pub groups: Vec<NodeGroup>,
    #[serde(default)]
    pub monitor: MonitorSettings,
    #[serde(default)]
    pub hub: HubConfig,
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(ExperimentError::Invalid(format!("scenario {:?} has no node groups", self.name)));
        }
        if self.n_events == 0 {
            return Err(ExperimentError::Invalid("n_events must be at least 1".into()));
        }
        for (k, g) in self.groups.iter().enumerate() {
            if PriorityClass::from_index(g.class).is_none() {
                return Err(ExperimentError::Invalid(format!("group {k}: class must be 1–4")));
            }
            if let Placement::Uniform { min, max } = g.placement {
                if min[0] > max[0] || min[1] > max[1] {
                    return Err(ExperimentError::Invalid(format!("group {k}: empty placement area")));
                }
            }
        }
        self.hub.validate()?;
        Ok(())
    }

    /// Node list for one run. Ids are 1, 2, ... in group order; uniform placements
    /// depend on `seed`.
    pub fn build_nodes(&self, seed: u64) -> Result<Vec<NodeConfig>> {
        let mut nodes = Vec::new();
        for (k, g) in self.groups.iter().enumerate() {
            let class = PriorityClass::from_index(g.class)
                .ok_or_else(|| ExperimentError::Invalid(format!("group {k}: class must be 1–4")))?;
            let params = PriorityClassParams::downlink(class, g.long_mcop);
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, k as u64));
            for i in 0..g.count {
                let position = match g.placement {
                    Placement::Point { at } => at,
                    Placement::Line { start, step } => [start[0] + step[0] * i as f64, start[1] + step[1] * i as f64],
                    Placement::Uniform { min, max } => [
                        if max[0] > min[0] { rng.random_range(min[0]..max[0]) } else { min[0] },
                        if max[1] > min[1] { rng.random_range(min[1]..max[1]) } else { min[1] },
                    ],
                };
                nodes.push(NodeConfig {
                    node_id: nodes.len() as NodeId + 1,
                    kind: g.kind,
                    position,
                    tx_power_dbm: g.tx_power_dbm.unwrap_or(match g.kind {
                        NodeKind::Enb => 23.0,
                        NodeKind::Ap => 20.0,
                    }),
                    cca_threshold_dbm: g.cca_threshold_dbm,
                    class: params,
                    traffic: g.traffic,
                    policy: g.policy,
                    frame_us: g.frame_us.unwrap_or(params.t_mcop_us),
                });
            }
        }
        mac::validate_nodes(&nodes)?;
        Ok(nodes)
    }

    fn target_group(&self) -> Option<usize> {
        self.groups.iter().position(|g| g.kind == NodeKind::Enb)
    }

    fn wifi_group(&self) -> Option<usize> {
        self.groups.iter().position(|g| g.kind == NodeKind::Ap)
    }

    pub fn monitor_config(&self) -> MonitorConfig {
        let enb_power = self
            .groups
            .iter()
            .find(|g| g.kind == NodeKind::Enb)
            .and_then(|g| g.tx_power_dbm)
            .unwrap_or(23.0);
        MonitorConfig {
            z: self.monitor.z,
            noise_dbm: self.monitor.noise_dbm,
            errors: self.monitor.errors,
            enb_power_dbm: enb_power,
            ..MonitorConfig::default()
        }
    }
}

/// A sweep value: numeric for most parameters, a label for `misbehavior`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Num(f64),
    Text(String),
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Num(v) => write!(f, "{v}"),
            ParamValue::Text(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub param: String,
    pub values: Vec<ParamValue>,
}

/// Parameters an axis may vary.
pub const SWEEP_PARAMS: [&str; 12] = [
    "q_m_ratio",
    "alpha",
    "misbehavior",
    "cca_dbm",
    "defer_p",
    "lambda",
    "wifi_lambda",
    "n_wifi",
    "enb_class",
    "wifi_class",
    "j",
    "events",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Seeds {
    List(Vec<u64>),
    Range { start: u64, count: u64 },
}

impl Seeds {
    pub fn to_vec(&self) -> Vec<u64> {
        match self {
            Seeds::List(v) => v.clone(),
            Seeds::Range { start, count } => (*start..start + count).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// The target eNB's policy replaced by the compliant one.
    Compliant,
    /// The scenario as written (after sweep parameters).
    Misbehaving,
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::Compliant => "compliant",
            Arm::Misbehaving => "misbehaving",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Output {
    AttemptRate,
    Saturation,
    Ignored,
    Verdicts,
    Roc,
    Distributions,
}

fn default_arms() -> Vec<Arm> {
    vec![Arm::Misbehaving]
}
fn default_outputs() -> Vec<Output> {
    vec![Output::AttemptRate, Output::Saturation]
}
fn default_grid() -> Vec<f64> {
    (0..=100).map(|k| k as f64 * 0.002).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub seeds: Seeds,
    /// Observations per verdict; overrides the scenario hub setting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub j: Option<usize>,
    /// Stop each run once the target eNB has sent this many frames.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_frames: Option<usize>,
    #[serde(default = "default_outputs")]
    pub outputs: Vec<Output>,
    #[serde(default = "default_arms")]
    pub arms: Vec<Arm>,
    #[serde(default = "default_grid")]
    pub delta_grid: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Axis>,
    /// Second axis, one curve per value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub series: Option<Axis>,
    pub scenario: Scenario,
}

fn check_value(param: &str, v: &ParamValue) -> std::result::Result<(), String> {
    let num = match v {
        ParamValue::Num(x) => Some(*x),
        ParamValue::Text(_) => None,
    };
    let ok = match (param, num) {
        ("misbehavior", None) => {
            let ParamValue::Text(s) = v else { unreachable!() };
            MISBEHAVIORS.contains(&s.as_str())
        }
        ("q_m_ratio", Some(x)) => x > 0.0 && x <= 1.0,
        ("alpha", Some(x)) => (0.0..=1.0).contains(&x),
        ("cca_dbm", Some(x)) => x.is_finite(),
        ("defer_p", Some(x)) => x >= 0.0 && x.fract() == 0.0,
        ("lambda" | "wifi_lambda", Some(x)) => x > 0.0 && x.is_finite(),
        ("n_wifi" | "j" | "events", Some(x)) => x >= 1.0 && x.fract() == 0.0,
        ("enb_class" | "wifi_class", Some(x)) => (1.0..=4.0).contains(&x) && x.fract() == 0.0,
        _ => false,
    };
    if ok {
        Ok(())
    } else if SWEEP_PARAMS.contains(&param) {
        Err(format!("value {v} outside the domain of {param}"))
    } else {
        Err(format!("unknown sweep parameter {param:?}"))
    }
}

/// Labels accepted by the `misbehavior` axis.
pub const MISBEHAVIORS: [&str; 5] = ["compliant", "type1", "type2", "defer", "cca"];

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: ExperimentSpec = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        if self.seeds.to_vec().is_empty() {
            return Err(ExperimentError::Invalid("need at least one seed".into()));
        }
        if self.arms.is_empty() {
            return Err(ExperimentError::Invalid("need at least one arm".into()));
        }
        if self.j == Some(0) || self.target_frames == Some(0) {
            return Err(ExperimentError::Invalid("j and target_frames must be positive".into()));
        }
        if self.delta_grid.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return Err(ExperimentError::Invalid("delta grid must lie in [0, 1]".into()));
        }
        for axis in self.sweep.iter().chain(&self.series) {
            if axis.values.is_empty() {
                return Err(ExperimentError::Invalid(format!("sweep over {} has no values", axis.param)));
            }
            for v in &axis.values {
                check_value(&axis.param, v).map_err(ExperimentError::Invalid)?;
            }
        }
        if self.scenario.target_group().is_none() {
            return Err(ExperimentError::Invalid("scenario has no eNB".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical TOML form; stamped on every output table.
    pub fn hash(&self) -> String {
        let canon = toml::to_string(self).expect("spec serializes");
        Sha256::digest(canon.as_bytes()).iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

/// Per-run settings after applying sweep values.
#[derive(Debug, Clone)]
struct RunSetup {
    scenario: Scenario,
    hub: HubConfig,
    n_events: usize,
}

fn apply(setup: &mut RunSetup, param: &str, v: &ParamValue) {
    let t = setup.scenario.target_group().expect("validated");
    let num = match v {
        ParamValue::Num(x) => *x,
        ParamValue::Text(_) => f64::NAN,
    };
    let groups = &mut setup.scenario.groups;
    let q_min = PriorityClassParams::downlink(PriorityClass::from_index(groups[t].class).unwrap(), false).q_min;
    match param {
        "q_m_ratio" => {
            let alpha = match groups[t].policy {
                MisbehaviorPolicy::CwReduction { alpha, .. } => alpha,
                _ => 0.5,
            };
            let q_m = ((num * q_min as f64).round() as u32).max(1);
            groups[t].policy = MisbehaviorPolicy::CwReduction { q_m, alpha };
        }
        "alpha" => {
            let q_m = match groups[t].policy {
                MisbehaviorPolicy::CwReduction { q_m, .. } => q_m,
                _ => (q_min / 2).max(1),
            };
            groups[t].policy = MisbehaviorPolicy::CwReduction { q_m, alpha: num };
        }
        "misbehavior" => {
            let ParamValue::Text(s) = v else { return };
            groups[t].policy = match s.as_str() {
                "type1" => MisbehaviorPolicy::CwReduction { q_m: (q_min / 2).max(1), alpha: 0.5 },
                "type2" => MisbehaviorPolicy::NoCwGrowth,
                "defer" => MisbehaviorPolicy::DeferReduction { p: 1 },
                "cca" => MisbehaviorPolicy::CcaInflation { threshold_dbm: -68.0 },
                _ => MisbehaviorPolicy::Compliant,
            };
        }
        "cca_dbm" => groups[t].policy = MisbehaviorPolicy::CcaInflation { threshold_dbm: num },
        "defer_p" => groups[t].policy = MisbehaviorPolicy::DeferReduction { p: num as u32 },
        "lambda" | "wifi_lambda" => {
            for g in groups.iter_mut() {
                let hit = if param == "lambda" { g.kind == NodeKind::Enb } else { g.kind == NodeKind::Ap };
                if hit {
                    let class = PriorityClass::from_index(g.class).unwrap();
                    let mcop_s = PriorityClassParams::downlink(class, g.long_mcop).t_mcop_us as f64 * 1e-6;
                    g.traffic = TrafficModel::Poisson { lambda: num / mcop_s };
                }
            }
        }
        "n_wifi" => {
            if let Some(w) = setup.scenario.wifi_group() {
                setup.scenario.groups[w].count = num as usize;
            }
        }
        "enb_class" | "wifi_class" => {
            let kind = if param == "enb_class" { NodeKind::Enb } else { NodeKind::Ap };
            for g in groups.iter_mut().filter(|g| g.kind == kind) {
                g.class = num as u8;
                g.frame_us = None;
            }
        }
        "j" => {
            setup.hub.min_obs = num as usize;
            setup.hub.max_obs = Some(num as usize);
        }
        "events" => setup.n_events = num as usize,
        _ => {}
    }
}

/// Metrics of one simulate → monitor → evaluate run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub series: String,
    pub sweep: String,
    pub arm: Arm,
    pub seed: u64,
    pub j: Option<usize>,
    pub n_events: usize,
    /// Mean attempt rate over eNBs / per AP.
    pub enb_rate: f64,
    pub ap_rate: f64,
    pub enb_eta: f64,
    pub ap_eta: f64,
    /// Transmissions the target eNB should have deferred to but did not, per attempt.
    pub ignored_per_attempt: f64,
    pub n_used: usize,
    pub d_js: Option<f64>,
    pub misbehaving: Option<bool>,
}

/// Node whose frames best explain a merged set, by start-time agreement.
fn node_of_set(trace: &EventTrace, set: &hub::EnbEvaluation) -> Option<NodeId> {
    let mut by_start: BTreeMap<u64, Vec<NodeId>> = BTreeMap::new();
    for e in &trace.events {
        if trace.topology.node(e.node_id).map(|n| n.kind) == Some(NodeKind::Enb) {
            by_start.entry(e.t_s).or_default().push(e.node_id);
        }
    }
    let mut votes: BTreeMap<NodeId, usize> = BTreeMap::new();
    for est in &set.estimates {
        let key = est.t_s.round() as u64;
        if let Some(nodes) = by_start.get(&key) {
            if nodes.len() == 1 {
                *votes.entry(nodes[0]).or_default() += 1;
            }
        }
    }
    votes.into_iter().max_by_key(|&(n, c)| (c, std::cmp::Reverse(n))).map(|(n, _)| n)
}

/// Frames the target started after a transmission it would have deferred to at the
/// nominal threshold was already on air.
pub fn ignored_transmissions(trace: &EventTrace, target: NodeId) -> f64 {
    let Some(t) = trace.topology.node(target) else { return 0.0 };
    let nominal = t.cca_threshold_dbm;
    let loud: Vec<bool> = trace
        .topology
        .nodes
        .iter()
        .map(|n| n.node_id != target && mac::rx_power_dbm(n, t) >= nominal)
        .collect();
    let mut ignored = 0usize;
    let mut attempts = 0usize;
    let mut active: Vec<&mac::TxEvent> = Vec::new();
    for e in &trace.events {
        active.retain(|a| a.t_e > e.t_s);
        if e.node_id == target {
            attempts += 1;
            ignored += active
                .iter()
                .filter(|a| a.t_s < e.t_s && trace.topology.index_of(a.node_id).is_some_and(|k| loud[k]))
                .count();
        }
        active.push(e);
    }
    if attempts == 0 {
        0.0
    } else {
        ignored as f64 / attempts as f64
    }
}

/// Reports of every AP, via the trace path.
pub fn observe_all(trace: &EventTrace, cfg: &MonitorConfig, seed: u64) -> Result<Vec<MonitorReport>> {
    trace
        .topology
        .nodes
        .iter()
        .filter(|n| n.kind == NodeKind::Ap)
        .map(|n| Ok(monitor::observe_trace(trace, n.node_id, cfg, seed)?))
        .collect()
}

/// Reports of the APs that sense `enb`.
pub fn observe_neighbors(trace: &EventTrace, enb: NodeId, cfg: &MonitorConfig, seed: u64) -> Result<Vec<MonitorReport>> {
    trace
        .topology
        .nodes
        .iter()
        .filter(|n| n.kind == NodeKind::Ap && trace.topology.senses(n.node_id, enb))
        .map(|n| Ok(monitor::observe_trace(trace, n.node_id, cfg, seed)?))
        .collect()
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub record: RunRecord,
    pub target_eval: Option<hub::EnbEvaluation>,
}

struct RunKey<'a> {
    series: (&'a str, Option<&'a ParamValue>),
    sweep: (&'a str, Option<&'a ParamValue>),
    arm: Arm,
    seed: u64,
}

fn run_one(spec: &ExperimentSpec, key: &RunKey) -> Result<RunOutcome> {
    let mut setup = RunSetup {
        scenario: spec.scenario.clone(),
        hub: spec.scenario.hub,
        n_events: spec.scenario.n_events,
    };
    if let Some(j) = spec.j {
        setup.hub.min_obs = j;
        setup.hub.max_obs = Some(j);
    }
    for (param, v) in [key.series, key.sweep] {
        if let Some(v) = v {
            apply(&mut setup, param, v);
        }
    }
    let t = setup.scenario.target_group().expect("validated");
    if key.arm == Arm::Compliant {
        setup.scenario.groups[t].policy = MisbehaviorPolicy::Compliant;
    }
    let nodes = setup.scenario.build_nodes(key.seed)?;
    let target = nodes.iter().find(|n| n.kind == NodeKind::Enb).expect("validated").node_id;
    let stop = match spec.target_frames {
        Some(count) => StopCondition::NodeEvents { node: target, count },
        None => StopCondition::TotalEvents(setup.n_events),
    };
    let trace = mac::run_sim_until(&nodes, key.seed, stop)?;
    let mean = |kind: NodeKind, f: &dyn Fn(NodeId) -> f64| {
        let ids: Vec<NodeId> = nodes.iter().filter(|n| n.kind == kind).map(|n| n.node_id).collect();
        if ids.is_empty() {
            0.0
        } else {
            ids.iter().map(|&i| f(i)).sum::<f64>() / ids.len() as f64
        }
    };
    let rate = |i| mac::attempt_rate(&trace, i).unwrap_or(0.0);
    let eta = |i| mac::saturation_level(&trace, i).unwrap_or(0.0);

    // APs that cannot hear the target contribute nothing to its evaluation.
    let reports = observe_neighbors(&trace, target, &setup.scenario.monitor_config(), key.seed)?;
    let evals = hub::evaluate(&reports, &setup.hub)?;
    let target_eval = evals.into_iter().find(|e| node_of_set(&trace, e) == Some(target));
    let record = RunRecord {
        series: key.series.1.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
        sweep: key.sweep.1.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
        arm: key.arm,
        seed: key.seed,
        j: setup.hub.max_obs,
        n_events: trace.events.len(),
        enb_rate: mean(NodeKind::Enb, &rate),
        ap_rate: mean(NodeKind::Ap, &rate),
        enb_eta: mean(NodeKind::Enb, &eta),
        ap_eta: mean(NodeKind::Ap, &eta),
        ignored_per_attempt: ignored_transmissions(&trace, target),
        n_used: target_eval.as_ref().map_or(0, |e| e.n_used),
        d_js: target_eval.as_ref().and_then(|e| e.verdict.as_ref()).map(|v| v.divergence),
        misbehaving: target_eval.as_ref().and_then(|e| e.verdict.as_ref()).map(|v| v.misbehaving),
    };
    Ok(RunOutcome { record, target_eval })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub delta: f64,
    pub p_d: f64,
    pub p_fa: f64,
    pub n_trials: usize,
}

/// Detection and false-alarm rates over a threshold grid. Runs without a verdict
/// never raise an alarm.
pub fn roc_sweep(compliant: &[RunRecord], misbehaving: &[RunRecord], delta_grid: &[f64]) -> Result<Vec<RocPoint>> {
    if compliant.is_empty() {
        return Err(ExperimentError::EmptyRunSet("compliant"));
    }
    if misbehaving.is_empty() {
        return Err(ExperimentError::EmptyRunSet("misbehaving"));
    }
    if compliant[0].j != misbehaving[0].j {
        return Err(ExperimentError::MixedJ(compliant[0].j, misbehaving[0].j));
    }
    let mut grid = delta_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    Ok(grid
        .into_iter()
        .map(|delta| RocPoint {
            delta,
            p_d: alarm_rate(misbehaving, delta),
            p_fa: alarm_rate(compliant, delta),
            n_trials: compliant.len().min(misbehaving.len()),
        })
        .collect())
}

pub fn alarm_rate(runs: &[RunRecord], delta: f64) -> f64 {
    if runs.is_empty() {
        return f64::NAN;
    }
    runs.iter().filter(|r| r.d_js.is_some_and(|d| d > delta)).count() as f64 / runs.len() as f64
}

/// Best Youden index `max(P_d − P_fa)` over a ROC curve.
pub fn youden(points: &[RocPoint]) -> f64 {
    points.iter().map(|p| p.p_d - p.p_fa).fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub spec_hash: String,
    pub runs: Vec<RunRecord>,
    /// M and W of the first seed per (series, sweep, arm), when requested.
    pub distributions: Vec<(String, hub::BackoffDistribution, hub::BackoffDistribution)>,
}

impl ExperimentResult {
    /// Runs grouped by `(series, sweep)` then arm, in spec order.
    pub fn cells(&self) -> Vec<((String, String), BTreeMap<Arm, Vec<RunRecord>>)> {
        let mut out: Vec<((String, String), BTreeMap<Arm, Vec<RunRecord>>)> = Vec::new();
        for r in &self.runs {
            let key = (r.series.clone(), r.sweep.clone());
            let pos = match out.iter().position(|(k, _)| *k == key) {
                Some(p) => p,
                None => {
                    out.push((key, BTreeMap::new()));
                    out.len() - 1
                }
            };
            out[pos].1.entry(r.arm).or_default().push(r.clone());
        }
        out
    }
}

/// Runs every (series, sweep, arm, seed) combination on the rayon pool.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    spec.validate()?;
    let axis_points = |a: &Option<Axis>| -> Vec<(String, Option<ParamValue>)> {
        match a {
            Some(a) => a.values.iter().map(|v| (a.param.clone(), Some(v.clone()))).collect(),
            None => vec![(String::new(), None)],
        }
    };
    let series = axis_points(&spec.series);
    let sweep = axis_points(&spec.sweep);
    let seeds = spec.seeds.to_vec();
    let mut jobs = Vec::new();
    for s in &series {
        for w in &sweep {
            for &arm in &spec.arms {
                for &seed in &seeds {
                    jobs.push((s, w, arm, seed));
                }
            }
        }
    }
    let outcomes: Vec<RunOutcome> = jobs
        .par_iter()
        .map(|(s, w, arm, seed)| {
            run_one(
                spec,
                &RunKey { series: (&s.0, s.1.as_ref()), sweep: (&w.0, w.1.as_ref()), arm: *arm, seed: *seed },
            )
        })
        .collect::<Result<_>>()?;
    let mut distributions = Vec::new();
    if spec.outputs.contains(&Output::Distributions) {
        let mut seen = std::collections::BTreeSet::new();
        for o in &outcomes {
            let r = &o.record;
            let label = format!("{}_{}_{}", r.series, r.sweep, r.arm);
            if let Some(ev) = &o.target_eval {
                if let (Some(m), Some(w)) = (&ev.m, &ev.w) {
                    if seen.insert(label.clone()) {
                        distributions.push((label, m.clone(), w.clone()));
                    }
                }
            }
        }
    }
    Ok(ExperimentResult {
        spec_hash: spec.hash(),
        runs: outcomes.into_iter().map(|o| o.record).collect(),
        distributions,
    })
}

fn fmt_opt<T: fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| x.to_string())
}

pub const RUN_COLUMNS: [&str; 14] = [
    "series", "sweep", "arm", "seed", "j", "n_events", "enb_rate", "ap_rate", "enb_eta", "ap_eta", "ignored",
    "n_used", "d_js", "verdict",
];

pub fn runs_to_tsv(runs: &[RunRecord], spec_hash: &str) -> String {
    let mut out = format!("# spec_hash={spec_hash}\n{}\n", RUN_COLUMNS.join("\t"));
    for r in runs {
        let verdict = match r.misbehaving {
            Some(true) => "misbehaving",
            Some(false) => "compliant",
            None => "insufficient",
        };
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{}",
            r.series,
            r.sweep,
            r.arm,
            r.seed,
            fmt_opt(r.j),
            r.n_events,
            r.enb_rate,
            r.ap_rate,
            r.enb_eta,
            r.ap_eta,
            r.ignored_per_attempt,
            r.n_used,
            fmt_opt(r.d_js),
            verdict
        );
    }
    out
}

/// Reads a `runs.tsv` back. Comment lines are skipped.
pub fn runs_from_tsv(text: &str) -> Result<Vec<RunRecord>> {
    let bad = |line: usize, what: &str| ExperimentError::Invalid(format!("runs table line {line}: bad {what}"));
    let mut out = Vec::new();
    let mut header_seen = false;
    for (n, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !header_seen {
            header_seen = true;
            continue;
        }
        let c: Vec<&str> = line.split('\t').collect();
        if c.len() != RUN_COLUMNS.len() {
            return Err(bad(n + 1, "column count"));
        }
        let num = |k: usize| c[k].parse::<f64>().map_err(|_| bad(n + 1, RUN_COLUMNS[k]));
        let opt = |k: usize| -> Result<Option<f64>> {
            if c[k] == "nan" {
                Ok(None)
            } else {
                num(k).map(Some)
            }
        };
        out.push(RunRecord {
            series: c[0].to_string(),
            sweep: c[1].to_string(),
            arm: match c[2] {
                "compliant" => Arm::Compliant,
                "misbehaving" => Arm::Misbehaving,
                _ => return Err(bad(n + 1, "arm")),
            },
            seed: c[3].parse().map_err(|_| bad(n + 1, "seed"))?,
            j: opt(4)?.map(|x| x as usize),
            n_events: num(5)? as usize,
            enb_rate: num(6)?,
            ap_rate: num(7)?,
            enb_eta: num(8)?,
            ap_eta: num(9)?,
            ignored_per_attempt: num(10)?,
            n_used: num(11)? as usize,
            d_js: opt(12)?,
            misbehaving: match c[13] {
                "misbehaving" => Some(true),
                "compliant" => Some(false),
                _ => None,
            },
        });
    }
    Ok(out)
}

pub fn roc_to_tsv(rows: &[(String, String, RocPoint)], spec_hash: &str) -> String {
    let mut out = format!("# spec_hash={spec_hash}\nseries\tsweep\tdelta\tp_d\tp_fa\tp_md\tn_trials\n");
    for (s, w, p) in rows {
        let _ = writeln!(
            out,
            "{s}\t{w}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}",
            p.delta,
            p.p_d,
            p.p_fa,
            1.0 - p.p_d,
            p.n_trials
        );
    }
    out
}

fn mean_of(runs: &[RunRecord], f: impl Fn(&RunRecord) -> f64) -> f64 {
    runs.iter().map(f).sum::<f64>() / runs.len().max(1) as f64
}

/// Writes `runs.tsv`, `summary.tsv`, and whatever else the spec asks for.
pub fn write_outputs(spec: &ExperimentSpec, result: &ExperimentResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let hash = &result.spec_hash;
    std::fs::write(dir.join("runs.tsv"), runs_to_tsv(&result.runs, hash))?;

    let mut summary = format!(
        "# spec_hash={hash}\nseries\tsweep\tarm\tn_runs\tenb_rate\tap_rate\tenb_eta\tap_eta\tignored\tmean_d_js\talarm_rate\n"
    );
    let mut roc_rows = Vec::new();
    for ((s, w), arms) in result.cells() {
        for (arm, runs) in &arms {
            let with_d: Vec<f64> = runs.iter().filter_map(|r| r.d_js).collect();
            let mean_d = if with_d.is_empty() { f64::NAN } else { with_d.iter().sum::<f64>() / with_d.len() as f64 };
            let alarms = runs.iter().filter(|r| r.misbehaving == Some(true)).count() as f64 / runs.len() as f64;
            let _ = writeln!(
                summary,
                "{s}\t{w}\t{arm}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                runs.len(),
                mean_of(runs, |r| r.enb_rate),
                mean_of(runs, |r| r.ap_rate),
                mean_of(runs, |r| r.enb_eta),
                mean_of(runs, |r| r.ap_eta),
                mean_of(runs, |r| r.ignored_per_attempt),
                mean_d,
                alarms
            );
            let leaf = dir.join("arms").join(format!("{s}_{w}")).join(arm.to_string());
            std::fs::create_dir_all(&leaf)?;
            std::fs::write(leaf.join("runs.tsv"), runs_to_tsv(runs, hash))?;
        }
        if spec.outputs.contains(&Output::Roc) {
            let none = Vec::new();
            let mis = arms.get(&Arm::Misbehaving).unwrap_or(&none);
            match arms.get(&Arm::Compliant) {
                Some(comp) => {
                    for p in roc_sweep(comp, mis, &spec.delta_grid)? {
                        roc_rows.push((s.clone(), w.clone(), p));
                    }
                }
                // Without a compliant arm only the detection side is known.
                None => {
                    for &delta in &spec.delta_grid {
                        let p = RocPoint { delta, p_d: alarm_rate(mis, delta), p_fa: f64::NAN, n_trials: mis.len() };
                        roc_rows.push((s.clone(), w.clone(), p));
                    }
                }
            }
        }
    }
    std::fs::write(dir.join("summary.tsv"), summary)?;
    if spec.outputs.contains(&Output::Roc) {
        std::fs::write(dir.join("roc.tsv"), roc_to_tsv(&roc_rows, hash))?;
    }
    if !result.distributions.is_empty() {
        let d = dir.join("distributions");
        std::fs::create_dir_all(&d)?;
        for (label, m, w) in &result.distributions {
            std::fs::write(d.join(format!("{label}_M.tsv")), m.to_tsv())?;
            std::fs::write(d.join(format!("{label}_W.tsv")), w.to_tsv())?;
        }
    }
    Ok(())
}

/// Shipped experiment presets.
pub const PRESETS: [(&str, &str); 18] = [
    ("fig8a", include_str!("../presets/fig8a.toml")),
    ("fig8b", include_str!("../presets/fig8b.toml")),
    ("fig8c", include_str!("../presets/fig8c.toml")),
    ("fig9a", include_str!("../presets/fig9a.toml")),
    ("fig9b", include_str!("../presets/fig9b.toml")),
    ("fig10a", include_str!("../presets/fig10a.toml")),
    ("fig10b", include_str!("../presets/fig10b.toml")),
    ("fig10c", include_str!("../presets/fig10c.toml")),
    ("fig11a", include_str!("../presets/fig11a.toml")),
    ("fig11b", include_str!("../presets/fig11b.toml")),
    ("fig12a", include_str!("../presets/fig12a.toml")),
    ("fig12b", include_str!("../presets/fig12b.toml")),
    ("fig12c", include_str!("../presets/fig12c.toml")),
    ("fig12d", include_str!("../presets/fig12d.toml")),
    ("fig13a", include_str!("../presets/fig13a.toml")),
    ("fig13b", include_str!("../presets/fig13b.toml")),
    ("basic", include_str!("../presets/basic.toml")),
    ("hidden_enbs", include_str!("../presets/hidden_enbs.toml")),
];

pub fn preset(name: &str) -> Result<ExperimentSpec> {
    let text = PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| ExperimentError::UnknownPreset(name.to_string()))?;
    ExperimentSpec::from_toml(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(arm: Arm, d: Option<f64>) -> RunRecord {
        RunRecord {
            series: "-".into(),
            sweep: "-".into(),
            arm,
            seed: 1,
            j: Some(100),
            n_events: 10,
            enb_rate: 0.5,
            ap_rate: 0.5,
            enb_eta: 0.0,
            ap_eta: 0.0,
            ignored_per_attempt: 0.0,
            n_used: 100,
            d_js: d,
            misbehaving: d.map(|x| x > 0.05),
        }
    }

    #[test]
    fn roc_endpoints() {
        let comp = vec![rec(Arm::Compliant, Some(0.01)), rec(Arm::Compliant, Some(0.02))];
        let mis = vec![rec(Arm::Misbehaving, Some(0.2)), rec(Arm::Misbehaving, Some(0.3))];
        let pts = roc_sweep(&comp, &mis, &[1.0, 0.0, 0.1]).unwrap();
        assert_eq!((pts[0].delta, pts[0].p_d, pts[0].p_fa), (0.0, 1.0, 1.0));
        assert_eq!((pts[1].p_d, pts[1].p_fa), (1.0, 0.0));
        assert_eq!((pts[2].p_d, pts[2].p_fa), (0.0, 0.0));
        assert!(matches!(roc_sweep(&[], &mis, &[0.0]), Err(ExperimentError::EmptyRunSet(_))));
        let mut other_j = comp.clone();
        other_j[0].j = Some(1000);
        assert!(matches!(roc_sweep(&other_j, &mis, &[0.0]), Err(ExperimentError::MixedJ(..))));
    }

    #[test]
    fn runs_table_round_trip() {
        let runs = vec![rec(Arm::Compliant, Some(0.0125)), rec(Arm::Misbehaving, None)];
        let text = runs_to_tsv(&runs, "abc");
        assert!(text.starts_with("# spec_hash=abc\n"));
        assert_eq!(runs_from_tsv(&text).unwrap(), runs);
    }

    #[test]
    fn every_preset_parses() {
        for (name, _) in PRESETS {
            let spec = preset(name).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(spec.name, name);
        }
    }

    #[test]
    fn empty_sweep_rejected() {
        let mut spec = preset("basic").unwrap();
        spec.sweep = Some(Axis { param: "alpha".into(), values: vec![] });
        assert!(matches!(spec.validate(), Err(ExperimentError::Invalid(_))));
        spec.sweep = Some(Axis { param: "alpha".into(), values: vec![ParamValue::Num(1.5)] });
        assert!(spec.validate().is_err());
        spec.sweep = Some(Axis { param: "warp".into(), values: vec![ParamValue::Num(1.0)] });
        assert!(spec.validate().is_err());
    }

    #[test]
    fn uniform_placement_follows_seed() {
        let spec = preset("fig11b").unwrap();
        let a = spec.scenario.build_nodes(1).unwrap();
        let b = spec.scenario.build_nodes(1).unwrap();
        let c = spec.scenario.build_nodes(2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[1].position, c[1].position);
        assert_eq!(a.len(), 201);
    }
}
