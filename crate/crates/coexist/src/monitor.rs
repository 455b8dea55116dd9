//! Per-AP implicit sensing: turn what an AP can hear into observation vectors.
//!
//! Two front ends share the same bookkeeping. The trace path reads the simulator's
//! ground truth (with optional error injection); the signal path synthesizes the IQ the
//! AP would receive and runs the correlation detectors on it.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mac::{self, EventTrace, NodeId, NodeKind, PriorityClass, TxEvent};
use crate::signal::{self, ChannelModel, IqBuffer, LocalId, OfdmConfig, SignalError, SignatureDb};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MonitorError {
    #[error("frame of {0} µs is longer than any channel occupancy limit")]
    Malformed(f64),
    #[error("power log is empty")]
    EmptyLog,
    #[error("node {0} is not an AP in this trace")]
    NotAnAp(NodeId),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error("report parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, MonitorError>;

/// One sensed LTE frame as reported to the hub.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationVector {
    /// Microseconds on the common clock.
    pub t_s: f64,
    pub t_e: f64,
    pub local_id: LocalId,
    pub class: PriorityClass,
    pub retx_round: u32,
    /// 1 when the eNB is believed not to sense this AP.
    pub hidden: u8,
}

impl ObservationVector {
    pub fn duration(&self) -> f64 {
        self.t_e - self.t_s
    }
}

/// What a monitoring AP uploads: its observations and its own airtime.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MonitorReport {
    pub monitor_id: NodeId,
    pub observations: Vec<ObservationVector>,
    /// Own transmissions as `(t_s, t_e)` in microseconds.
    pub activity: Vec<(f64, f64)>,
}

/// Trace-path error knobs. All default to zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ErrorInjection {
    pub miss_prob: f64,
    pub id_confusion_prob: f64,
    /// Each timestamp moves by up to ± this many microseconds.
    pub jitter_us: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonitorConfig {
    pub gamma_lte: f64,
    pub gamma_id: f64,
    pub gamma_rt: f64,
    /// Power-log depth.
    pub z: usize,
    /// This AP's transmit power.
    pub own_power_dbm: f64,
    /// Assumed eNB transmit power.
    pub enb_power_dbm: f64,
    pub noise_dbm: f64,
    /// The eNB's assumed CCA threshold.
    pub cca_threshold_dbm: f64,
    pub ofdm: OfdmConfig,
    pub errors: ErrorInjection,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            gamma_lte: signal::GAMMA_LTE,
            gamma_id: signal::GAMMA_ID,
            gamma_rt: signal::GAMMA_RT,
            z: 16,
            own_power_dbm: 20.0,
            enb_power_dbm: 23.0,
            noise_dbm: -95.0,
            cca_threshold_dbm: mac::CCA_DBM,
            ofdm: OfdmConfig::default(),
            errors: ErrorInjection::default(),
        }
    }
}

/// Nearest class by channel occupancy time. Both 8 ms and 10 ms frames map to C3.
pub fn classify_priority(duration_us: f64) -> Result<PriorityClass> {
    const LIMIT_US: f64 = 10_000.0;
    // A few µs of slack for timing jitter at the top end.
    if !(duration_us > 0.0) || duration_us > LIMIT_US + 5.0 {
        return Err(MonitorError::Malformed(duration_us));
    }
    Ok(if duration_us <= 2_500.0 {
        PriorityClass::C1
    } else if duration_us <= 5_500.0 {
        PriorityClass::C2
    } else {
        PriorityClass::C3
    })
}

fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

/// Last `z` received-power readings from one eNB, in dBm.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerLog {
    pub readings: VecDeque<f64>,
    pub z: usize,
}

impl PowerLog {
    pub fn new(z: usize) -> Self {
        Self { readings: VecDeque::with_capacity(z), z: z.max(1) }
    }

    pub fn push(&mut self, dbm: f64) {
        if self.readings.len() == self.z {
            self.readings.pop_front();
        }
        self.readings.push_back(dbm);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NeighborFlag {
    pub h: u8,
    /// Fewer than `z` readings were available.
    pub low_confidence: bool,
}

/// Projects each reading to the eNB side by reciprocity and takes a strict majority vote.
pub fn infer_neighbor_flag(log: &PowerLog, cfg: &MonitorConfig) -> Result<NeighborFlag> {
    if log.readings.is_empty() {
        return Err(MonitorError::EmptyLog);
    }
    let sigma2 = dbm_to_mw(cfg.noise_dbm);
    let ratio = dbm_to_mw(cfg.own_power_dbm) / dbm_to_mw(cfg.enb_power_dbm);
    let cca = dbm_to_mw(cfg.cca_threshold_dbm);
    let above = log
        .readings
        .iter()
        .filter(|&&r| ratio * (dbm_to_mw(r) - sigma2) + sigma2 > cca)
        .count();
    let n = log.readings.len();
    Ok(NeighborFlag { h: if 2 * above > n { 0 } else { 1 }, low_confidence: n < log.z })
}

/// Identity of a frame's payload, used to spot retransmissions.
pub trait Payload {
    fn same_payload(&self, other: &Self, gamma_rt: f64) -> bool;
}

/// Trace path: ground-truth tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PayloadTag {
    pub node: NodeId,
    pub frame_seq: u64,
}

impl Payload for PayloadTag {
    fn same_payload(&self, other: &Self, _gamma_rt: f64) -> bool {
        self == other
    }
}

impl Payload for IqBuffer {
    fn same_payload(&self, other: &Self, gamma_rt: f64) -> bool {
        self.len() == other.len() && signal::match_retransmission(self, other, gamma_rt).unwrap_or(false)
    }
}

/// A frame after detection, before retransmission tracking.
#[derive(Debug, Clone)]
pub struct FrameRecord<P> {
    pub t_s: f64,
    pub t_e: f64,
    /// `None` when the ID field could not be read.
    pub local_id: Option<LocalId>,
    pub payload: P,
    pub power_dbm: f64,
}

struct Recent<P> {
    payload: P,
    t_s: f64,
    duration: f64,
    r: u32,
}

struct Pending<P> {
    rec: FrameRecord<P>,
    age: usize,
}

/// Retransmission-round estimation with back-filling of unreadable IDs.
///
/// Frames whose ID is readable get `r = r_prev + 1` when they repeat the previous frame
/// of the same eNB and `r = 0` otherwise. Frames with unreadable IDs wait for a later
/// same-length retransmission; if one arrives they inherit its ID, otherwise they are
/// dropped after `horizon` readable frames.
pub struct RetxTracker<P> {
    cfg: MonitorConfig,
    horizon: usize,
    duration_tol_us: f64,
    last: HashMap<LocalId, Recent<P>>,
    pending: Vec<Pending<P>>,
    logs: HashMap<LocalId, PowerLog>,
    out: Vec<ObservationVector>,
    dropped: usize,
}

impl<P: Payload> RetxTracker<P> {
    pub fn new(cfg: MonitorConfig, duration_tol_us: f64) -> Self {
        Self {
            cfg,
            horizon: 64,
            duration_tol_us,
            last: HashMap::new(),
            pending: Vec::new(),
            logs: HashMap::new(),
            out: Vec::new(),
            dropped: 0,
        }
    }

    fn emit(&mut self, rec: &FrameRecord<P>, id: LocalId, r: u32) {
        let Ok(class) = classify_priority(rec.t_e - rec.t_s) else {
            self.dropped += 1;
            return;
        };
        let z = self.cfg.z;
        let log = self.logs.entry(id).or_insert_with(|| PowerLog::new(z));
        log.push(rec.power_dbm);
        let h = infer_neighbor_flag(log, &self.cfg).map(|f| f.h).unwrap_or(1);
        self.out.push(ObservationVector {
            t_s: rec.t_s,
            t_e: rec.t_e,
            local_id: id,
            class,
            retx_round: r,
            hidden: h,
        });
    }

    fn round_after(&self, id: LocalId, rec: &FrameRecord<P>) -> u32 {
        match self.last.get(&id) {
            Some(prev)
                if prev.t_s < rec.t_s
                    && (prev.duration - (rec.t_e - rec.t_s)).abs() <= self.duration_tol_us
                    && prev.payload.same_payload(&rec.payload, self.cfg.gamma_rt) =>
            {
                prev.r + 1
            }
            _ => 0,
        }
    }

    pub fn push(&mut self, rec: FrameRecord<P>) {
        let Some(id) = rec.local_id else {
            self.pending.push(Pending { rec, age: 0 });
            return;
        };
        let duration = rec.t_e - rec.t_s;
        let tol = self.duration_tol_us;
        let gamma = self.cfg.gamma_rt;
        // Every earlier unreadable copy of this payload is an earlier round of it.
        let (earlier, rest): (Vec<_>, Vec<_>) = std::mem::take(&mut self.pending).into_iter().partition(|p| {
            p.rec.t_s < rec.t_s
                && ((p.rec.t_e - p.rec.t_s) - duration).abs() <= tol
                && p.rec.payload.same_payload(&rec.payload, gamma)
        });
        self.pending = rest;
        let mut r = None;
        for p in earlier {
            let r_k = match r {
                None => self.round_after(id, &p.rec),
                Some(prev) => prev + 1,
            };
            self.emit(&p.rec, id, r_k);
            r = Some(r_k);
        }
        let r = match r {
            Some(prev) => prev + 1,
            None => self.round_after(id, &rec),
        };
        self.emit(&rec, id, r);
        let before = self.pending.len();
        for p in self.pending.iter_mut() {
            p.age += 1;
        }
        let horizon = self.horizon;
        self.pending.retain(|p| p.age < horizon);
        self.dropped += before - self.pending.len();
        self.last.insert(id, Recent { payload: rec.payload, t_s: rec.t_s, duration, r });
    }

    /// Drops whatever is still pending and returns observations ordered by start time.
    pub fn finish(mut self) -> (Vec<ObservationVector>, usize) {
        self.dropped += self.pending.len();
        self.out.sort_by(|a, b| a.t_s.total_cmp(&b.t_s));
        (self.out, self.dropped)
    }
}

fn ap_index(trace: &EventTrace, monitor: NodeId) -> Result<usize> {
    let i = trace.topology.index_of(monitor).ok_or(MonitorError::NotAnAp(monitor))?;
    if trace.topology.nodes[i].kind != NodeKind::Ap {
        return Err(MonitorError::NotAnAp(monitor));
    }
    Ok(i)
}

fn own_activity(trace: &EventTrace, monitor: NodeId) -> Vec<(f64, f64)> {
    trace.events_of(monitor).map(|e| (e.t_s as f64, e.t_e as f64)).collect()
}

fn overlaps(a: (u64, u64), b: (u64, u64)) -> bool {
    a.0 < b.1 && b.0 < a.1
}

/// Visible transmissions of other nodes, in start order.
fn visible_events<'a>(trace: &'a EventTrace, monitor: NodeId) -> Vec<&'a TxEvent> {
    trace
        .events
        .iter()
        .filter(|e| e.node_id != monitor && trace.topology.senses(monitor, e.node_id))
        .collect()
}

fn rx_reading_dbm(trace: &EventTrace, tx: NodeId, monitor: NodeId, noise_dbm: f64) -> f64 {
    let (Some(t), Some(m)) = (trace.topology.node(tx), trace.topology.node(monitor)) else {
        return noise_dbm;
    };
    let mw = dbm_to_mw(mac::rx_power_dbm(t, m)) + dbm_to_mw(noise_dbm);
    10.0 * mw.log10()
}

/// Fast path: observations straight from the ground-truth trace.
pub fn observe_trace(trace: &EventTrace, monitor: NodeId, cfg: &MonitorConfig, seed: u64) -> Result<MonitorReport> {
    ap_index(trace, monitor)?;
    let errs = cfg.errors;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (monitor as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let own: Vec<(u64, u64)> = trace.events_of(monitor).map(|e| (e.t_s, e.t_e)).collect();
    let visible = visible_events(trace, monitor);
    let sample_us = cfg.ofdm.sample_period * 1e6;
    let id_lo = (cfg.ofdm.id_field_offsets[0] as f64 * sample_us) as u64;
    let id_hi = ((cfg.ofdm.id_field_offsets[1] + cfg.ofdm.id_field_len) as f64 * sample_us).ceil() as u64;

    let mut ids: BTreeMap<NodeId, LocalId> = BTreeMap::new();
    let mut tracker = RetxTracker::<PayloadTag>::new(*cfg, 1e-6 + 2.0 * errs.jitter_us);
    let mut own_k = 0;
    for (k, e) in visible.iter().enumerate() {
        let is_enb = trace.topology.node(e.node_id).map(|n| n.kind) == Some(NodeKind::Enb);
        if !is_enb {
            continue;
        }
        while own_k < own.len() && own[own_k].1 <= e.t_s {
            own_k += 1;
        }
        if own[own_k..].iter().take_while(|o| o.0 < e.t_e).any(|&o| overlaps(o, (e.t_s, e.t_e))) {
            continue;
        }
        if errs.miss_prob > 0.0 && rng.random_bool(errs.miss_prob.min(1.0)) {
            continue;
        }
        let id_span = (e.t_s + id_lo, e.t_s + id_hi);
        let corrupted = visible[..k]
            .iter()
            .rev()
            .take_while(|o| o.t_s + 20_000 > e.t_s)
            .chain(visible[k + 1..].iter().take_while(|o| o.t_s < id_span.1))
            .any(|o| overlaps((o.t_s, o.t_e), id_span));
        let local_id = if corrupted {
            None
        } else {
            let next = ids.len() as LocalId + 1;
            let mut id = *ids.entry(e.node_id).or_insert(next);
            if errs.id_confusion_prob > 0.0 && ids.len() > 1 && rng.random_bool(errs.id_confusion_prob.min(1.0)) {
                let others: Vec<LocalId> = ids.values().copied().filter(|&v| v != id).collect();
                id = others[rng.random_range(0..others.len())];
            }
            Some(id)
        };
        let mut jitter = || {
            if errs.jitter_us > 0.0 {
                rng.random_range(-errs.jitter_us..=errs.jitter_us)
            } else {
                0.0
            }
        };
        let t_s = e.t_s as f64 + jitter();
        let t_e = e.t_e as f64 + jitter();
        tracker.push(FrameRecord {
            t_s,
            t_e,
            local_id,
            payload: PayloadTag { node: e.node_id, frame_seq: e.frame_seq },
            power_dbm: rx_reading_dbm(trace, e.node_id, monitor, cfg.noise_dbm),
        });
    }
    let (observations, _) = tracker.finish();
    Ok(MonitorReport { monitor_id: monitor, observations, activity: own_activity(trace, monitor) })
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the ID field an eNB transmits.
pub fn enb_id_seed(node: NodeId) -> u64 {
    mix(node as u64, 0x1d)
}

/// Wi-Fi symbol and CP length at the Wi-Fi sample rate.
pub const WIFI_SYMBOL: (usize, usize) = (80, 16);

/// Slow path: synthesize the IQ this AP receives and run the detectors on it.
///
/// Noise has unit power in the synthesized buffer, so every signal is scaled by its SNR
/// at the monitor. Two eNBs that start in the same slot at similar power overlay their
/// ID fields into something that matches neither signature; such frames end up under a
/// spurious local ID instead of being flagged as corrupted.
pub fn observe_signal(trace: &EventTrace, monitor: NodeId, cfg: &MonitorConfig, seed: u64) -> Result<MonitorReport> {
    ap_index(trace, monitor)?;
    let ofdm = cfg.ofdm;
    let sample_us = ofdm.sample_period * 1e6;
    let sym_us = ofdm.symbol_us();
    let guard_us = 2.0 * sym_us;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, monitor as u64));
    let own: Vec<(u64, u64)> = trace.events_of(monitor).map(|e| (e.t_s, e.t_e)).collect();
    let visible = visible_events(trace, monitor);

    // Busy periods: unions of overlapping visible transmissions.
    let mut periods: Vec<(u64, u64, Vec<&TxEvent>)> = Vec::new();
    for e in visible {
        match periods.last_mut() {
            Some((_, end, evs)) if e.t_s < *end => {
                *end = (*end).max(e.t_e);
                evs.push(e);
            }
            _ => periods.push((e.t_s, e.t_e, vec![e])),
        }
    }

    let mut db = SignatureDb::new();
    let mut tracker = RetxTracker::<IqBuffer>::new(*cfg, 1.5 * sample_us);
    for (p_start, p_end, evs) in periods {
        if own.iter().any(|&o| overlaps(o, (p_start, p_end))) {
            continue;
        }
        if !evs.iter().any(|e| trace.topology.node(e.node_id).map(|n| n.kind) == Some(NodeKind::Enb)) {
            continue;
        }
        let win_start = p_start as f64 - guard_us;
        let len = (((p_end - p_start) as f64 + 2.0 * guard_us) / sample_us).ceil() as usize;
        let mut buf = IqBuffer::zeros(len, ofdm.sample_period);
        for e in &evs {
            let node = trace.topology.node(e.node_id).expect("event node in topology");
            let snr_db = mac::rx_power_dbm(node, trace.topology.node(monitor).unwrap()) - cfg.noise_dbm;
            let gain = 10f64.powf(snr_db / 20.0);
            let airtime_samples = ((e.t_e - e.t_s) as f64 / sample_us).round() as usize;
            let wave = match node.kind {
                NodeKind::Enb => {
                    let symbols = (((e.t_e - e.t_s) as f64) / sym_us).round().max(1.0) as usize;
                    signal::synthesize_lte_frame(
                        &ofdm,
                        mix(e.node_id as u64, e.frame_seq),
                        enb_id_seed(e.node_id),
                        symbols,
                    )?
                }
                NodeKind::Ap => {
                    let (sl, cp) = WIFI_SYMBOL;
                    let n = airtime_samples.div_ceil(sl);
                    let mut w = signal::synthesize_wifi_burst(sl, cp, n, rng.random(), ofdm.sample_period)?;
                    w.samples.truncate(airtime_samples);
                    w
                }
            };
            let ch = ChannelModel::with_random_phase(gain, 0.0, &mut rng);
            let offset = ((e.t_s as f64 - win_start) / sample_us).round() as usize;
            buf = signal::overlay(&buf, &signal::apply_channel(&wave, &ch), offset);
        }
        buf.samples.truncate(len.max(buf.len()));
        let noise = ChannelModel { gain: 1.0, phase_offset: 0.0, noise_power: 1.0, rng_seed: rng.random() };
        let buf = signal::apply_channel(&buf, &noise);

        let Some(det) = signal::detect_lte_frame(&buf, &ofdm, cfg.gamma_lte)? else {
            continue;
        };
        let frames = match signal::split_colliding_lte(&det) {
            Ok((a, b)) => vec![a, b],
            Err(_) => vec![det],
        };
        for d in frames {
            let (s, end) = (d.start_sample(), d.end_sample().min(buf.len()));
            let samples = buf.window(s, end - s);
            let local_id = match signal::attribute_frame(&buf, &d, &ofdm, &mut db, cfg.gamma_id) {
                Ok(a) if a.is_downlink => a.local_id,
                Ok(_) | Err(SignalError::CorruptedId) => None,
                Err(e) => return Err(e.into()),
            };
            let power = samples.mean_power() * dbm_to_mw(cfg.noise_dbm);
            tracker.push(FrameRecord {
                t_s: win_start + s as f64 * sample_us,
                t_e: win_start + end as f64 * sample_us,
                local_id,
                payload: samples,
                power_dbm: 10.0 * power.log10(),
            });
        }
    }
    let (observations, _) = tracker.finish();
    Ok(MonitorReport { monitor_id: monitor, observations, activity: own_activity(trace, monitor) })
}

/// Column order of the observation wire format.
pub const REPORT_COLUMNS: [&str; 7] = ["local_id", "t_s_us", "t_e_us", "class", "retx_round", "hidden", "monitor_id"];

/// Serializes observations of several monitors, one record per line.
pub fn reports_to_tsv(reports: &[MonitorReport]) -> String {
    let mut out = String::new();
    out.push_str(&REPORT_COLUMNS.join("\t"));
    out.push('\n');
    for r in reports {
        for o in &r.observations {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                o.local_id, o.t_s, o.t_e, o.class, o.retx_round, o.hidden, r.monitor_id
            );
        }
    }
    out
}

/// Own-activity records: `monitor_id, t_s, t_e`.
pub fn activity_to_tsv(reports: &[MonitorReport]) -> String {
    let mut out = String::from("monitor_id\tt_s_us\tt_e_us\n");
    for r in reports {
        for (s, e) in &r.activity {
            let _ = writeln!(out, "{}\t{}\t{}", r.monitor_id, s, e);
        }
    }
    out
}

fn field<T: std::str::FromStr>(cols: &[&str], k: usize, line: usize) -> Result<T> {
    cols.get(k)
        .and_then(|c| c.trim().parse().ok())
        .ok_or_else(|| MonitorError::Parse { line, msg: format!("bad or missing column {}", k + 1) })
}

/// Parses observation and activity tables back into per-monitor reports.
pub fn reports_from_tsv(observations: &str, activity: &str) -> Result<Vec<MonitorReport>> {
    let mut by_monitor: BTreeMap<NodeId, MonitorReport> = BTreeMap::new();
    for (n, line) in observations.lines().enumerate().skip(1) {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let class: String = field(&cols, 3, n + 1)?;
        let class = class.parse().map_err(|msg| MonitorError::Parse { line: n + 1, msg })?;
        let monitor: NodeId = field(&cols, 6, n + 1)?;
        let obs = ObservationVector {
            local_id: field(&cols, 0, n + 1)?,
            t_s: field(&cols, 1, n + 1)?,
            t_e: field(&cols, 2, n + 1)?,
            class,
            retx_round: field(&cols, 4, n + 1)?,
            hidden: field(&cols, 5, n + 1)?,
        };
        by_monitor
            .entry(monitor)
            .or_insert_with(|| MonitorReport { monitor_id: monitor, ..Default::default() })
            .observations
            .push(obs);
    }
    for (n, line) in activity.lines().enumerate().skip(1) {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let monitor: NodeId = field(&cols, 0, n + 1)?;
        let span = (field(&cols, 1, n + 1)?, field(&cols, 2, n + 1)?);
        by_monitor
            .entry(monitor)
            .or_insert_with(|| MonitorReport { monitor_id: monitor, ..Default::default() })
            .activity
            .push(span);
    }
    Ok(by_monitor.into_values().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_by_duration() {
        assert_eq!(classify_priority(2000.0).unwrap(), PriorityClass::C1);
        assert_eq!(classify_priority(3000.0).unwrap(), PriorityClass::C2);
        assert_eq!(classify_priority(8000.0).unwrap(), PriorityClass::C3);
        assert_eq!(classify_priority(10_000.0).unwrap(), PriorityClass::C3);
        assert!(classify_priority(12_000.0).is_err());
        assert!(classify_priority(0.0).is_err());
    }

    fn log_of(vals: &[f64]) -> PowerLog {
        let mut l = PowerLog::new(16);
        for &v in vals {
            l.push(v);
        }
        l
    }

    #[test]
    fn equal_powers_are_reciprocal() {
        let cfg = MonitorConfig { own_power_dbm: 20.0, enb_power_dbm: 20.0, noise_dbm: -200.0, ..Default::default() };
        let f = infer_neighbor_flag(&log_of(&[-63.0; 16]), &cfg).unwrap();
        assert_eq!(f, NeighborFlag { h: 0, low_confidence: false });
    }

    #[test]
    fn power_asymmetry_hides_the_ap() {
        let cfg = MonitorConfig { own_power_dbm: 20.0, enb_power_dbm: 30.0, noise_dbm: -100.0, ..Default::default() };
        let sigma2 = dbm_to_mw(cfg.noise_dbm);
        let reading = 10.0 * (dbm_to_mw(-68.0) + sigma2).log10();
        assert_eq!(infer_neighbor_flag(&log_of(&[reading; 16]), &cfg).unwrap().h, 1);
    }

    #[test]
    fn tie_means_hidden() {
        let cfg = MonitorConfig { enb_power_dbm: 20.0, noise_dbm: -200.0, ..Default::default() };
        let mut v = vec![-60.0; 8];
        v.extend([-90.0; 8]);
        assert_eq!(infer_neighbor_flag(&log_of(&v), &cfg).unwrap().h, 1);
        let short = infer_neighbor_flag(&log_of(&[-60.0; 3]), &cfg).unwrap();
        assert!(short.low_confidence);
        assert!(infer_neighbor_flag(&PowerLog::new(16), &cfg).is_err());
    }

    fn rec(t: f64, id: Option<LocalId>, seq: u64) -> FrameRecord<PayloadTag> {
        FrameRecord { t_s: t, t_e: t + 8000.0, local_id: id, payload: PayloadTag { node: 1, frame_seq: seq }, power_dbm: -50.0 }
    }

    #[test]
    fn retx_rounds_on_clean_path() {
        let mut tr = RetxTracker::new(MonitorConfig::default(), 1e-6);
        for (t, seq) in [(0.0, 0), (9000.0, 0), (18_000.0, 1), (27_000.0, 2)] {
            tr.push(rec(t, Some(1), seq));
        }
        let (obs, dropped) = tr.finish();
        assert_eq!(obs.iter().map(|o| o.retx_round).collect::<Vec<_>>(), vec![0, 1, 0, 0]);
        assert_eq!(dropped, 0);
    }

    #[test]
    fn corrupted_id_is_backfilled() {
        let mut tr = RetxTracker::new(MonitorConfig::default(), 1e-6);
        tr.push(rec(0.0, Some(1), 0));
        tr.push(rec(9000.0, None, 1));
        tr.push(rec(18_000.0, Some(1), 1));
        tr.push(rec(27_000.0, None, 2));
        let (obs, dropped) = tr.finish();
        assert_eq!(obs.len(), 3);
        assert_eq!(obs[1].local_id, 1);
        assert_eq!(obs.iter().map(|o| o.retx_round).collect::<Vec<_>>(), vec![0, 0, 1]);
        assert_eq!(dropped, 1);
    }

    #[test]
    fn wire_format_round_trip() {
        let r = MonitorReport {
            monitor_id: 4,
            observations: vec![ObservationVector {
                t_s: 160.1,
                t_e: 300.1,
                local_id: 3,
                class: PriorityClass::C3,
                retx_round: 1,
                hidden: 0,
            }],
            activity: vec![(10.0, 20.0)],
        };
        let obs = reports_to_tsv(std::slice::from_ref(&r));
        assert_eq!(obs, "local_id\tt_s_us\tt_e_us\tclass\tretx_round\thidden\tmonitor_id\n3\t160.1\t300.1\tC3\t1\t0\t4\n");
        let back = reports_from_tsv(&obs, &activity_to_tsv(std::slice::from_ref(&r))).unwrap();
        assert_eq!(back, vec![r]);
    }
}
