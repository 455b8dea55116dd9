//! Simulator ground truth as the oracle for the monitor and hub.

use std::collections::BTreeMap;

use coexist::hub::{self, BackoffEstimate, HubConfig};
use coexist::mac::*;
use coexist::monitor::{self, MonitorConfig};

fn node(id: NodeId, kind: NodeKind, at: [f64; 2]) -> NodeConfig {
    let class = PriorityClassParams::downlink(PriorityClass::C3, false);
    NodeConfig {
        node_id: id,
        kind,
        position: at,
        tx_power_dbm: if kind == NodeKind::Enb { 23.0 } else { 20.0 },
        cca_threshold_dbm: CCA_DBM,
        class,
        traffic: TrafficModel::Saturated,
        policy: MisbehaviorPolicy::Compliant,
        frame_us: class.t_mcop_us,
    }
}

fn cell(n_enb: u32, n_ap: u32) -> Vec<NodeConfig> {
    let mut v: Vec<NodeConfig> = (1..=n_enb).map(|i| node(i, NodeKind::Enb, [i as f64, 0.0])).collect();
    v.extend((1..=n_ap).map(|k| node(n_enb + k, NodeKind::Ap, [5.0, 3.0 * k as f64])));
    v
}

#[test]
fn two_identical_nodes_split_the_channel() {
    let mut nodes = cell(0, 2);
    nodes[0].node_id = 1;
    nodes[1].node_id = 2;
    let trace = run_sim(&nodes, 7, 100_000).unwrap();
    for id in [1, 2] {
        let r = attempt_rate(&trace, id).unwrap();
        assert!((r - 0.5).abs() <= 0.02, "node {id}: {r}");
    }
}

#[test]
fn compliant_draws_are_uniform() {
    let trace = run_sim(&cell(1, 0), 3, 100_000).unwrap();
    let mut counts = [0usize; 16];
    for e in &trace.events {
        assert_eq!(e.cw_used, 16);
        counts[e.backoff_drawn as usize] += 1;
    }
    let n = trace.events.len() as f64;
    let worst = counts.iter().map(|&c| (c as f64 / n - 1.0 / 16.0).abs()).fold(0.0, f64::max);
    assert!(worst < 0.01, "{worst}");
}

/// Hub estimates of every eNB compared with the backoff the simulator drew.
fn estimator_errors(n_enb: u32, n_ap: u32, seed: u64, events: usize) -> (usize, usize) {
    let trace = run_sim(&cell(n_enb, n_ap), seed, events).unwrap();
    let cfg = MonitorConfig::default();
    let reports: Vec<_> = (n_enb + 1..=n_enb + n_ap)
        .map(|ap| monitor::observe_trace(&trace, ap, &cfg, seed).unwrap())
        .collect();
    let evals = hub::evaluate(&reports, &HubConfig::default()).unwrap();
    let mut by_start: BTreeMap<(NodeId, u64), u32> = BTreeMap::new();
    for e in trace.events.iter().filter(|e| e.node_id <= n_enb) {
        by_start.insert((e.node_id, e.t_s), e.backoff_drawn);
    }
    let (mut ok, mut bad) = (0, 0);
    for ev in &evals {
        let usable: Vec<&BackoffEstimate> = ev.estimates.iter().filter(|e| e.usable()).collect();
        // The eNB behind a merged set is the one whose frames start at its estimates.
        let mut votes: BTreeMap<NodeId, usize> = BTreeMap::new();
        for est in &usable {
            for id in 1..=n_enb {
                if by_start.contains_key(&(id, est.t_s as u64)) {
                    *votes.entry(id).or_default() += 1;
                }
            }
        }
        let enb = votes.into_iter().max_by_key(|&(_, c)| c).map(|(n, _)| n).expect("set maps to an eNB");
        for est in usable {
            match by_start.get(&(enb, est.t_s as u64)) {
                Some(&b) if est.b_hat == b as i64 => ok += 1,
                _ => bad += 1,
            }
        }
    }
    (ok, bad)
}

#[test]
fn estimator_reproduces_drawn_backoff() {
    for (n_enb, n_ap, seed) in [(1, 3, 1), (2, 3, 2)] {
        let (ok, bad) = estimator_errors(n_enb, n_ap, seed, 20_000);
        assert!(ok > 1000, "{n_enb} eNBs: only {ok} usable estimates");
        assert_eq!(bad, 0, "{n_enb} eNBs: {bad} of {} estimates differ", ok + bad);
    }
}

#[test]
fn corrupted_id_is_backfilled_from_the_retransmission() {
    let nodes = cell(1, 2);
    let c3 = PriorityClass::C3;
    let tx = |node_id, t_s, t_e, retx_round, frame_seq, collided| TxEvent {
        node_id,
        t_s,
        t_e,
        class: c3,
        backoff_drawn: 0,
        cw_used: 16,
        retx_round,
        collided,
        queue_was_empty_gap: 0,
        frame_seq,
    };
    // AP 3 starts inside the eNB's ID field; the eNB retries the same frame later.
    let events = vec![
        tx(1, 0, 8000, 0, 0, true),
        tx(3, 100, 1100, 0, 0, true),
        tx(1, 9000, 17_000, 1, 0, false),
        tx(1, 18_000, 26_000, 0, 1, false),
    ];
    let trace = EventTrace {
        events,
        topology: Topology::new(nodes),
        seed: 0,
        end_us: 26_000,
        idle_queue_us: BTreeMap::new(),
    };
    let r = monitor::observe_trace(&trace, 2, &MonitorConfig::default(), 0).unwrap();
    let ids: Vec<_> = r.observations.iter().map(|o| o.local_id).collect();
    let rounds: Vec<_> = r.observations.iter().map(|o| o.retx_round).collect();
    assert_eq!(ids, vec![1, 1, 1]);
    assert_eq!(rounds, vec![0, 1, 0]);
}

#[test]
fn signal_path_timing_matches_truth() {
    let trace = run_sim(&cell(1, 2), 4, 600).unwrap();
    let cfg = MonitorConfig::default();
    let r = monitor::observe_signal(&trace, 2, &cfg, 4).unwrap();
    // The trace path already drops what the AP cannot hear while it transmits.
    let reference = monitor::observe_trace(&trace, 2, &cfg, 4).unwrap();
    let truth: Vec<u64> = trace.events_of(1).map(|e| e.t_s).collect();
    let sample_us = cfg.ofdm.sample_period * 1e6;
    let close = r
        .observations
        .iter()
        .filter(|o| truth.iter().any(|&t| (o.t_s - t as f64).abs() <= sample_us))
        .count();
    assert!(r.observations.len() as f64 >= 0.9 * reference.observations.len() as f64);
    assert!(close as f64 >= 0.99 * r.observations.len() as f64, "{close} of {}", r.observations.len());
}

#[test]
fn js_divergence_matches_brute_force() {
    // Computed independently in floating point from the definition.
    const EXPECTED: f64 = 0.311_278_124_459_132_83;
    let m = hub::BackoffDistribution::from_weights((0..4).map(|x| (x, 1.0)).collect()).unwrap();
    let w = hub::BackoffDistribution::from_weights((0..8).map(|x| (x, 1.0)).collect()).unwrap();
    assert!((hub::js_divergence(&m, &w) - EXPECTED).abs() < 1e-12);
}

#[test]
fn expected_distribution_mixes_windows() {
    let est = |q| BackoffEstimate {
        t_s: 0.0,
        b_hat: 0,
        raw: 0.0,
        q,
        class: PriorityClass::C3,
        retx_round: 0,
        intermediates: 0,
        excluded: None,
    };
    let w = hub::expected_distribution(&[est(4), est(8)]).unwrap();
    for x in 0..8 {
        let want = if x < 4 { 3.0 / 16.0 } else { 1.0 / 16.0 };
        assert!((w.mass_at(x) - want).abs() < 1e-12);
    }
}

#[test]
fn idle_gap_inverts_to_the_backoff() {
    // Previous frame ends at 1000; next starts after 16 + 3·9 + 5·9 µs of idle.
    let o = |t_s: f64, t_e: f64, r| monitor::ObservationVector {
        t_s,
        t_e,
        local_id: 1,
        class: PriorityClass::C3,
        retx_round: r,
        hidden: 0,
    };
    let report = monitor::MonitorReport {
        monitor_id: 2,
        observations: vec![o(0.0, 1000.0, 0), o(1088.0, 2088.0, 0)],
        activity: vec![],
    };
    let cfg = HubConfig { min_obs: 1, ..HubConfig::default() };
    let ev = hub::evaluate(&[report], &cfg).unwrap();
    let est: Vec<i64> = ev[0].estimates.iter().filter(|e| e.usable()).map(|e| e.b_hat).collect();
    assert_eq!(est, vec![5]);
}

#[test]
fn reports_survive_the_wire_format() {
    let trace = run_sim(&cell(1, 2), 9, 3000).unwrap();
    let reports = coexist::experiment::observe_all(&trace, &MonitorConfig::default(), 9).unwrap();
    let back =
        monitor::reports_from_tsv(&monitor::reports_to_tsv(&reports), &monitor::activity_to_tsv(&reports)).unwrap();
    let cfg = HubConfig::default();
    let a = hub::evaluate(&reports, &cfg).unwrap();
    let b = hub::evaluate(&back, &cfg).unwrap();
    assert_eq!(a.len(), b.len());
    assert_eq!(a[0].divergence, b[0].divergence);
}
