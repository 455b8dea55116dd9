"""Quick end-to-end check of the coexist_py extension.

Build and install first:
    pip install maturin
    maturin build --release -m crates/coexist-py/Cargo.toml -o dist
    pip install dist/coexist_py-*.whl
"""

import coexist_py as cx


def check_signal():
    frame = cx.synthesize_lte_frame(payload_seed=7, id_seed=3, duration=14)
    assert len(frame) == 14 * 256
    det = cx.detect_lte_frame(frame)
    assert det is not None and det[1] > det[0]
    assert cx.detect_lte_frame(cx.synthesize_wifi_burst(60, 1)) is None

    rotated = cx.apply_channel(frame, gain=1.0, phase=1.1)
    assert abs(cx.normalized_correlation(frame, rotated) - 1.0) < 1e-9
    other = cx.synthesize_lte_frame(payload_seed=8, id_seed=4, duration=14)
    assert cx.normalized_correlation(frame, other) < 0.2
    assert cx.match_retransmission(frame, rotated)


def check_pipeline():
    trace = cx.simulate("basic", seed=5, events=20000)
    assert len(trace) == 20000
    enb, *aps = trace.node_ids
    assert trace.attempt_rate(enb) > max(trace.attempt_rate(a) for a in aps)
    first = trace.events()[0]
    assert {"node_id", "t_s", "backoff_drawn"} <= first.keys()

    verdicts = trace.evaluate(delta=0.05, min_obs=200)
    assert len(verdicts) == 1 and verdicts[0]["misbehaving"] is True
    assert min(verdicts[0]["backoffs"]) >= 0


def check_detector():
    assert cx.js_divergence({0: 0.5, 1: 0.5}, {0: 0.5, 1: 0.5}) == 0.0
    assert abs(cx.js_divergence({0: 1.0}, {1: 1.0}) - 1.0) < 1e-12

    spec = """
name = "py_smoke"
seeds = [1, 2]
j = 150
target_frames = 900
arms = ["compliant", "misbehaving"]

[scenario]
name = "three_aps"

[[scenario.group]]
kind = "enb"
policy = { kind = "cw_reduction", q_m = 4, alpha = 0.2 }

[[scenario.group]]
kind = "ap"
count = 3
placement = { kind = "line", start = [5.0, 0.0], step = [0.0, 5.0] }
"""
    runs = cx.run_experiment(spec)
    comp = [r for r in runs if r.arm == "compliant"]
    mis = [r for r in runs if r.arm == "misbehaving"]
    assert len(comp) == len(mis) == 2
    roc = cx.roc_sweep(comp, mis, [0.0, 0.05, 1.0])
    assert roc[0][1:3] == (1.0, 1.0) and roc[-1][1:3] == (0.0, 0.0)
    assert "fig10a" in cx.presets()


if __name__ == "__main__":
    check_signal()
    check_pipeline()
    check_detector()
    print("coexist_py smoke test passed")
