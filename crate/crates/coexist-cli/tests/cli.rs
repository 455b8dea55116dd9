use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn coexist(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coexist"))
        .args(args)
        .env("COEXIST_OUT_DIR", out_root)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

const SMALL_SPEC: &str = r#"
name = "tiny_roc"
seeds = { start = 1, count = 3 }
j = 150
target_frames = 900
arms = ["compliant", "misbehaving"]
outputs = ["roc", "distributions"]
delta_grid = [0.0, 0.05, 1.0]

[scenario]
name = "three_aps"

[[scenario.group]]
kind = "enb"
policy = { kind = "cw_reduction", q_m = 4, alpha = 0.2 }

[[scenario.group]]
kind = "ap"
count = 3
placement = { kind = "line", start = [5.0, 0.0], step = [0.0, 5.0] }
"#;

#[test]
fn simulate_then_detect() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let stdout = ok(&coexist(
        &["simulate", "basic", "--seed", "3", "--events", "20000", "--out", run.to_str().unwrap()],
        tmp.path(),
    ));
    assert_eq!(stdout.lines().count(), 4);
    for f in ["trace.tsv", "observations.tsv", "activity.tsv"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let verdicts = ok(&coexist(&["detect", run.to_str().unwrap(), "--min-obs", "200"], tmp.path()));
    let rows: Vec<&str> = verdicts.lines().skip(1).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].ends_with("misbehaving"), "{verdicts}");
    // Default output location comes from the environment.
    assert!(tmp.path().join("verdicts.tsv").exists());
}

#[test]
fn experiment_and_roc_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.toml");
    fs::write(&spec, SMALL_SPEC).unwrap();
    ok(&coexist(&["experiment", spec.to_str().unwrap()], tmp.path()));
    let out = tmp.path().join("tiny_roc");
    let roc = fs::read_to_string(out.join("roc.tsv")).unwrap();
    assert!(roc.starts_with("# spec_hash="));
    assert_eq!(roc.lines().count(), 2 + 3);
    assert!(out.join("distributions").read_dir().unwrap().count() >= 2);

    let arms = out.join("arms").join("-_-");
    let stdout = ok(&coexist(
        &[
            "roc",
            arms.join("compliant").to_str().unwrap(),
            arms.join("misbehaving").to_str().unwrap(),
            "--delta-grid",
            "0,1",
        ],
        tmp.path(),
    ));
    let rows: Vec<Vec<&str>> = stdout.lines().skip(2).map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows[0][3..5], ["1.000000", "1.000000"]);
    assert_eq!(rows[1][3..5], ["0.000000", "0.000000"]);
}

#[test]
fn experiment_output_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.toml");
    fs::write(&spec, SMALL_SPEC).unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        ok(&coexist(&["experiment", spec.to_str().unwrap(), "--out-dir", d.to_str().unwrap()], tmp.path()));
    }
    for f in ["runs.tsv", "summary.tsv", "roc.tsv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn bad_sweep_fails_before_running() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.toml");
    fs::write(&spec, SMALL_SPEC.replace("delta_grid", "sweep = { param = \"alpha\", values = [] }\ndelta_grid")).unwrap();
    let o = coexist(&["experiment", spec.to_str().unwrap()], tmp.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("no values"));
    assert!(!tmp.path().join("tiny_roc").exists());
}

#[test]
fn lists_presets() {
    let tmp = tempfile::tempdir().unwrap();
    let names = ok(&coexist(&["presets"], tmp.path()));
    for p in ["fig8a", "fig10a", "fig11b", "fig13b"] {
        assert!(names.lines().any(|l| l == p));
    }
}
