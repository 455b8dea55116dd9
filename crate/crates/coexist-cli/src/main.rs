use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use coexist::experiment::{self, ExperimentSpec, Scenario};
use coexist::hub::{self, HubConfig};
use coexist::{mac, monitor};

#[derive(Parser)]
#[command(name = "coexist", version, about = "LTE-LAA / Wi-Fi coexistence simulator and misbehavior detector")]
struct Cli {
    /// Where outputs go when no explicit path is given.
    #[arg(long, global = true, env = "COEXIST_OUT_DIR", default_value = "coexist-out")]
    out_root: PathBuf,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write the trace plus every AP's reports.
    Simulate {
        /// Scenario TOML file, or the name of a shipped preset.
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        events: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the hub over a directory holding observations.tsv and activity.tsv.
    Detect {
        reports: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        #[arg(long, default_value_t = 100)]
        min_obs: usize,
        /// Use at most this many estimates per eNB.
        #[arg(long)]
        max_obs: Option<usize>,
        /// Keep negative backoff estimates in the observed distribution.
        #[arg(long)]
        keep_negative: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a sweep from an experiment TOML file or a preset name.
    Experiment {
        spec: String,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Override the seed list with 1..=N.
        #[arg(long)]
        trials: Option<u64>,
    },
    /// ROC points from two directories of runs.tsv files.
    Roc {
        compliant_dir: PathBuf,
        misbehaving_dir: PathBuf,
        /// Comma-separated thresholds or start:stop:step.
        #[arg(long, default_value = "0:0.2:0.002")]
        delta_grid: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List shipped presets.
    Presets,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Command::Simulate { scenario, seed, events, out } => {
            let out = out.unwrap_or_else(|| cli.out_root.join("simulate"));
            simulate(&scenario, seed, events, &out)
        }
        Command::Detect { reports, delta, min_obs, max_obs, keep_negative, out } => {
            let cfg = HubConfig { delta, min_obs, max_obs, keep_negative, ..HubConfig::default() };
            let out = out.unwrap_or_else(|| cli.out_root.join("verdicts.tsv"));
            detect(&reports, &cfg, &out)
        }
        Command::Experiment { spec, out_dir, trials } => {
            let mut spec = load_spec(&spec)?;
            if let Some(n) = trials {
                spec.seeds = experiment::Seeds::Range { start: 1, count: n };
            }
            let out = out_dir.unwrap_or_else(|| cli.out_root.join(&spec.name));
            let result = experiment::run_experiment(&spec)?;
            experiment::write_outputs(&spec, &result, &out)?;
            eprintln!("{} runs written to {}", result.runs.len(), out.display());
            Ok(())
        }
        Command::Roc { compliant_dir, misbehaving_dir, delta_grid, out } => {
            let grid = parse_grid(&delta_grid)?;
            let comp = read_runs(&compliant_dir)?;
            let mis = read_runs(&misbehaving_dir)?;
            let points = experiment::roc_sweep(&comp, &mis, &grid)?;
            let rows: Vec<_> = points.into_iter().map(|p| ("-".to_string(), "-".to_string(), p)).collect();
            let text = experiment::roc_to_tsv(&rows, "-");
            let out = out.unwrap_or_else(|| cli.out_root.join("roc.tsv"));
            write(&out, &text)?;
            print!("{text}");
            Ok(())
        }
        Command::Presets => {
            for (name, _) in experiment::PRESETS {
                println!("{name}");
            }
            Ok(())
        }
    }
}

fn load_spec(arg: &str) -> Result<ExperimentSpec> {
    let path = Path::new(arg);
    if path.exists() {
        let text = fs::read_to_string(path).with_context(|| format!("reading {arg}"))?;
        Ok(ExperimentSpec::from_toml(&text)?)
    } else {
        Ok(experiment::preset(arg)?)
    }
}

/// A scenario file, or the scenario embedded in an experiment file or preset.
fn load_scenario(arg: &str) -> Result<Scenario> {
    let path = Path::new(arg);
    if !path.exists() {
        return Ok(experiment::preset(arg)?.scenario);
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {arg}"))?;
    match Scenario::from_toml(&text) {
        Ok(s) => Ok(s),
        Err(scenario_err) => match ExperimentSpec::from_toml(&text) {
            Ok(spec) => Ok(spec.scenario),
            Err(_) => Err(scenario_err.into()),
        },
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn simulate(arg: &str, seed: Option<u64>, events: Option<usize>, out: &Path) -> Result<()> {
    let scenario = load_scenario(arg)?;
    let seed = seed.unwrap_or(scenario.seed);
    let n = events.unwrap_or(scenario.n_events);
    let nodes = scenario.build_nodes(seed)?;
    let trace = mac::run_sim(&nodes, seed, n)?;
    let reports = experiment::observe_all(&trace, &scenario.monitor_config(), seed)?;
    fs::create_dir_all(out)?;
    write(&out.join("trace.tsv"), &trace.to_tsv())?;
    write(&out.join("observations.tsv"), &monitor::reports_to_tsv(&reports))?;
    write(&out.join("activity.tsv"), &monitor::activity_to_tsv(&reports))?;
    for node in &nodes {
        let rate = mac::attempt_rate(&trace, node.node_id)?;
        let eta = mac::saturation_level(&trace, node.node_id)?;
        println!("node {}\t{:?}\tattempt_rate {rate:.4}\teta {eta:.4}", node.node_id, node.kind);
    }
    eprintln!("{} events written to {}", trace.events.len(), out.display());
    Ok(())
}

fn detect(dir: &Path, cfg: &HubConfig, out: &Path) -> Result<()> {
    let obs = fs::read_to_string(dir.join("observations.tsv"))
        .with_context(|| format!("reading observations.tsv in {}", dir.display()))?;
    // Without activity logs the hub only loses the unobserved-gap exclusion.
    let act = fs::read_to_string(dir.join("activity.tsv")).unwrap_or_default();
    let reports = monitor::reports_from_tsv(&obs, &act)?;
    let evals = hub::evaluate(&reports, cfg)?;
    let text = hub::verdicts_to_tsv(&evals, cfg.delta);
    write(out, &text)?;
    print!("{text}");
    Ok(())
}

fn read_runs(dir: &Path) -> Result<Vec<experiment::RunRecord>> {
    let path = if dir.is_dir() { dir.join("runs.tsv") } else { dir.to_path_buf() };
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(experiment::runs_from_tsv(&text)?)
}

fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() == 3 {
        let [a, b, step] = [parts[0], parts[1], parts[2]].map(|p| p.trim().parse::<f64>());
        let (a, b, step) = (a?, b?, step?);
        if step <= 0.0 || b < a {
            bail!("grid {s:?} must have start <= stop and a positive step");
        }
        let n = ((b - a) / step + 1e-9).floor() as usize;
        return Ok((0..=n).map(|k| a + k as f64 * step).collect());
    }
    s.split(',').map(|p| p.trim().parse::<f64>().with_context(|| format!("bad threshold {p:?}"))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_forms() {
        assert_eq!(parse_grid("0.1,0.2").unwrap(), vec![0.1, 0.2]);
        let g = parse_grid("0:0.1:0.05").unwrap();
        assert_eq!(g.len(), 3);
        assert!((g[2] - 0.1).abs() < 1e-12);
        assert!(parse_grid("0.2:0.1:0.05").is_err());
        assert!(parse_grid("x").is_err());
    }
}
