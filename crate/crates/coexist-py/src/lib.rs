//! Python bindings: signal synthesis and detection, the MAC simulator, the hub, and
//! the experiment runner.

use std::collections::BTreeMap;
use std::fmt::Display;

use num_complex::Complex64;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use coexist::experiment::{self, ExperimentSpec, Scenario};
use coexist::hub::{self, BackoffDistribution, HubConfig};
use coexist::{mac, signal};

fn err(e: impl Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "IqBuffer", from_py_object)]
#[derive(Clone)]
struct PyIqBuffer(signal::IqBuffer);

#[pymethods]
impl PyIqBuffer {
    #[new]
    #[pyo3(signature = (samples, sample_period = 1e-3 / 12.0 / 256.0))]
    fn new(samples: Vec<Complex64>, sample_period: f64) -> PyResult<Self> {
        if !(sample_period > 0.0) {
            return Err(err("sample_period must be positive"));
        }
        Ok(Self(signal::IqBuffer::new(samples, sample_period)))
    }

    #[getter]
    fn samples(&self) -> Vec<Complex64> {
        self.0.samples.clone()
    }

    #[getter]
    fn sample_period(&self) -> f64 {
        self.0.sample_period
    }

    fn mean_power(&self) -> f64 {
        self.0.mean_power()
    }

    /// Sum of this buffer and `other` delayed by `offset` samples.
    fn overlay(&self, other: &PyIqBuffer, offset: usize) -> Self {
        Self(signal::overlay(&self.0, &other.0, offset))
    }

    fn __len__(&self) -> usize {
        self.0.samples.len()
    }
}

/// LTE frame of `duration` symbols with the default layout.
#[pyfunction]
fn synthesize_lte_frame(payload_seed: u64, id_seed: u64, duration: usize) -> PyResult<PyIqBuffer> {
    signal::synthesize_lte_frame(&signal::OfdmConfig::default(), payload_seed, id_seed, duration)
        .map(PyIqBuffer)
        .map_err(err)
}

/// Wi-Fi burst (80-sample symbols, 16-sample CP) at the LTE sample rate.
#[pyfunction]
fn synthesize_wifi_burst(n_symbols: usize, seed: u64) -> PyResult<PyIqBuffer> {
    let (sl, cp) = coexist::monitor::WIFI_SYMBOL;
    signal::synthesize_wifi_burst(sl, cp, n_symbols, seed, signal::OfdmConfig::default().sample_period)
        .map(PyIqBuffer)
        .map_err(err)
}

/// Scales by `gain`, rotates by `phase` and adds noise of power `noise_power`.
#[pyfunction]
#[pyo3(signature = (buf, gain = 1.0, phase = 0.0, noise_power = 0.0, seed = 0))]
fn apply_channel(buf: &PyIqBuffer, gain: f64, phase: f64, noise_power: f64, seed: u64) -> PyIqBuffer {
    let ch = signal::ChannelModel { gain, phase_offset: phase, noise_power, rng_seed: seed };
    PyIqBuffer(signal::apply_channel(&buf.0, &ch))
}

/// `(t_s, t_e)` in seconds of the LTE frame found in `buf`, or None.
#[pyfunction]
#[pyo3(signature = (buf, gamma_lte = 0.4))]
fn detect_lte_frame(buf: &PyIqBuffer, gamma_lte: f64) -> PyResult<Option<(f64, f64)>> {
    let det = signal::detect_lte_frame(&buf.0, &signal::OfdmConfig::default(), gamma_lte).map_err(err)?;
    Ok(det.map(|d| (d.t_s, d.t_e)))
}

#[pyfunction]
fn normalized_correlation(a: &PyIqBuffer, b: &PyIqBuffer) -> PyResult<f64> {
    signal::normalized_correlation(&a.0, &b.0).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (a, b, gamma_rt = 0.2))]
fn match_retransmission(a: &PyIqBuffer, b: &PyIqBuffer, gamma_rt: f64) -> PyResult<bool> {
    signal::match_retransmission(&a.0, &b.0, gamma_rt).map_err(err)
}

/// Ground-truth record of one simulation run.
#[pyclass(name = "Trace")]
struct PyTrace {
    trace: mac::EventTrace,
    scenario: Scenario,
}

#[pymethods]
impl PyTrace {
    #[getter]
    fn node_ids(&self) -> Vec<mac::NodeId> {
        self.trace.topology.nodes.iter().map(|n| n.node_id).collect()
    }

    #[getter]
    fn end_us(&self) -> u64 {
        self.trace.end_us
    }

    fn __len__(&self) -> usize {
        self.trace.events.len()
    }

    fn attempt_rate(&self, node: mac::NodeId) -> PyResult<f64> {
        mac::attempt_rate(&self.trace, node).map_err(err)
    }

    fn saturation_level(&self, node: mac::NodeId) -> PyResult<f64> {
        mac::saturation_level(&self.trace, node).map_err(err)
    }

    /// One dict per transmission attempt.
    fn events<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.trace
            .events
            .iter()
            .map(|e| {
                let d = PyDict::new(py);
                d.set_item("node_id", e.node_id)?;
                d.set_item("t_s", e.t_s)?;
                d.set_item("t_e", e.t_e)?;
                d.set_item("class", e.class.index())?;
                d.set_item("backoff_drawn", e.backoff_drawn)?;
                d.set_item("cw_used", e.cw_used)?;
                d.set_item("retx_round", e.retx_round)?;
                d.set_item("collided", e.collided)?;
                Ok(d)
            })
            .collect()
    }

    fn to_tsv(&self) -> String {
        self.trace.to_tsv()
    }

    /// Observe with every AP and run the hub. One dict per eNB.
    #[pyo3(signature = (delta = 0.05, min_obs = 100, max_obs = None, keep_negative = false))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        delta: f64,
        min_obs: usize,
        max_obs: Option<usize>,
        keep_negative: bool,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let reports =
            experiment::observe_all(&self.trace, &self.scenario.monitor_config(), self.trace.seed).map_err(err)?;
        let cfg = HubConfig { delta, min_obs, max_obs, keep_negative, ..self.scenario.hub };
        let evals = hub::evaluate(&reports, &cfg).map_err(err)?;
        evals
            .iter()
            .map(|e| {
                let d = PyDict::new(py);
                d.set_item("enb_id", e.global_id)?;
                d.set_item("n_used", e.n_used)?;
                d.set_item("d_js", e.divergence)?;
                d.set_item("misbehaving", e.verdict.as_ref().map(|v| v.misbehaving))?;
                let b: Vec<i64> = e.estimates.iter().filter(|x| x.usable()).map(|x| x.b_hat).collect();
                d.set_item("backoffs", b)?;
                Ok(d)
            })
            .collect()
    }
}

fn load_scenario(scenario: &str) -> PyResult<Scenario> {
    if let Ok(spec) = experiment::preset(scenario) {
        return Ok(spec.scenario);
    }
    Scenario::from_toml(scenario).map_err(err)
}

/// Runs a scenario given as TOML text or a preset name.
#[pyfunction]
#[pyo3(signature = (scenario, seed = None, events = None))]
fn simulate(py: Python<'_>, scenario: &str, seed: Option<u64>, events: Option<usize>) -> PyResult<PyTrace> {
    let scenario = load_scenario(scenario)?;
    let seed = seed.unwrap_or(scenario.seed);
    let n = events.unwrap_or(scenario.n_events);
    let nodes = scenario.build_nodes(seed).map_err(err)?;
    let trace = py.detach(|| mac::run_sim(&nodes, seed, n)).map_err(err)?;
    Ok(PyTrace { trace, scenario })
}

/// Base-2 Jensen-Shannon divergence of two `{value: mass}` dicts.
#[pyfunction]
fn js_divergence(m: BTreeMap<i64, f64>, w: BTreeMap<i64, f64>) -> PyResult<f64> {
    let m = BackoffDistribution::from_weights(m).map_err(err)?;
    let w = BackoffDistribution::from_weights(w).map_err(err)?;
    Ok(hub::js_divergence(&m, &w))
}

#[pyclass(name = "Run", from_py_object)]
#[derive(Clone)]
struct PyRun(experiment::RunRecord);

#[pymethods]
impl PyRun {
    #[getter]
    fn series(&self) -> String {
        self.0.series.clone()
    }
    #[getter]
    fn sweep(&self) -> String {
        self.0.sweep.clone()
    }
    #[getter]
    fn arm(&self) -> String {
        self.0.arm.to_string()
    }
    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }
    #[getter]
    fn enb_rate(&self) -> f64 {
        self.0.enb_rate
    }
    #[getter]
    fn ap_rate(&self) -> f64 {
        self.0.ap_rate
    }
    #[getter]
    fn d_js(&self) -> Option<f64> {
        self.0.d_js
    }
    #[getter]
    fn misbehaving(&self) -> Option<bool> {
        self.0.misbehaving
    }

    fn __repr__(&self) -> String {
        format!(
            "Run(series={:?}, sweep={:?}, arm={}, seed={}, d_js={:?})",
            self.0.series, self.0.sweep, self.0.arm, self.0.seed, self.0.d_js
        )
    }
}

/// Runs an experiment given as TOML text or a preset name. `trials` replaces the
/// seed list with 1..=trials.
#[pyfunction]
#[pyo3(signature = (spec, trials = None))]
fn run_experiment(py: Python<'_>, spec: &str, trials: Option<u64>) -> PyResult<Vec<PyRun>> {
    let mut spec = match experiment::preset(spec) {
        Ok(s) => s,
        Err(_) => ExperimentSpec::from_toml(spec).map_err(err)?,
    };
    if let Some(n) = trials {
        spec.seeds = experiment::Seeds::Range { start: 1, count: n };
    }
    let result = py.detach(|| experiment::run_experiment(&spec)).map_err(err)?;
    Ok(result.runs.into_iter().map(PyRun).collect())
}

/// `(delta, p_d, p_fa, n_trials)` per threshold.
#[pyfunction]
fn roc_sweep(compliant: Vec<PyRun>, misbehaving: Vec<PyRun>, delta_grid: Vec<f64>) -> PyResult<Vec<(f64, f64, f64, usize)>> {
    let c: Vec<_> = compliant.into_iter().map(|r| r.0).collect();
    let m: Vec<_> = misbehaving.into_iter().map(|r| r.0).collect();
    let pts = experiment::roc_sweep(&c, &m, &delta_grid).map_err(err)?;
    Ok(pts.into_iter().map(|p| (p.delta, p.p_d, p.p_fa, p.n_trials)).collect())
}

#[pyfunction]
fn presets() -> Vec<&'static str> {
    experiment::PRESETS.iter().map(|(n, _)| *n).collect()
}

#[pymodule]
fn coexist_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyIqBuffer>()?;
    m.add_class::<PyTrace>()?;
    m.add_class::<PyRun>()?;
    m.add_function(wrap_pyfunction!(synthesize_lte_frame, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize_wifi_burst, m)?)?;
    m.add_function(wrap_pyfunction!(apply_channel, m)?)?;
    m.add_function(wrap_pyfunction!(detect_lte_frame, m)?)?;
    m.add_function(wrap_pyfunction!(normalized_correlation, m)?)?;
    m.add_function(wrap_pyfunction!(match_retransmission, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(js_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(roc_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    Ok(())
}
