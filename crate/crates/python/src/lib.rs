//! Python bindings: circuit files, evaluation, optimization, sweeps and random search.

use std::path::PathBuf;

use hombell::circuit::fibre_transmissivity;
use hombell::gaussian::squeezing_db as db_of;
use hombell::optimize::SweepPoint;
use hombell::{
    BellMeasurement, Circuit, CircuitFile, EnvConfig, Error, EvalOptions, HeraldScheme, OptimizeConfig, Strategy,
};
use pyo3::create_exception;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(hombell_py, HeraldImpossibleError, PyValueError, "A heralding event has (numerically) zero probability.");

fn to_py(e: Error) -> PyErr {
    match e {
        Error::HeraldImpossible { .. } => HeraldImpossibleError::new_err(e.to_string()),
        Error::Unresolved { .. } | Error::Infeasible(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// A circuit with its heralding scheme and Bell measurement.
#[pyclass(name = "Circuit", module = "hombell_py", skip_from_py_object)]
#[derive(Clone)]
struct PyCircuit {
    circuit: Circuit,
    measurement: BellMeasurement,
    note: Option<String>,
}

impl PyCircuit {
    fn file(&self) -> Result<CircuitFile, Error> {
        let mut f = CircuitFile::from_circuit(&self.circuit, Some(&self.measurement))?;
        f.note = self.note.clone();
        Ok(f)
    }

    fn from_file(f: CircuitFile) -> Result<Self, Error> {
        Ok(Self { circuit: f.circuit()?, measurement: f.measurement()?, note: f.note })
    }
}

#[pymethods]
impl PyCircuit {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        CircuitFile::from_json(text).and_then(Self::from_file).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        CircuitFile::load(&path).and_then(Self::from_file).map_err(to_py)
    }

    fn to_json(&self) -> PyResult<String> {
        self.file().map(|f| f.to_json()).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.file().and_then(|f| f.save(&path)).map_err(to_py)
    }

    #[getter]
    fn n_modes(&self) -> usize {
        self.circuit.n_modes
    }

    /// `(kind, modes, param)` per gate, modes 1-based.
    #[getter]
    fn gates(&self) -> Vec<(String, Vec<usize>, f64)> {
        self.circuit.gates.iter().map(|g| (g.kind.symbol().to_string(), g.modes.clone(), g.param)).collect()
    }

    #[getter]
    fn note(&self) -> Option<String> {
        self.note.clone()
    }

    /// `(theta0, theta1, phi0, phi1)`.
    #[getter]
    fn angles(&self) -> (f64, f64, f64, f64) {
        let m = &self.measurement;
        (m.theta[0], m.theta[1], m.phi[0], m.phi[1])
    }

    fn params(&self) -> Vec<f64> {
        self.circuit.params()
    }

    fn with_params(&self, params: Vec<f64>) -> PyResult<Self> {
        if params.len() != self.circuit.gates.len() {
            return Err(PyValueError::new_err(format!(
                "expected {} parameters, got {}",
                self.circuit.gates.len(),
                params.len()
            )));
        }
        Ok(Self { circuit: self.circuit.with_params(&params), ..self.clone() })
    }

    fn with_angles(&self, theta0: f64, theta1: f64, phi0: f64, phi1: f64) -> Self {
        let mut measurement = self.measurement.clone();
        measurement.theta = [theta0, theta1];
        measurement.phi = [phi0, phi1];
        Self { measurement, ..self.clone() }
    }

    fn __repr__(&self) -> String {
        let gates: Vec<String> = self.circuit.gates.iter().map(|g| g.to_string()).collect();
        format!("Circuit({} modes: {})", self.circuit.n_modes, gates.join(" "))
    }
}

/// Evaluates CHSH, correlators and heralding probability, with optional fibre on Bob's side.
#[pyfunction]
#[pyo3(signature = (circuit, distance_km = 0.0, chsh_precision = hombell::chsh::CHSH_PRECISION))]
fn evaluate<'py>(
    py: Python<'py>,
    circuit: &PyCircuit,
    distance_km: f64,
    chsh_precision: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let opts = EvalOptions { bob_transmissivity: fibre_transmissivity(distance_km), chsh_precision, ..Default::default() };
    let e = py.detach(|| hombell::evaluate(&circuit.circuit, &circuit.measurement, &opts)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("chsh", e.chsh)?;
    d.set_item("error_bound", e.error_bound)?;
    d.set_item("herald_probability", e.herald_probability)?;
    d.set_item("correlators", e.correlators.map(|row| row.to_vec()).to_vec())?;
    d.set_item("stage_probabilities", e.stages)?;
    d.set_item("heralded", e.heralded)?;
    Ok(d)
}

fn optimize_config(cap_db: f64, optimize_angles: bool, seed: u64) -> OptimizeConfig {
    OptimizeConfig { squeeze_cap_db: cap_db, optimize_angles, seed, ..Default::default() }
}

/// Maximizes CHSH over the gate parameters; returns the optimized circuit and its score.
#[pyfunction]
#[pyo3(signature = (circuit, cap_db = 10.0, optimize_angles = false, seed = 0))]
fn maximize_chsh(
    py: Python<'_>,
    circuit: &PyCircuit,
    cap_db: f64,
    optimize_angles: bool,
    seed: u64,
) -> PyResult<(PyCircuit, f64, f64)> {
    let cfg = optimize_config(cap_db, optimize_angles, seed);
    let opt = py
        .detach(|| hombell::maximize_chsh(&circuit.circuit, &circuit.measurement, &cfg))
        .map_err(to_py)?;
    let out = PyCircuit { circuit: opt.circuit, measurement: opt.measurement, note: circuit.note.clone() };
    Ok((out, opt.chsh, opt.herald_probability))
}

/// Maximizes the heralding probability subject to CHSH >= `floor`.
#[pyfunction]
#[pyo3(signature = (circuit, floor, cap_db = 10.0, seed = 0))]
fn maximize_herald_prob(
    py: Python<'_>,
    circuit: &PyCircuit,
    floor: f64,
    cap_db: f64,
    seed: u64,
) -> PyResult<(PyCircuit, f64, f64)> {
    let cfg = optimize_config(cap_db, false, seed);
    let opt = py
        .detach(|| hombell::maximize_herald_prob(&circuit.circuit, &circuit.measurement, floor, &cfg))
        .map_err(to_py)?;
    let out = PyCircuit { circuit: opt.circuit, ..circuit.clone() };
    Ok((out, opt.chsh, opt.herald_probability))
}

fn points(points: Vec<SweepPoint>) -> Vec<(f64, f64, f64)> {
    points.into_iter().map(|p| (p.x, p.chsh, p.herald_probability)).collect()
}

/// `(distance_km, chsh, herald_probability)` rows, re-optimizing at every distance.
#[pyfunction]
#[pyo3(signature = (circuit, max_km = 12.0, step_km = 0.5, cap_db = 10.0))]
fn sweep_distance(
    py: Python<'_>,
    circuit: &PyCircuit,
    max_km: f64,
    step_km: f64,
    cap_db: f64,
) -> PyResult<Vec<(f64, f64, f64)>> {
    let cfg = optimize_config(cap_db, false, 0);
    py.detach(|| hombell::sweep_distance(&circuit.circuit, &circuit.measurement, max_km, step_km, &cfg))
        .map(|s| points(s.points))
        .map_err(to_py)
}

/// `(eta, chsh, herald_probability)` rows at fixed parameters.
#[pyfunction]
#[pyo3(signature = (circuit, etas, chsh_precision = hombell::chsh::CHSH_PRECISION))]
fn sweep_efficiency(
    py: Python<'_>,
    circuit: &PyCircuit,
    etas: Vec<f64>,
    chsh_precision: f64,
) -> PyResult<Vec<(f64, f64, f64)>> {
    let cfg = OptimizeConfig { chsh_precision, ..Default::default() };
    py.detach(|| hombell::sweep_efficiency(&circuit.circuit, &circuit.measurement, &etas, &cfg))
        .map(|s| points(s.points))
        .map_err(to_py)
}

/// Random search; returns `(circuit, chsh, herald_probability, count)` ranked by reward.
#[pyfunction]
#[pyo3(signature = (episodes, strategy = 3, modes = 4, depth = 5, scheme = "click", eta = 1.0, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn random_search(
    py: Python<'_>,
    episodes: usize,
    strategy: u8,
    modes: usize,
    depth: usize,
    scheme: &str,
    eta: f64,
    seed: u64,
) -> PyResult<Vec<(PyCircuit, f64, f64, usize)>> {
    let scheme = match scheme {
        "click" => HeraldScheme::Click,
        "single-photon" | "single_photon_projection" => HeraldScheme::SinglePhotonProjection,
        other => return Err(PyValueError::new_err(format!("unknown heralding scheme {other:?}"))),
    };
    let cfg = EnvConfig {
        strategy: Strategy::new(strategy).map_err(to_py)?,
        n_modes: modes,
        n_circuit: depth,
        scheme,
        eta,
        optimize: OptimizeConfig { seed, ..Default::default() },
        ..Default::default()
    };
    let records = py.detach(|| hombell::random_search(&cfg, episodes, seed)).map_err(to_py)?;
    Ok(records
        .into_iter()
        .map(|r| {
            let c = PyCircuit { circuit: r.circuit, measurement: cfg.measurement.clone(), note: None };
            (c, r.chsh, r.herald_probability, r.count)
        })
        .collect())
}

/// Squeezing `r` in decibels, `20 r / ln 10`.
#[pyfunction]
fn squeezing_db(r: f64) -> f64 {
    db_of(r)
}

#[pymodule]
fn hombell_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCircuit>()?;
    m.add("HeraldImpossibleError", m.py().get_type::<HeraldImpossibleError>())?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(maximize_chsh, m)?)?;
    m.add_function(wrap_pyfunction!(maximize_herald_prob, m)?)?;
    m.add_function(wrap_pyfunction!(sweep_distance, m)?)?;
    m.add_function(wrap_pyfunction!(sweep_efficiency, m)?)?;
    m.add_function(wrap_pyfunction!(random_search, m)?)?;
    m.add_function(wrap_pyfunction!(squeezing_db, m)?)?;
    Ok(())
}
