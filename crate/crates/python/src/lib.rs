//! Python bindings for teleposture.
//!
//! Observations cross the boundary as rows of 14 floats
//! `[t, px, py, pz, qw, qx, qy, qz, vx, vy, vz, wx, wy, wz]`, postures as
//! lists of 10 joint angles. Structured results come back as dicts.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde::Serialize;

use teleposture::calib::{estimate_segment_lengths, CalibrationOptions, CalibrationRecording, CalibrationRoutine};
use teleposture::filter::{validity_from_config, InitMode};
use teleposture::ik::{offline_traj_ik, online_ik, IkSettings};
use teleposture::likelihood::ValidityFn;
use teleposture::model::{JOINT_NAMES, NUM_JOINTS};
use teleposture::rula::{score_distribution, score_posture, RulaAssumptions};
use teleposture::synth::{self, benchmark_noise, SyntheticTask, TaskKind};
use teleposture::{io, FilterConfig, JointVector, PostureState, StylusObservation};

fn err(e: teleposture::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn joints(q: &[f64]) -> PyResult<JointVector> {
    if q.len() != NUM_JOINTS {
        return Err(PyValueError::new_err(format!("expected {NUM_JOINTS} joint angles, got {}", q.len())));
    }
    Ok(JointVector::from_column_slice(q))
}

fn observations(rows: &[Vec<f64>]) -> PyResult<Vec<StylusObservation>> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| io::observation_from_row(r).map_err(|m| PyValueError::new_err(format!("row {i}: {m}"))))
        .collect()
}

fn rows(states: &[PostureState]) -> Vec<Vec<f64>> {
    states.iter().map(|s| s.q.as_slice().to_vec()).collect()
}

fn assumptions(load_kg: f64, trunk_vertical: bool) -> RulaAssumptions {
    RulaAssumptions {
        load_kg,
        trunk_vertical_override: trunk_vertical,
        ..RulaAssumptions::default()
    }
}

/// Seated 10-DOF torso and arm chain.
#[pyclass(name = "HumanModel")]
struct PyHumanModel {
    inner: teleposture::HumanModel,
}

#[pymethods]
impl PyHumanModel {
    /// The bundled seated model, or one read from a TOML file.
    #[new]
    #[pyo3(signature = (path=None))]
    fn new(path: Option<PathBuf>) -> PyResult<Self> {
        let inner = match path {
            Some(p) => io::read_model(&p).map_err(err)?,
            None => teleposture::HumanModel::default_seated(),
        };
        Ok(Self { inner })
    }

    fn to_toml(&self) -> String {
        io::model_to_toml(&self.inner)
    }

    #[getter]
    fn segment_lengths<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.lengths)
    }

    #[getter]
    fn neutral_posture(&self) -> Vec<f64> {
        self.inner.neutral_posture.as_slice().to_vec()
    }

    #[getter]
    fn limits(&self) -> (Vec<f64>, Vec<f64>) {
        (
            self.inner.limits_lo().as_slice().to_vec(),
            self.inner.limits_hi().as_slice().to_vec(),
        )
    }

    #[staticmethod]
    fn joint_names() -> Vec<&'static str> {
        JOINT_NAMES.to_vec()
    }

    /// Stylus position and orientation quaternion `[w, x, y, z]` at `q`.
    fn stylus_pose(&self, q: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let pose = self.inner.stylus_pose(&joints(&q)?).map_err(err)?;
        let o = pose.orientation;
        Ok((pose.position.as_slice().to_vec(), vec![o.w, o.i, o.j, o.k]))
    }

    /// 6×10 geometric Jacobian, linear rows first.
    fn jacobian(&self, q: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        let j = self.inner.jacobian(&joints(&q)?).map_err(err)?;
        Ok((0..6).map(|r| j.row(r).iter().copied().collect()).collect())
    }

    fn within_limits(&self, q: Vec<f64>) -> PyResult<bool> {
        Ok(self.inner.within_limits(&joints(&q)?))
    }

    fn __repr__(&self) -> String {
        let l = &self.inner.lengths;
        format!(
            "HumanModel(torso={:.3}, shoulder={:.3}, upper_arm={:.3}, forearm={:.3}, hand={:.3})",
            l.torso_len, l.shoulder_offset, l.upper_arm_len, l.forearm_len, l.hand_len
        )
    }
}

fn model_or_default(model: Option<PyRef<'_, PyHumanModel>>) -> teleposture::HumanModel {
    model.map_or_else(teleposture::HumanModel::default_seated, |m| m.inner.clone())
}

/// Particle filter stepped one observation at a time.
#[pyclass(name = "ParticleFilter", unsendable)]
struct PyParticleFilter {
    inner: teleposture::ParticleFilter<'static>,
    validity: Box<dyn ValidityFn>,
}

fn filter_config(particles: usize, seed: u64, init: &str, validity: bool) -> PyResult<FilterConfig> {
    let init = match init {
        "neutral" => InitMode::Neutral,
        "uniform" => InitMode::Uniform,
        other => return Err(PyValueError::new_err(format!("unknown init {other:?}"))),
    };
    let d = FilterConfig::default();
    Ok(FilterConfig {
        m: particles,
        seed,
        init,
        validity_margin: if validity { d.validity_margin } else { None },
        ..d
    })
}

#[pymethods]
impl PyParticleFilter {
    #[new]
    #[pyo3(signature = (model=None, particles=500, seed=0, init="neutral", validity=true))]
    fn new(model: Option<PyRef<'_, PyHumanModel>>, particles: usize, seed: u64, init: &str, validity: bool) -> PyResult<Self> {
        let model = model_or_default(model);
        let cfg = filter_config(particles, seed, init, validity)?;
        let validity = validity_from_config(&model, &cfg);
        let inner = teleposture::ParticleFilter::owned(model, cfg).map_err(err)?;
        Ok(Self { inner, validity })
    }

    /// Processes one observation row and returns the posture estimate.
    fn step<'py>(&mut self, py: Python<'py>, row: Vec<f64>) -> PyResult<Bound<'py, PyAny>> {
        let obs = observations(&[row])?;
        let e = self.inner.step(&obs[0], &*self.validity).map_err(err)?;
        to_py(py, &e)
    }

    /// Particle joint angles and normalized weights.
    fn particles(&self) -> (Vec<Vec<f64>>, Vec<f64>) {
        let ps = self.inner.particles();
        (rows(&ps.states), ps.weights())
    }

    /// Expected RULA grand score and its spread under the current cloud.
    #[pyo3(signature = (load_kg=0.0, trunk_vertical=true))]
    fn rula<'py>(&self, py: Python<'py>, load_kg: f64, trunk_vertical: bool) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &score_distribution(self.inner.particles(), &assumptions(load_kg, trunk_vertical)))
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }
}

/// Runs the filter over a whole trajectory; one estimate dict per row.
#[pyfunction]
#[pyo3(signature = (observations_rows, model=None, particles=500, seed=0, init="neutral", validity=true))]
fn estimate<'py>(
    py: Python<'py>,
    observations_rows: Vec<Vec<f64>>,
    model: Option<PyRef<'_, PyHumanModel>>,
    particles: usize,
    seed: u64,
    init: &str,
    validity: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let model = model_or_default(model);
    let cfg = filter_config(particles, seed, init, validity)?;
    let obs = observations(&observations_rows)?;
    let v = validity_from_config(&model, &cfg);
    let est = teleposture::filter::run(&obs, &model, &cfg, &*v).map_err(err)?;
    to_py(py, &est)
}

/// Synthetic task: `times`, `truth` (joint angles), `truth_velocity` and
/// `observations` (rows).
#[pyfunction]
#[pyo3(signature = (task, duration=30.0, rate=50.0, sigma_pos=0.002, sigma_ori=0.01, noiseless=false, seed=0, model=None))]
#[allow(clippy::too_many_arguments)]
fn synthesize<'py>(
    py: Python<'py>,
    task: &str,
    duration: f64,
    rate: f64,
    sigma_pos: f64,
    sigma_ori: f64,
    noiseless: bool,
    seed: u64,
    model: Option<PyRef<'_, PyHumanModel>>,
) -> PyResult<Bound<'py, PyAny>> {
    let kind = TaskKind::from_name(task).ok_or_else(|| PyValueError::new_err(format!("unknown task {task:?}")))?;
    let noise = (!noiseless).then(|| benchmark_noise(sigma_pos, sigma_ori));
    let model = model_or_default(model);
    let run = synth::generate_task(&model, &SyntheticTask::new(kind, duration, rate, noise, seed)).map_err(err)?;
    #[derive(Serialize)]
    struct Out {
        times: Vec<f64>,
        truth: Vec<Vec<f64>>,
        truth_velocity: Vec<Vec<f64>>,
        observations: Vec<Vec<f64>>,
    }
    to_py(
        py,
        &Out {
            times: run.times,
            truth: rows(&run.truth),
            truth_velocity: run.truth.iter().map(|s| s.qdot.as_slice().to_vec()).collect(),
            observations: run.observations.iter().map(io::observation_row).collect(),
        },
    )
}

/// Least-squares IK baseline, `"online"` or `"offline"`; returns joint angles per row.
#[pyfunction]
#[pyo3(signature = (observations_rows, method="online", model=None))]
fn inverse_kinematics(
    observations_rows: Vec<Vec<f64>>,
    method: &str,
    model: Option<PyRef<'_, PyHumanModel>>,
) -> PyResult<Vec<Vec<f64>>> {
    let model = model_or_default(model);
    let obs = observations(&observations_rows)?;
    if obs.len() < 2 {
        return Err(PyValueError::new_err("need at least two observations"));
    }
    let mut dts: Vec<f64> = obs.windows(2).map(|w| w[1].t - w[0].t).collect();
    dts.sort_by(|a, b| a.total_cmp(b));
    let f = FilterConfig::default();
    let cfg = IkSettings::default().resolve(&f.obs_noise, &f.motion, dts[dts.len() / 2]).map_err(err)?;
    let online = online_ik(&obs, &model, &cfg).map_err(err)?;
    let states = match method {
        "online" => online.states,
        "offline" => offline_traj_ik(&obs, &model, &cfg, &online.states).map_err(err)?.states,
        other => return Err(PyValueError::new_err(format!("unknown method {other:?}"))),
    };
    Ok(rows(&states))
}

/// RULA worksheet evaluation of one posture.
#[pyfunction]
#[pyo3(signature = (q, load_kg=0.0, trunk_vertical=true))]
fn rula_score<'py>(py: Python<'py>, q: Vec<f64>, load_kg: f64, trunk_vertical: bool) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &score_posture(&joints(&q)?, &assumptions(load_kg, trunk_vertical)))
}

/// Segment lengths from the five calibration routines, given as
/// `{routine: [[x, y, z], ...]}`; samples are assumed 100 Hz.
#[pyfunction]
#[pyo3(signature = (recordings, model=None))]
fn calibrate<'py>(
    py: Python<'py>,
    recordings: std::collections::BTreeMap<String, Vec<[f64; 3]>>,
    model: Option<PyRef<'_, PyHumanModel>>,
) -> PyResult<Bound<'py, PyAny>> {
    let recs = recordings
        .iter()
        .map(|(name, pts)| {
            let routine = CalibrationRoutine::from_name(name)
                .ok_or_else(|| PyValueError::new_err(format!("unknown calibration routine {name:?}")))?;
            let samples = pts
                .iter()
                .enumerate()
                .map(|(k, p)| (k as f64 / synth::CALIBRATION_RATE, nalgebra::Vector3::from(*p)))
                .collect();
            Ok(CalibrationRecording { routine, samples })
        })
        .collect::<PyResult<Vec<_>>>()?;
    let model = model_or_default(model);
    let r = estimate_segment_lengths(&recs, &model, &CalibrationOptions::default()).map_err(err)?;
    to_py(py, &r.lengths)
}

/// Noiseless or noisy stylus positions for one calibration routine.
#[pyfunction]
#[pyo3(signature = (routine, noise=0.0, seed=0, model=None))]
fn calibration_arc(routine: &str, noise: f64, seed: u64, model: Option<PyRef<'_, PyHumanModel>>) -> PyResult<Vec<[f64; 3]>> {
    let r = CalibrationRoutine::from_name(routine)
        .ok_or_else(|| PyValueError::new_err(format!("unknown calibration routine {routine:?}")))?;
    let model = model_or_default(model);
    let rec = synth::generate_calibration(&model, r, synth::default_arc_deg(r), noise, seed).map_err(err)?;
    Ok(rec.samples.iter().map(|(_, p)| [p.x, p.y, p.z]).collect())
}

/// Per-joint deviation statistics and RULA agreement of two posture sequences.
#[pyfunction]
fn compare<'py>(py: Python<'py>, reference: Vec<Vec<f64>>, estimate: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyAny>> {
    let conv = |v: &[Vec<f64>]| v.iter().map(|q| joints(q)).collect::<PyResult<Vec<_>>>();
    let r = teleposture::compare::compare(&conv(&reference)?, &conv(&estimate)?, &RulaAssumptions::default()).map_err(err)?;
    to_py(py, &r)
}

#[pymodule]
fn teleposture_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyHumanModel>()?;
    m.add_class::<PyParticleFilter>()?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(inverse_kinematics, m)?)?;
    m.add_function(wrap_pyfunction!(rula_score, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(calibration_arc, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    Ok(())
}
