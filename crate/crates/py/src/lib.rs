//! Python bindings: poses, scenes, graphs, classical controllers, the neural
//! policy and benchmark suites.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use rand::SeedableRng;

use cns_core::bench::{self, BenchmarkConfig, Controller};
use cns_core::control::{self, ControlGain};
use cns_core::env::{Episode, SimConfig};
use cns_core::geometry::{self, CameraModel, Pose, Twist};
use cns_core::graph::{self, AffinityPropagationParams, ClusterAssignment, ServoGraph};
use cns_core::policy::{self, HiddenState, NormKind, PolicyConfig, PolicyOutput, PolicyParams};
use cns_core::scene::{self, KeypointMode, SceneConfig};
use cns_core::SimRng;

fn err(e: cns_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

type Kp = Vec<[f64; 2]>;

#[pyclass(name = "Pose", from_py_object)]
#[derive(Clone)]
struct PyPose(Pose);

#[pymethods]
impl PyPose {
    /// Camera-to-world pose from a row-major 3x3 rotation and a translation.
    #[new]
    fn new(rotation: [[f64; 3]; 3], translation: [f64; 3]) -> PyResult<Self> {
        let r = Matrix3::from_fn(|i, j| rotation[i][j]);
        let p = Pose::new(r, Vector3::from(translation));
        if !p.is_valid(1e-6) {
            return Err(PyValueError::new_err("rotation is not orthonormal"));
        }
        Ok(Self(p))
    }

    #[staticmethod]
    fn identity() -> Self {
        Self(Pose::identity())
    }

    #[getter]
    fn rotation(&self) -> [[f64; 3]; 3] {
        std::array::from_fn(|i| std::array::from_fn(|j| self.0.rotation[(i, j)]))
    }

    #[getter]
    fn translation(&self) -> [f64; 3] {
        self.0.translation.into()
    }

    fn compose(&self, other: &PyPose) -> Self {
        Self(self.0.compose(&other.0))
    }

    fn inverse(&self) -> Self {
        Self(self.0.inverse())
    }

    fn scaled(&self, k: f64) -> Self {
        Self(self.0.scaled(k))
    }

    fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        self.0.transform_point(&Vector3::from(p)).into()
    }

    /// Pose after applying a body-frame twist `[vx, vy, vz, wx, wy, wz]` for `dt` seconds.
    fn step(&self, twist: [f64; 6], dt: f64) -> PyResult<Self> {
        geometry::se3_step(&self.0, &Twist::from_array(twist), dt).map(Self).map_err(err)
    }

    fn __repr__(&self) -> String {
        let t = self.0.translation;
        format!("Pose(translation=[{:.4}, {:.4}, {:.4}])", t.x, t.y, t.z)
    }
}

/// Rotation error in degrees.
#[pyfunction]
fn rotation_error(a: &PyPose, b: &PyPose) -> f64 {
    geometry::rotation_error(&a.0, &b.0)
}

/// Translation error in millimeters.
#[pyfunction]
fn translation_error(a: &PyPose, b: &PyPose) -> f64 {
    geometry::translation_error(&a.0, &b.0)
}

/// Normalized keypoints and in-image flags with the default 640x480 camera.
#[pyfunction]
fn project(pose: &PyPose, points: Vec<[f64; 3]>) -> (Kp, Vec<bool>) {
    let pts: Vec<Vector3<f64>> = points.into_iter().map(Vector3::from).collect();
    geometry::project(&CameraModel::default(), &pose.0, &pts)
}

/// Random scene `(points, cluster_id)`; cluster 0 holds the uniform residual.
#[pyfunction]
#[pyo3(signature = (seed, n_min=4, n_max=512, clustered=true))]
fn sample_scene(seed: u64, n_min: usize, n_max: usize, clustered: bool) -> PyResult<(Vec<[f64; 3]>, Vec<usize>)> {
    let cfg = SceneConfig {
        n_points_range: [n_min, n_max],
        ..Default::default()
    };
    cfg.validate().map_err(err)?;
    let mode = if clustered { KeypointMode::Clustered } else { KeypointMode::Uniform };
    let mut rng = SimRng::seed_from_u64(seed);
    let s = scene::sample_scene(&cfg, mode, &mut rng).map_err(err)?;
    Ok((s.points.iter().map(|p| [p.x, p.y, p.z]).collect(), s.cluster_id))
}

/// Affinity Propagation groups of desired keypoints.
#[pyfunction]
fn cluster_keypoints(keypoints: Kp) -> PyResult<Vec<Vec<usize>>> {
    graph::cluster_desired(&keypoints, &AffinityPropagationParams::default())
        .map(|c| c.groups)
        .map_err(err)
}

fn servo_graph(desired: Kp, current: Kp, visible: Vec<bool>, groups: Vec<Vec<usize>>) -> PyResult<ServoGraph> {
    let n = desired.len();
    if current.len() != n || visible.len() != n {
        return Err(PyValueError::new_err("desired, current and visible must have equal length"));
    }
    let clusters = ClusterAssignment::from_groups(groups, &desired).map_err(err)?;
    Ok(ServoGraph::new(desired, current, visible, clusters))
}

/// The four edge matrices `(E0*, E1*, E0t, E1t)` as 0/1 rows.
#[pyfunction]
fn edge_matrices(
    desired: Kp,
    current: Kp,
    visible: Vec<bool>,
    groups: Vec<Vec<usize>>,
) -> PyResult<[Vec<Vec<u8>>; 4]> {
    let g = servo_graph(desired, current, visible, groups)?;
    Ok([g.e0_star.to_rows(), g.e1_star.to_rows(), g.e0_t.to_rows(), g.e1_t.to_rows()])
}

#[pyfunction]
#[pyo3(signature = (current, desired, gain=1.0))]
fn pbvs(current: &PyPose, desired: &PyPose, gain: f64) -> PyResult<[f64; 6]> {
    let g = ControlGain::new(gain).map_err(err)?;
    Ok(control::pbvs(&current.0, &desired.0, g).to_array())
}

#[pyfunction]
#[pyo3(signature = (current, desired, visible, depths, gain=1.0))]
fn ibvs(current: Kp, desired: Kp, visible: Vec<bool>, depths: Vec<f64>, gain: f64) -> PyResult<[f64; 6]> {
    let g = ControlGain::new(gain).map_err(err)?;
    control::ibvs(&current, &desired, &visible, &depths, g)
        .map(|t| t.to_array())
        .map_err(err)
}

#[pyfunction]
#[pyo3(signature = (history, threshold=control::STOP_THRESHOLD, patience=control::STOP_PATIENCE))]
fn stopping_criterion(history: Vec<f64>, threshold: f64, patience: usize) -> bool {
    control::stopping_criterion(&history, threshold, patience)
}

/// `(percent, ci_low, ci_high)` with a 95% Wald interval.
#[pyfunction]
fn success_ratio(successes: usize, n: usize) -> PyResult<(f64, f64, f64)> {
    let r = bench::success_ratio(successes, n).map_err(err)?;
    Ok((r.percent, r.ci_low, r.ci_high))
}

/// Twist from a policy output and a distance prior in meters.
#[pyfunction]
fn decode_velocity(v_dir: [f64; 6], l_pred: f64, distance: f64) -> PyResult<[f64; 6]> {
    policy::decode_velocity(&PolicyOutput { v_dir, l_pred }, distance)
        .map(|t| t.to_array())
        .map_err(err)
}

/// Recurrent graph policy with its hidden state.
#[pyclass(name = "Policy")]
struct PyPolicy {
    params: PolicyParams,
    hidden: Option<HiddenState>,
}

#[pymethods]
impl PyPolicy {
    /// Randomly initialized policy.
    #[new]
    #[pyo3(signature = (hidden=64, seed=0, graph_norm=false))]
    fn new(hidden: usize, seed: u64, graph_norm: bool) -> PyResult<Self> {
        let cfg = PolicyConfig {
            hidden,
            norm: if graph_norm { NormKind::Graph } else { NormKind::Layer },
        };
        let mut rng = SimRng::seed_from_u64(seed);
        let params = PolicyParams::init(cfg, &mut rng).map_err(err)?;
        Ok(Self { params, hidden: None })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (params, _) = PolicyParams::load_file(Path::new(path)).map_err(err)?;
        Ok(Self { params, hidden: None })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.params.save(Path::new(path), &[]).map_err(err)
    }

    #[getter]
    fn hidden_size(&self) -> usize {
        self.params.hidden()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Clears the recurrent state.
    fn reset(&mut self) {
        self.hidden = None;
    }

    /// One control step. Returns `(v_dir, l_pred)`; the state resets when the
    /// number of clusters changes.
    fn step(&mut self, desired: Kp, current: Kp, visible: Vec<bool>, groups: Vec<Vec<usize>>) -> PyResult<([f64; 6], f64)> {
        let g = servo_graph(desired, current, visible, groups)?;
        let nc = g.clusters.num_clusters();
        let h = match self.hidden.take() {
            Some(h) if h.0.rows() == nc => h,
            _ => HiddenState::zeros(nc, self.params.hidden()),
        };
        let (out, h) = policy::policy_forward(&g, &h, &self.params).map_err(err)?;
        self.hidden = Some(h);
        Ok((out.v_dir, out.l_pred))
    }
}

/// One simulated episode.
#[pyclass(name = "Episode")]
struct PyEpisode(Episode);

#[pymethods]
impl PyEpisode {
    /// `config` is a JSON simulation config; omitted fields take defaults.
    #[new]
    #[pyo3(signature = (seed, config=None))]
    fn new(seed: u64, config: Option<&str>) -> PyResult<Self> {
        let cfg: SimConfig = match config {
            Some(text) => bench::parse_json(text).map_err(err)?,
            None => SimConfig::default(),
        };
        cfg.validate().map_err(err)?;
        Episode::new(seed, &cfg).map(Self).map_err(err)
    }

    /// `(desired_kp, current_kp, visible, groups)`; invisible current entries are NaN.
    fn observe(&mut self) -> (Kp, Kp, Vec<bool>, Vec<Vec<usize>>) {
        let g = self.0.observe();
        (g.desired_kp, g.current_kp, g.visible, g.clusters.groups)
    }

    fn advance(&mut self, twist: [f64; 6]) -> PyResult<()> {
        self.0.advance(&Twist::from_array(twist)).map_err(err)
    }

    #[getter]
    fn current(&self) -> PyPose {
        PyPose(self.0.current)
    }

    #[getter]
    fn desired(&self) -> PyPose {
        PyPose(self.0.desired)
    }

    #[getter]
    fn step_count(&self) -> usize {
        self.0.step
    }

    /// Distance from the desired camera to the scene center.
    #[getter]
    fn d_gt(&self) -> f64 {
        self.0.d_gt
    }

    fn rotation_error(&self) -> f64 {
        self.0.rotation_error()
    }

    fn translation_error(&self) -> f64 {
        self.0.translation_error()
    }
}

/// Runs a suite and returns its summary as a JSON string.
#[pyfunction]
#[pyo3(signature = (config, controller, checkpoint=None))]
fn run_suite(py: Python<'_>, config: &str, controller: &str, checkpoint: Option<&str>) -> PyResult<String> {
    let cfg = BenchmarkConfig::from_json(config).map_err(err)?;
    let controller = match controller {
        "cns" => Controller::Cns,
        "pbvs" => Controller::Pbvs,
        "ibvs" => Controller::Ibvs,
        other => return Err(PyValueError::new_err(format!("unknown controller `{other}`"))),
    };
    let params = checkpoint
        .map(|p| PolicyParams::load_file(Path::new(p)).map(|x| x.0))
        .transpose()
        .map_err(err)?;
    let summary = py
        .detach(|| {
            let records = bench::run_suite(&cfg, controller, params.as_ref())?;
            bench::aggregate(&records)
        })
        .map_err(err)?;
    serde_json::to_string(&summary).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn cns_servo(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPose>()?;
    m.add_class::<PyPolicy>()?;
    m.add_class::<PyEpisode>()?;
    m.add_function(wrap_pyfunction!(rotation_error, m)?)?;
    m.add_function(wrap_pyfunction!(translation_error, m)?)?;
    m.add_function(wrap_pyfunction!(project, m)?)?;
    m.add_function(wrap_pyfunction!(sample_scene, m)?)?;
    m.add_function(wrap_pyfunction!(cluster_keypoints, m)?)?;
    m.add_function(wrap_pyfunction!(edge_matrices, m)?)?;
    m.add_function(wrap_pyfunction!(pbvs, m)?)?;
    m.add_function(wrap_pyfunction!(ibvs, m)?)?;
    m.add_function(wrap_pyfunction!(stopping_criterion, m)?)?;
    m.add_function(wrap_pyfunction!(success_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(decode_velocity, m)?)?;
    m.add_function(wrap_pyfunction!(run_suite, m)?)?;
    Ok(())
}
