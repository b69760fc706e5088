//! Python bindings for the simulator core: scenarios, scene state,
//! forward physics, rendering, the closed optimization loop, checkpoints.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use vppsim::optimize::WindowScene;
use vppsim::pipeline;
use vppsim::render::{render, Layer};

fn err(e: vppsim::VppError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct Scenario {
    inner: vppsim::scenario::Scenario,
}

#[pymethods]
impl Scenario {
    /// Parse and validate a scenario from JSON text.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Scenario> {
        Ok(Scenario { inner: vppsim::scenario::parse_scenario(text).map_err(err)? })
    }

    #[staticmethod]
    fn from_file(path: &str) -> PyResult<Scenario> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PyValueError::new_err(format!("{path}: {e}")))?;
        Scenario::from_json(&text)
    }

    /// Normalized JSON with all defaults filled in.
    fn to_json(&self) -> String {
        vppsim::scenario::serialize_scenario(&self.inner)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn window_count(&self) -> usize {
        self.inner.windows.len()
    }

    fn camera_names(&self) -> Vec<String> {
        self.inner.cameras.iter().map(|c| c.name.clone()).collect()
    }

    fn build_state(&self) -> PyResult<SceneState> {
        Ok(SceneState { inner: self.inner.build_initial_state().map_err(err)? })
    }

    fn __repr__(&self) -> String {
        format!(
            "Scenario(name={:?}, objects={}, cameras={}, windows={})",
            self.inner.name,
            self.inner.objects.len(),
            self.inner.cameras.len(),
            self.inner.windows.len()
        )
    }
}

#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct SceneState {
    inner: vppsim::vpp::SceneState,
}

#[pymethods]
impl SceneState {
    #[getter]
    fn sim_time(&self) -> f64 {
        self.inner.sim_time
    }

    #[getter]
    fn object_count(&self) -> usize {
        self.inner.objects.len()
    }

    fn particle_count(&self) -> usize {
        self.inner.objects.iter().map(|o| o.particles.len()).sum()
    }

    fn gaussian_count(&self) -> usize {
        self.inner.objects.iter().map(|o| o.gaussians.len()).sum()
    }

    fn total_mass(&self) -> f64 {
        self.inner.total_mass()
    }

    /// Particle positions of one object as a flat [x0, y0, z0, x1, ...] list.
    fn particle_positions(&self, object: usize) -> PyResult<Vec<f64>> {
        let obj = self
            .inner
            .objects
            .get(object)
            .ok_or_else(|| PyValueError::new_err("object index out of range"))?;
        Ok(obj
            .particles
            .iter()
            .flat_map(|p| [p.position.x, p.position.y, p.position.z])
            .collect())
    }

    fn particle_velocities(&self, object: usize) -> PyResult<Vec<f64>> {
        let obj = self
            .inner
            .objects
            .get(object)
            .ok_or_else(|| PyValueError::new_err("object index out of range"))?;
        Ok(obj
            .particles
            .iter()
            .flat_map(|p| [p.velocity.x, p.velocity.y, p.velocity.z])
            .collect())
    }

    /// World-space splat centers of one object (offsets squashed into the
    /// particle's +-delta box).
    fn gaussian_positions(&self, object: usize) -> PyResult<Vec<f64>> {
        let obj = self
            .inner
            .objects
            .get(object)
            .ok_or_else(|| PyValueError::new_err("object index out of range"))?;
        let k = obj.gaussians_per_particle;
        let mut out = Vec::with_capacity(obj.gaussians.len() * 3);
        for j in 0..obj.particles.len() {
            for kk in 0..k {
                let mu = obj.gaussian_world_position(j, kk);
                out.extend_from_slice(&[mu.x, mu.y, mu.z]);
            }
        }
        Ok(out)
    }

    /// Binary checkpoint; round-trips bit-exactly.
    fn save(&self, path: &str) -> PyResult<()> {
        vppsim::checkpoint::save(std::path::Path::new(path), &self.inner).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<SceneState> {
        Ok(SceneState { inner: vppsim::checkpoint::load(std::path::Path::new(path)).map_err(err)? })
    }

    fn __repr__(&self) -> String {
        format!(
            "SceneState(t={:.4}, objects={}, particles={})",
            self.inner.sim_time,
            self.inner.objects.len(),
            self.particle_count()
        )
    }
}

#[pyclass]
struct Trajectory {
    inner: vppsim::physics::Trajectory,
}

#[pymethods]
impl Trajectory {
    #[getter]
    fn frame_count(&self) -> usize {
        self.inner.frame_count()
    }

    fn state(&self, index: usize) -> PyResult<SceneState> {
        self.inner
            .states
            .get(index)
            .map(|s| SceneState { inner: s.clone() })
            .ok_or_else(|| PyValueError::new_err("state index out of range"))
    }

    fn sim_times(&self) -> Vec<f64> {
        self.inner.states.iter().map(|s| s.sim_time).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.states.len()
    }
}

/// Forward physics over one action window of the scenario.
#[pyfunction]
fn forward_window(scenario: &Scenario, state: &SceneState, window: usize) -> PyResult<Trajectory> {
    let actions = scenario
        .inner
        .windows
        .get(window)
        .map(|w| w.actions.clone())
        .ok_or_else(|| PyValueError::new_err("window index out of range"))?;
    let traj = vppsim::physics::forward_window(&state.inner, &actions, &scenario.inner.sim)
        .map_err(err)?;
    Ok(Trajectory { inner: traj })
}

/// Render a state through a named scenario camera. Returns a dict with
/// width, height, rgb, alpha, flow, and mask buffers.
#[pyfunction]
fn render_frame<'py>(
    py: Python<'py>,
    scenario: &Scenario,
    state: &SceneState,
    camera: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let cam = scenario
        .inner
        .cameras
        .iter()
        .find(|c| c.name == camera)
        .ok_or_else(|| PyValueError::new_err(format!("unknown camera {camera:?}")))?
        .to_camera();
    let frame = render(&state.inner, None, &cam, Layer::Full, scenario.inner.background.clear_color);
    let d = PyDict::new(py);
    d.set_item("width", frame.width)?;
    d.set_item("height", frame.height)?;
    d.set_item("rgb", frame.rgb)?;
    d.set_item("alpha", frame.alpha)?;
    d.set_item("flow", frame.flow)?;
    d.set_item("mask", frame.mask)?;
    d.set_item("time", frame.time)?;
    Ok(d)
}

/// One full loop cycle: forward physics, refinement + progressive
/// optimization, loop closure. Returns (summary dict, closure state).
#[pyfunction]
fn run_window<'py>(
    py: Python<'py>,
    scenario: &Scenario,
    state: &SceneState,
    window: usize,
) -> PyResult<(Bound<'py, PyDict>, SceneState)> {
    let sc = &scenario.inner;
    if window >= sc.windows.len() {
        return Err(PyValueError::new_err("window index out of range"));
    }
    let refiner = sc.build_refiner("py").map_err(err)?;
    let cameras = sc.build_cameras();
    let optim = sc.optim_for_window(window);
    let actions = sc.windows[window].actions.clone();
    let res = pipeline::run_window(&state.inner, &actions, &cameras, &refiner, &sc.sim, &optim, window)
        .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("events", res.events)?;
    d.set_item(
        "loss_history",
        res.loss_history
            .iter()
            .map(|r| (r.stage, r.iteration, r.total, r.photometric, r.sim))
            .collect::<Vec<_>>(),
    )?;
    d.set_item(
        "timings",
        res.timings.iter().cloned().collect::<Vec<(String, f64)>>(),
    )?;
    d.set_item(
        "views",
        res.per_view_frames
            .iter()
            .map(|(name, frames)| (name.clone(), frames.len()))
            .collect::<Vec<_>>(),
    )?;
    Ok((d, SceneState { inner: res.closure_state }))
}

/// Re-express a world coordinate as a squashed offset about an anchor;
/// exact to the bit when the target is representable.
#[pyfunction]
fn reexpress_coord(anchor: f64, target: f64, delta: f64) -> PyResult<f64> {
    pipeline::reexpress_coord(anchor, target, delta).map_err(err)
}

/// Shift every temporal gate, as done between windows.
#[pyfunction]
fn rebase_temporal(state: &SceneState, shift: f64) -> SceneState {
    let mut s = state.inner.clone();
    pipeline::rebase_temporal(&mut s, shift);
    SceneState { inner: s }
}

/// Close the loop on a finished window trajectory.
#[pyfunction]
fn loop_closure(trajectory: &Trajectory) -> PyResult<SceneState> {
    let scene = WindowScene::new(trajectory.inner.clone());
    Ok(SceneState { inner: pipeline::loop_closure(&scene).map_err(err)? })
}

#[pyfunction]
fn squash(u: f64) -> f64 {
    vppsim::vpp::squash(u)
}

#[pyfunction]
fn temporal_opacity(t: f64, center: f64, duration: f64) -> PyResult<f64> {
    vppsim::vpp::temporal_opacity(t, center, duration).map_err(err)
}

#[pymodule]
fn vppsim_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Scenario>()?;
    m.add_class::<SceneState>()?;
    m.add_class::<Trajectory>()?;
    m.add_function(wrap_pyfunction!(forward_window, m)?)?;
    m.add_function(wrap_pyfunction!(render_frame, m)?)?;
    m.add_function(wrap_pyfunction!(run_window, m)?)?;
    m.add_function(wrap_pyfunction!(reexpress_coord, m)?)?;
    m.add_function(wrap_pyfunction!(rebase_temporal, m)?)?;
    m.add_function(wrap_pyfunction!(loop_closure, m)?)?;
    m.add_function(wrap_pyfunction!(squash, m)?)?;
    m.add_function(wrap_pyfunction!(temporal_opacity, m)?)?;
    Ok(())
}
