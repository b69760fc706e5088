//! Scenario files: strict JSON describing the scene, cameras, action windows
//! and refiner, plus the builders that turn one into runnable state.

use crate::math::{vec3, Quat};
use crate::optimize::{GradientMode, LearningRates, OptimConfig, ViewRole};
use crate::physics::{Action, SimConfig};
use crate::refiner::{make_oracle, ExternalRefiner, Perturbation, Refiner};
use crate::render::Camera;
use crate::vpp::{
    build_vpp, sample_particles_from_shape, BackgroundGaussian, MaterialKind, MaterialParams,
    SceneState, Shape,
};
use crate::{Result, VppError};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Duration;

fn semantic(path: impl Into<String>, detail: impl Into<String>) -> VppError {
    VppError::Scenario { path: path.into(), detail: detail.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaterialOverrides {
    pub youngs_modulus: Option<f64>,
    pub poisson_ratio: Option<f64>,
    pub friction_angle: Option<f64>,
    pub friction_coefficient: Option<f64>,
    pub stretch_compliance: Option<f64>,
    pub bending_compliance: Option<f64>,
    pub viscosity: Option<f64>,
    pub density: Option<f64>,
}

impl MaterialOverrides {
    pub fn apply(&self, base: &mut MaterialParams) {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { base.$f = v; })* };
        }
        set!(
            youngs_modulus,
            poisson_ratio,
            friction_angle,
            friction_coefficient,
            stretch_compliance,
            bending_compliance,
            viscosity,
            density
        );
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimOverrides {
    pub lambda_sim: Option<f64>,
    pub l1_weight: Option<f64>,
    pub ssim_weight: Option<f64>,
    pub ssim_window: Option<usize>,
    pub learning_rates: Option<LearningRates>,
    pub iterations_per_stage: Option<usize>,
    pub gradient_mode: Option<GradientMode>,
    pub seed: Option<u64>,
    pub w_front: Option<f64>,
    pub w_side: Option<f64>,
}

impl OptimOverrides {
    pub fn apply(&self, base: &mut OptimConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f.clone() { base.$f = v; })* };
        }
        set!(
            lambda_sim,
            l1_weight,
            ssim_weight,
            ssim_window,
            learning_rates,
            iterations_per_stage,
            gradient_mode,
            seed,
            w_front,
            w_side
        );
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub material: MaterialKind,
    #[serde(default)]
    pub params: MaterialOverrides,
    pub base_color: [f64; 3],
    /// particle indices held fixed (cloth pinning etc.)
    #[serde(default)]
    pub pinned: Vec<usize>,
    #[serde(default)]
    pub velocity: [f64; 3],
    /// override the default spatial opacity of the object's splats
    #[serde(default)]
    pub splat_opacity: Option<f64>,
    /// override the material-rule splat scale, in meters
    #[serde(default)]
    pub splat_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundSplatSpec {
    pub position: [f64; 3],
    pub color: [f64; 3],
    #[serde(default = "default_opacity")]
    pub opacity: f64,
    pub scale: f64,
}

fn default_opacity() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackgroundSpec {
    pub clear_color: [f64; 3],
    pub splats: Vec<BackgroundSplatSpec>,
}

impl Default for BackgroundSpec {
    fn default() -> Self {
        BackgroundSpec { clear_color: [0.0; 3], splats: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub name: String,
    pub role: ViewRole,
    pub eye: [f64; 3],
    pub target: [f64; 3],
    #[serde(default = "default_up")]
    pub up: [f64; 3],
    #[serde(default = "default_focal")]
    pub fx: f64,
    #[serde(default = "default_focal")]
    pub fy: f64,
    #[serde(default = "default_res")]
    pub width: usize,
    #[serde(default = "default_res")]
    pub height: usize,
    #[serde(default = "default_near")]
    pub near: f64,
}

fn default_up() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}
fn default_focal() -> f64 {
    160.0
}
fn default_res() -> usize {
    128
}
fn default_near() -> f64 {
    0.01
}

impl CameraSpec {
    pub fn to_camera(&self) -> Camera {
        let eye = vec3(self.eye[0], self.eye[1], self.eye[2]);
        let target = vec3(self.target[0], self.target[1], self.target[2]);
        let up = vec3(self.up[0], self.up[1], self.up[2]);
        let (rotation, translation) = Camera::look_at(eye, target, up);
        Camera {
            fx: self.fx,
            fy: self.fy,
            cx: self.width as f64 / 2.0,
            cy: self.height as f64 / 2.0,
            rotation,
            translation,
            width: self.width,
            height: self.height,
            near: self.near,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSpec {
    pub actions: Vec<Action>,
    pub optim: OptimOverrides,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RefinerSpec {
    Identity,
    Oracle {
        perturbation: Perturbation,
    },
    External {
        exchange_root: PathBuf,
        #[serde(default = "default_poll_ms")]
        poll_ms: u64,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: u64,
    },
}

fn default_poll_ms() -> u64 {
    250
}
fn default_timeout_secs() -> u64 {
    600
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub optim: OptimOverrides,
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub background: BackgroundSpec,
    pub cameras: Vec<CameraSpec>,
    pub windows: Vec<WindowSpec>,
    #[serde(default = "default_refiner")]
    pub refiner: RefinerSpec,
}

fn default_refiner() -> RefinerSpec {
    RefinerSpec::Identity
}

fn check_unit_rgb(path: &str, c: &[f64; 3]) -> Result<()> {
    if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(semantic(path, "color components must lie in [0, 1]"));
    }
    Ok(())
}

impl Scenario {
    /// Semantic checks beyond the strict parse; errors carry the JSON path of
    /// the offending field.
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(semantic("/name", "name must be non-empty"));
        }
        self.sim
            .validate()
            .map_err(|e| semantic("/sim", e.to_string()))?;
        if self.windows.is_empty() {
            return Err(semantic("/windows", "at least one window is required"));
        }
        if self.cameras.is_empty() {
            return Err(semantic("/cameras", "at least one camera is required"));
        }
        let frontal = self
            .cameras
            .iter()
            .filter(|c| c.role == ViewRole::Frontal)
            .count();
        if frontal != 1 {
            return Err(semantic("/cameras", format!("exactly one frontal camera required, found {frontal}")));
        }
        let mut names = std::collections::HashSet::new();
        for (i, cam) in self.cameras.iter().enumerate() {
            if !names.insert(cam.name.clone()) {
                return Err(semantic(format!("/cameras/{i}/name"), "duplicate camera name"));
            }
            let eye = vec3(cam.eye[0], cam.eye[1], cam.eye[2]);
            let target = vec3(cam.target[0], cam.target[1], cam.target[2]);
            if (target - eye).norm() < 1e-9 {
                return Err(semantic(format!("/cameras/{i}/target"), "camera target coincides with eye"));
            }
            cam.to_camera()
                .validate()
                .map_err(|e| semantic(format!("/cameras/{i}"), e.to_string()))?;
        }
        for (i, obj) in self.objects.iter().enumerate() {
            check_unit_rgb(&format!("/objects/{i}/base_color"), &obj.base_color)?;
            if let Some(o) = obj.splat_opacity {
                if !(0.0..=1.0).contains(&o) {
                    return Err(semantic(format!("/objects/{i}/splat_opacity"), "must lie in [0, 1]"));
                }
            }
            if let Some(sc) = obj.splat_scale {
                if sc <= 0.0 {
                    return Err(semantic(format!("/objects/{i}/splat_scale"), "must be > 0"));
                }
            }
            let mut p = MaterialParams::defaults_for(obj.material);
            obj.params.apply(&mut p);
            let path = format!("/objects/{i}/params");
            if p.youngs_modulus <= 0.0 {
                return Err(semantic(format!("{path}/youngs_modulus"), "must be > 0"));
            }
            if !(0.0..0.5).contains(&p.poisson_ratio) {
                return Err(semantic(format!("{path}/poisson_ratio"), "must lie in [0, 0.5)"));
            }
            if !(0.0..=90.0).contains(&p.friction_angle) {
                return Err(semantic(format!("{path}/friction_angle"), "must lie in [0, 90] degrees"));
            }
            if p.friction_coefficient < 0.0 {
                return Err(semantic(format!("{path}/friction_coefficient"), "must be >= 0"));
            }
            if p.stretch_compliance < 0.0 || p.bending_compliance < 0.0 {
                return Err(semantic(path, "compliances must be >= 0"));
            }
            if p.viscosity < 0.0 {
                return Err(semantic(format!("{path}/viscosity"), "must be >= 0"));
            }
            if p.density <= 0.0 {
                return Err(semantic(format!("{path}/density"), "must be > 0"));
            }
        }
        for (i, b) in self.background.splats.iter().enumerate() {
            let path = format!("/background/splats/{i}");
            check_unit_rgb(&format!("{path}/color"), &b.color)?;
            if !(0.0..=1.0).contains(&b.opacity) {
                return Err(semantic(format!("{path}/opacity"), "must lie in [0, 1]"));
            }
            if b.scale <= 0.0 {
                return Err(semantic(format!("{path}/scale"), "must be > 0"));
            }
        }
        check_unit_rgb("/background/clear_color", &self.background.clear_color)?;
        if let RefinerSpec::Oracle { perturbation } = &self.refiner {
            let object = match perturbation {
                Perturbation::ColorShift { object, .. } => *object,
                Perturbation::OffsetShift { object, .. } => *object,
                Perturbation::TrajectoryNudge { object, .. } => *object,
            };
            if object >= self.objects.len() {
                return Err(semantic(
                    "/refiner/perturbation/object",
                    format!("object {object} out of range ({} objects)", self.objects.len()),
                ));
            }
        }
        // action validity needs built objects; checked again at build time, but
        // the cheap index checks run here so `validate` catches them alone
        let built = self.build_initial_state()?;
        for (wi, w) in self.windows.iter().enumerate() {
            for (ai, a) in w.actions.iter().enumerate() {
                a.validate(&built.objects)
                    .map_err(|e| semantic(format!("/windows/{wi}/actions/{ai}"), e.to_string()))?;
            }
            let cfg = self.optim_for_window(wi);
            cfg.validate()
                .map_err(|e| semantic(format!("/windows/{wi}/optim"), e.to_string()))?;
        }
        Ok(())
    }

    pub fn optim_for_window(&self, window: usize) -> OptimConfig {
        let mut cfg = OptimConfig::default();
        cfg.seed = self.seed;
        cfg.clear_color = self.background.clear_color;
        self.optim.apply(&mut cfg);
        if let Some(w) = self.windows.get(window) {
            w.optim.apply(&mut cfg);
        }
        cfg
    }

    /// Initial scene: lattice-sampled objects plus the static background field.
    pub fn build_initial_state(&self) -> Result<SceneState> {
        let window_len = self.sim.window_duration();
        let mut objects = Vec::with_capacity(self.objects.len());
        for (i, spec) in self.objects.iter().enumerate() {
            let particles = sample_particles_from_shape(&spec.shape, self.sim.particle_size)
                .map_err(|e| semantic(format!("/objects/{i}/shape"), e.to_string()))?;
            let mut params = MaterialParams::defaults_for(spec.material);
            spec.params.apply(&mut params);
            let mut obj = build_vpp(
                &particles,
                spec.material,
                params,
                self.sim.particle_size,
                self.seed.wrapping_add(i as u64),
                spec.base_color,
                0.0,
                window_len,
            )
            .map_err(|e| semantic(format!("/objects/{i}"), e.to_string()))?;
            if spec.material == MaterialKind::Cloth {
                // cloth lattices are x-fastest planes
                let plane = match &spec.shape {
                    Shape::Plane { size, .. } => size,
                    _ => return Err(semantic(format!("/objects/{i}/shape"), "cloth objects need a plane shape")),
                };
                let nx = ((plane[0] / self.sim.particle_size) + 1e-9).floor() as usize;
                let ny = particles.len() / nx.max(1);
                obj.grid_dims = Some((nx, ny));
            }
            for &pin in &spec.pinned {
                if pin >= obj.particles.len() {
                    return Err(semantic(
                        format!("/objects/{i}/pinned"),
                        format!("index {pin} out of range ({} particles)", obj.particles.len()),
                    ));
                }
                obj.pinned[pin] = true;
            }
            for g in &mut obj.gaussians {
                if let Some(o) = spec.splat_opacity {
                    g.spatial_opacity = o;
                }
                if let Some(sc) = spec.splat_scale {
                    g.scale = sc;
                }
            }
            let v = vec3(spec.velocity[0], spec.velocity[1], spec.velocity[2]);
            for p in &mut obj.particles {
                p.velocity = v;
            }
            objects.push(obj);
        }
        let background = self
            .background
            .splats
            .iter()
            .map(|s| BackgroundGaussian {
                position: vec3(s.position[0], s.position[1], s.position[2]),
                spatial_opacity: s.opacity,
                temporal_center: window_len / 2.0,
                temporal_duration: 1e3, // effectively always-on
                rotation: Quat::IDENTITY,
                color: s.color,
                scale: s.scale,
            })
            .collect();
        Ok(SceneState { background, objects, sim_time: 0.0 })
    }

    pub fn build_cameras(&self) -> Vec<(String, ViewRole, Camera)> {
        self.cameras
            .iter()
            .map(|c| (c.name.clone(), c.role, c.to_camera()))
            .collect()
    }

    pub fn actions_per_window(&self) -> Vec<Vec<Action>> {
        self.windows.iter().map(|w| w.actions.clone()).collect()
    }

    /// Instantiate the refiner; `run_id` names the exchange directory for the
    /// external kind.
    pub fn build_refiner(&self, run_id: &str) -> Result<Refiner> {
        match &self.refiner {
            RefinerSpec::Identity => Ok(Refiner::Identity),
            RefinerSpec::Oracle { perturbation } => {
                let initial = self.build_initial_state()?;
                let cameras: HashMap<String, Camera> = self
                    .cameras
                    .iter()
                    .map(|c| (c.name.clone(), c.to_camera()))
                    .collect();
                let oracle = make_oracle(
                    &initial,
                    perturbation,
                    &self.sim,
                    self.actions_per_window(),
                    cameras,
                    self.background.clear_color,
                )?;
                Ok(Refiner::Oracle(oracle))
            }
            RefinerSpec::External { exchange_root, poll_ms, timeout_secs } => {
                let mut r = ExternalRefiner::new(exchange_root.clone(), run_id.to_string());
                r.poll_interval = Duration::from_millis(*poll_ms);
                r.timeout = Duration::from_secs(*timeout_secs);
                Ok(Refiner::External(r))
            }
        }
    }
}

/// Strict parse: unknown keys are syntax-level failures (with line/column from
/// the JSON reader); semantic checks run afterwards and report JSON paths.
pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let scenario: Scenario = serde_json::from_str(text).map_err(|e| VppError::Scenario {
        path: format!("line {}, column {}", e.line(), e.column()),
        detail: e.to_string(),
    })?;
    scenario.validate()?;
    Ok(scenario)
}

/// Normalized (defaults filled) serialization; `parse ∘ serialize` is a fixed
/// point on its output.
pub fn serialize_scenario(s: &Scenario) -> String {
    serde_json::to_string_pretty(s).expect("scenario serialization cannot fail")
}
