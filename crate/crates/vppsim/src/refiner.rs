//! Pluggable refinement boundary: coarse RGB+flow videos in, refined RGB out.
//!
//! Three implementations: identity (pass-through), a synthetic oracle that
//! renders a hidden perturbed copy of the scene, and an external-process
//! adapter speaking a filesystem exchange protocol.

use crate::math::vec3;
use crate::physics::{forward_window, Action, SimConfig};
use crate::render::{imageio, render, Camera, Layer};
use crate::vpp::SceneState;
use crate::{Result, VppError};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefineRequest {
    pub view_id: String,
    pub window_index: usize,
    pub control_weight: f64,
    pub prompt: String,
    pub width: usize,
    pub height: usize,
    /// one H*W*3 buffer per frame
    pub coarse_rgb: Vec<Vec<f64>>,
    /// one H*W*2 buffer per frame
    pub coarse_flow: Vec<Vec<f64>>,
}

impl RefineRequest {
    pub fn validate(&self) -> Result<()> {
        if self.coarse_rgb.len() != self.coarse_flow.len() {
            return Err(VppError::invalid("rgb and flow frame lists must have equal length"));
        }
        if !(0.0..=1.0).contains(&self.control_weight) {
            return Err(VppError::invalid("control_weight must lie in [0,1]"));
        }
        for f in &self.coarse_rgb {
            if f.len() != self.width * self.height * 3 {
                return Err(VppError::invalid("rgb frame size does not match resolution"));
            }
        }
        for f in &self.coarse_flow {
            if f.len() != self.width * self.height * 2 {
                return Err(VppError::invalid("flow frame size does not match resolution"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefinerKind {
    Identity,
    Oracle,
    External,
}

/// Perturbation families the oracle can hide; every recovery test has a
/// known ground truth inside the representable set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Perturbation {
    ColorShift { object: usize, delta: [f64; 3] },
    OffsetShift { object: usize, magnitude: f64, seed: u64 },
    TrajectoryNudge { object: usize, velocity_delta: [f64; 3] },
}

pub enum Refiner {
    Identity,
    Oracle(OracleRefiner),
    External(ExternalRefiner),
}

impl Refiner {
    pub fn kind(&self) -> RefinerKind {
        match self {
            Refiner::Identity => RefinerKind::Identity,
            Refiner::Oracle(_) => RefinerKind::Oracle,
            Refiner::External(_) => RefinerKind::External,
        }
    }

    pub fn refine(&self, request: &RefineRequest) -> Result<Vec<Vec<f64>>> {
        request.validate()?;
        match self {
            Refiner::Identity => Ok(request.coarse_rgb.clone()),
            Refiner::Oracle(o) => o.refine(request),
            Refiner::External(e) => e.refine(request),
        }
    }
}

/// Renders a hidden ground-truth scene variant on the caller's camera and
/// timebase, then blends: w·oracle + (1−w)·coarse, pixel-wise.
pub struct OracleRefiner {
    hidden_initial: SceneState,
    config: SimConfig,
    actions_per_window: Vec<Vec<Action>>,
    cameras: HashMap<String, Camera>,
    clear_color: [f64; 3],
    // start states per window so repeated windows don't re-simulate history
    window_cache: Mutex<HashMap<usize, SceneState>>,
}

/// Build the hidden scene by perturbing a copy of the run's initial scene.
pub fn make_oracle(
    initial: &SceneState,
    perturbation: &Perturbation,
    config: &SimConfig,
    actions_per_window: Vec<Vec<Action>>,
    cameras: HashMap<String, Camera>,
    clear_color: [f64; 3],
) -> Result<OracleRefiner> {
    let mut hidden = initial.clone();
    apply_perturbation(&mut hidden, perturbation)?;
    Ok(OracleRefiner {
        hidden_initial: hidden,
        config: config.clone(),
        actions_per_window,
        cameras,
        clear_color,
        window_cache: Mutex::new(HashMap::new()),
    })
}

pub fn apply_perturbation(scene: &mut SceneState, perturbation: &Perturbation) -> Result<()> {
    let obj_index = match perturbation {
        Perturbation::ColorShift { object, .. }
        | Perturbation::OffsetShift { object, .. }
        | Perturbation::TrajectoryNudge { object, .. } => *object,
    };
    let obj = scene
        .objects
        .get_mut(obj_index)
        .ok_or_else(|| VppError::invalid("perturbation object index out of range"))?;
    match perturbation {
        Perturbation::ColorShift { delta, .. } => {
            for g in &mut obj.gaussians {
                for c in 0..3 {
                    g.color[c] = (g.color[c] + delta[c]).clamp(0.0, 1.0);
                }
            }
        }
        Perturbation::OffsetShift { magnitude, seed, .. } => {
            // draw world-space offsets and re-express through atanh; they
            // must stay strictly inside the delta bound
            if *magnitude >= obj.particle_size {
                return Err(VppError::invalid(
                    "offset shift magnitude must stay strictly below the particle size",
                ));
            }
            use rand::Rng;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(*seed);
            for g in &mut obj.gaussians {
                let w = vec3(
                    rng.gen_range(-magnitude..=*magnitude),
                    rng.gen_range(-magnitude..=*magnitude),
                    rng.gen_range(-magnitude..=*magnitude),
                );
                let frac = w / obj.particle_size;
                if frac.norm_inf() >= 1.0 {
                    return Err(VppError::invalid("offset shift violates the tanh bound"));
                }
                g.raw_offset = frac.map(f64::atanh);
            }
        }
        Perturbation::TrajectoryNudge { velocity_delta, .. } => {
            let dv = vec3(velocity_delta[0], velocity_delta[1], velocity_delta[2]);
            for p in &mut obj.particles {
                p.velocity += dv;
            }
        }
    }
    Ok(())
}

impl OracleRefiner {
    fn window_start(&self, window_index: usize) -> Result<SceneState> {
        if window_index == 0 {
            return Ok(self.hidden_initial.clone());
        }
        if let Some(s) = self.window_cache.lock().unwrap().get(&window_index) {
            return Ok(s.clone());
        }
        let prev = self.window_start(window_index - 1)?;
        let actions = self
            .actions_per_window
            .get(window_index - 1)
            .cloned()
            .unwrap_or_default();
        let traj = forward_window(&prev, &actions, &self.config)?;
        let end = traj.states.last().unwrap().clone();
        self.window_cache
            .lock()
            .unwrap()
            .insert(window_index, end.clone());
        Ok(end)
    }

    fn refine(&self, request: &RefineRequest) -> Result<Vec<Vec<f64>>> {
        let camera = self.cameras.get(&request.view_id).ok_or_else(|| {
            VppError::RefinerUnavailable {
                context: format!("oracle view {}", request.view_id),
                detail: "unknown view id".into(),
            }
        })?;
        if camera.width != request.width || camera.height != request.height {
            return Err(VppError::invalid("oracle camera resolution mismatch"));
        }
        let start = self.window_start(request.window_index)?;
        let actions = self
            .actions_per_window
            .get(request.window_index)
            .cloned()
            .unwrap_or_default();
        let traj = forward_window(&start, &actions, &self.config)?;
        let w = request.control_weight;
        let mut out = Vec::with_capacity(request.coarse_rgb.len());
        for (f, coarse) in request.coarse_rgb.iter().enumerate() {
            if f >= traj.frame_count() {
                return Err(VppError::invalid("more coarse frames than the oracle timebase"));
            }
            let oracle = render(
                &traj.states[f + 1],
                traj.states.get(f + 2),
                camera,
                Layer::Full,
                self.clear_color,
            );
            let blended: Vec<f64> = oracle
                .rgb
                .iter()
                .zip(coarse)
                .map(|(&o, &c)| w * o + (1.0 - w) * c)
                .collect();
            out.push(blended);
        }
        Ok(out)
    }
}

/// Filesystem exchange with an out-of-process refiner.
///
/// Layout: `exchange/<run>/<window>/<view>/` with `request.json`,
/// `rgb_%04d.ppm`, `flow_%04d.flo-raw`; the external process writes
/// `refined_%04d.ppm` and a `done` marker.
pub struct ExternalRefiner {
    pub exchange_root: PathBuf,
    pub run_id: String,
    pub poll_interval: Duration,
    pub timeout: Duration,
}

impl ExternalRefiner {
    pub fn new(exchange_root: PathBuf, run_id: String) -> ExternalRefiner {
        ExternalRefiner {
            exchange_root,
            run_id,
            poll_interval: Duration::from_millis(250),
            timeout: Duration::from_secs(600),
        }
    }

    pub fn exchange_dir(&self, window_index: usize, view_id: &str) -> PathBuf {
        self.exchange_root
            .join(&self.run_id)
            .join(window_index.to_string())
            .join(view_id)
    }

    fn refine(&self, request: &RefineRequest) -> Result<Vec<Vec<f64>>> {
        let ctx = format!("external refiner window {} view {}", request.window_index, request.view_id);
        let unavailable = |detail: String| VppError::RefinerUnavailable {
            context: ctx.clone(),
            detail,
        };
        let dir = self.exchange_dir(request.window_index, &request.view_id);
        std::fs::create_dir_all(&dir).map_err(|e| unavailable(e.to_string()))?;

        let manifest = serde_json::json!({
            "view_id": request.view_id,
            "control_weight": request.control_weight,
            "frame_count": request.coarse_rgb.len(),
            "width": request.width,
            "height": request.height,
            "prompt": request.prompt,
        });
        std::fs::write(
            dir.join("request.json"),
            serde_json::to_string_pretty(&manifest).unwrap(),
        )
        .map_err(|e| unavailable(e.to_string()))?;
        for (i, rgb) in request.coarse_rgb.iter().enumerate() {
            imageio::write_ppm(&dir.join(format!("rgb_{i:04}.ppm")), request.width, request.height, rgb)
                .map_err(|e| unavailable(e.to_string()))?;
        }
        for (i, flow) in request.coarse_flow.iter().enumerate() {
            imageio::write_flow_raw(
                &dir.join(format!("flow_{i:04}.flo-raw")),
                request.width,
                request.height,
                flow,
            )
            .map_err(|e| unavailable(e.to_string()))?;
        }

        let deadline = Instant::now() + self.timeout;
        while !dir.join("done").exists() {
            if Instant::now() >= deadline {
                return Err(unavailable("timed out waiting for done marker".into()));
            }
            std::thread::sleep(self.poll_interval);
        }

        let mut out = Vec::with_capacity(request.coarse_rgb.len());
        for i in 0..request.coarse_rgb.len() {
            let path = dir.join(format!("refined_{i:04}.ppm"));
            let (w, h, rgb) = imageio::read_ppm(&path)
                .map_err(|e| unavailable(format!("{}: {e}", path.display())))?;
            if w != request.width || h != request.height {
                return Err(unavailable(format!("refined frame {i} has wrong resolution")));
            }
            out.push(rgb);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{vec3, Vec3};
    use crate::vpp::{build_vpp, MaterialKind, MaterialParams};

    fn toy_scene() -> SceneState {
        let obj = build_vpp(
            &[vec3(0.0, 0.0, 1.0)],
            MaterialKind::Rigid,
            MaterialParams::defaults_for(MaterialKind::Rigid),
            0.05,
            0,
            [0.3, 0.5, 0.7],
            0.0,
            0.392,
        )
        .unwrap();
        SceneState { background: vec![], objects: vec![obj], sim_time: 0.0 }
    }

    fn toy_camera() -> Camera {
        Camera {
            fx: 100.0,
            fy: 100.0,
            cx: 16.0,
            cy: 16.0,
            rotation: crate::math::Quat::IDENTITY,
            translation: Vec3::ZERO,
            width: 32,
            height: 32,
            near: 0.01,
        }
    }

    fn toy_request(frames: usize) -> RefineRequest {
        RefineRequest {
            view_id: "frontal".into(),
            window_index: 0,
            control_weight: 1.0,
            prompt: String::new(),
            width: 32,
            height: 32,
            coarse_rgb: vec![vec![0.25; 32 * 32 * 3]; frames],
            coarse_flow: vec![vec![0.0; 32 * 32 * 2]; frames],
        }
    }

    fn toy_config() -> SimConfig {
        let mut c = SimConfig::default();
        c.steps_per_window = 16;
        c.sample_stride = 8;
        c
    }

    #[test]
    fn identity_is_bit_exact() {
        let req = toy_request(3);
        let out = Refiner::Identity.refine(&req).unwrap();
        assert_eq!(out, req.coarse_rgb);
    }

    #[test]
    fn oracle_weight_zero_is_coarse() {
        let scene = toy_scene();
        let mut cams = HashMap::new();
        cams.insert("frontal".to_string(), toy_camera());
        let oracle = make_oracle(
            &scene,
            &Perturbation::ColorShift { object: 0, delta: [0.2, 0.0, 0.0] },
            &toy_config(),
            vec![vec![], vec![]],
            cams,
            [0.0; 3],
        )
        .unwrap();
        let mut req = toy_request(2);
        req.control_weight = 0.0;
        let out = Refiner::Oracle(oracle).refine(&req).unwrap();
        assert_eq!(out, req.coarse_rgb);
    }

    #[test]
    fn oracle_blend_is_affine_in_weight() {
        let scene = toy_scene();
        let mut cams = HashMap::new();
        cams.insert("frontal".to_string(), toy_camera());
        let mk = || {
            make_oracle(
                &scene,
                &Perturbation::ColorShift { object: 0, delta: [0.2, -0.1, 0.05] },
                &toy_config(),
                vec![vec![], vec![]],
                {
                    let mut c = HashMap::new();
                    c.insert("frontal".to_string(), toy_camera());
                    c
                },
                [0.1; 3],
            )
            .unwrap()
        };
        let r = Refiner::Oracle(mk());
        let mut req = toy_request(2);
        req.control_weight = 0.0;
        let a = r.refine(&req).unwrap();
        req.control_weight = 1.0;
        let b = r.refine(&req).unwrap();
        req.control_weight = 0.5;
        let mid = r.refine(&req).unwrap();
        for f in 0..2 {
            for i in 0..a[f].len() {
                let expect = 0.5 * a[f][i] + 0.5 * b[f][i];
                assert!((mid[f][i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn oracle_color_shift_localized_to_object_support() {
        let scene = toy_scene();
        let cfg = toy_config();
        let mut cams = HashMap::new();
        cams.insert("frontal".to_string(), toy_camera());
        let oracle = make_oracle(
            &scene,
            &Perturbation::ColorShift { object: 0, delta: [0.2, 0.0, 0.0] },
            &cfg,
            vec![vec![]],
            cams,
            [0.0; 3],
        )
        .unwrap();
        // coarse = unperturbed renders of the same scene
        let traj = forward_window(&scene, &[], &cfg).unwrap();
        let cam = toy_camera();
        let frames: Vec<_> = (0..traj.frame_count())
            .map(|f| render(&traj.states[f + 1], traj.states.get(f + 2), &cam, Layer::Full, [0.0; 3]))
            .collect();
        let mut req = toy_request(frames.len());
        req.coarse_rgb = frames.iter().map(|f| f.rgb.clone()).collect();
        req.coarse_flow = frames.iter().map(|f| f.flow.clone()).collect();
        let out = Refiner::Oracle(oracle).refine(&req).unwrap();
        for (f, frame) in frames.iter().enumerate() {
            for p in 0..32 * 32 {
                let differs = (0..3).any(|c| (out[f][p * 3 + c] - frame.rgb[p * 3 + c]).abs() > 1e-12);
                if differs {
                    assert!(frame.alpha[p] > 0.0, "difference outside object support");
                }
            }
        }
    }

    #[test]
    fn offset_shift_deterministic_and_bounded() {
        let scene = toy_scene();
        let pert = Perturbation::OffsetShift { object: 0, magnitude: 0.02, seed: 7 };
        let mut a = scene.clone();
        apply_perturbation(&mut a, &pert).unwrap();
        let mut b = scene.clone();
        apply_perturbation(&mut b, &pert).unwrap();
        assert_eq!(a.objects[0].gaussians, b.objects[0].gaussians);
        for g in &a.objects[0].gaussians {
            assert!(g.raw_offset.map(f64::tanh).norm_inf() < 1.0);
        }
    }

    #[test]
    fn offset_shift_rejects_out_of_bound_magnitude() {
        let mut scene = toy_scene();
        let res = apply_perturbation(
            &mut scene,
            &Perturbation::OffsetShift { object: 0, magnitude: 0.05, seed: 1 },
        );
        assert!(res.is_err());
    }

    #[test]
    fn external_copy_stub_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let ext = ExternalRefiner {
            exchange_root: dir.path().to_path_buf(),
            run_id: "t".into(),
            poll_interval: Duration::from_millis(10),
            timeout: Duration::from_secs(5),
        };
        let mut req = toy_request(2);
        // quantized coarse so the ppm round trip is lossless
        for f in &mut req.coarse_rgb {
            for v in f.iter_mut() {
                *v = (*v * 255.0).round() / 255.0;
            }
        }
        let exchange = ext.exchange_dir(0, "frontal");
        let req2 = req.clone();
        let handle = std::thread::spawn(move || {
            // copy-command stand-in: wait for inputs, copy rgb -> refined
            loop {
                if exchange.join(format!("rgb_{:04}.ppm", req2.coarse_rgb.len() - 1)).exists()
                    && exchange.join("request.json").exists()
                {
                    break;
                }
                std::thread::sleep(Duration::from_millis(5));
            }
            for i in 0..req2.coarse_rgb.len() {
                std::fs::copy(
                    exchange.join(format!("rgb_{i:04}.ppm")),
                    exchange.join(format!("refined_{i:04}.ppm")),
                )
                .unwrap();
            }
            std::fs::write(exchange.join("done"), b"").unwrap();
        });
        let out = Refiner::External(ext).refine(&req).unwrap();
        handle.join().unwrap();
        for f in 0..2 {
            for (a, b) in out[f].iter().zip(&req.coarse_rgb[f]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn external_timeout_is_refiner_unavailable() {
        let dir = tempfile::tempdir().unwrap();
        let ext = ExternalRefiner {
            exchange_root: dir.path().to_path_buf(),
            run_id: "t".into(),
            poll_interval: Duration::from_millis(5),
            timeout: Duration::from_millis(30),
        };
        let req = toy_request(1);
        match Refiner::External(ext).refine(&req) {
            Err(VppError::RefinerUnavailable { .. }) => {}
            other => panic!("expected refiner-unavailable, got {other:?}"),
        }
    }
}
