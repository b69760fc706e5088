//! The closed loop: forward physics, refinement + backward optimization,
//! final renders, and loop closure feeding the next action window.

use crate::math::Vec3;
use crate::optimize::{progressive_optimize, OptimConfig, ViewRole, WindowScene};
use crate::physics::{forward_window, Action, SimConfig, Trajectory};
use crate::refiner::Refiner;
use crate::render::{project_visible, rasterize, Camera, RenderedFrame, SplatInput, MASK_THRESHOLD};
use crate::vpp::{squash, SceneState};
use crate::{Result, VppError};
use std::path::Path;
use std::time::Instant;

pub use crate::optimize::LossRecord;

#[derive(Debug, Clone)]
pub struct WindowResult {
    /// per-frame particle positions with the optimized canonical attributes
    pub refined_trajectory: Trajectory,
    /// (view name, rendered frames) in camera order
    pub per_view_frames: Vec<(String, Vec<RenderedFrame>)>,
    pub loss_history: Vec<LossRecord>,
    pub events: Vec<String>,
    /// (stage label, wall-clock seconds)
    pub timings: Vec<(String, f64)>,
    pub closure_state: SceneState,
}

fn with_window_context(e: VppError, window_index: usize) -> VppError {
    match e {
        VppError::SimulationDiverged { step, detail } => VppError::SimulationDiverged {
            step,
            detail: format!("window {window_index}: {detail}"),
        },
        VppError::OptimizerDiverged { iteration, detail } => VppError::OptimizerDiverged {
            iteration,
            detail: format!("window {window_index}: {detail}"),
        },
        VppError::RefinerUnavailable { context, detail } => VppError::RefinerUnavailable {
            context: format!("window {window_index}: {context}"),
            detail,
        },
        other => other,
    }
}

/// Render frame `f` of an optimized window: canonical attributes over the
/// frame's particle positions, mask from the foreground-only pass.
pub fn render_window_frame(
    scene: &WindowScene,
    f: usize,
    camera: &Camera,
    clear_color: [f64; 3],
) -> RenderedFrame {
    let (bg, fg) = scene.frame_splats(f);
    let time = scene.trajectory.states[f + 1].sim_time;
    let mut all: Vec<SplatInput> = bg;
    all.extend(fg.iter().copied());
    let vis = project_visible(&all, time, camera);
    let buf = rasterize(&vis, camera, clear_color, false);
    let vis_fg = project_visible(&fg, time, camera);
    let fg_alpha = rasterize(&vis_fg, camera, [0.0; 3], false).alpha;
    RenderedFrame {
        width: camera.width,
        height: camera.height,
        rgb: buf.rgb,
        flow: buf.flow,
        mask: fg_alpha.iter().map(|&a| a > MASK_THRESHOLD).collect(),
        alpha: buf.alpha,
        time,
    }
}

/// Solve for a raw offset whose rendered world coordinate reproduces
/// `target` bit-for-bit: `anchor + squash(r) * delta == target` exactly.
/// Starts at the atanh solution and walks ulps to absorb rounding.
pub fn reexpress_coord(anchor: f64, target: f64, delta: f64) -> Result<f64> {
    let x = (target - anchor) / delta;
    if !x.is_finite() || x.abs() >= 1.0 {
        return Err(VppError::ClosureDegenerate(format!(
            "offset re-expression needs |x| < 1, got {x} (anchor {anchor}, target {target}, delta {delta})"
        )));
    }
    let hit = |r: f64| anchor + squash(r) * delta == target;
    let r0 = x.atanh();
    if hit(r0) {
        return Ok(r0);
    }
    let mut lo = r0;
    let mut hi = r0;
    for _ in 0..256 {
        lo = f64::from_bits(if lo >= 0.0 { lo.to_bits().wrapping_sub(1) } else { lo.to_bits().wrapping_add(1) });
        hi = f64::from_bits(if hi >= 0.0 { hi.to_bits().wrapping_add(1) } else { hi.to_bits().wrapping_sub(1) });
        if hit(lo) {
            return Ok(lo);
        }
        if hit(hi) {
            return Ok(hi);
        }
    }
    Err(VppError::ClosureDegenerate(format!(
        "offset re-expression could not reproduce the world coordinate exactly (anchor {anchor}, target {target})"
    )))
}

/// Write the optimized visual state back into the particles: each particle
/// moves to the centroid of its splats' final-time world positions, keeps its
/// simulated velocity, and the raw offsets are re-expressed so every splat's
/// world position at the boundary is preserved exactly.
pub fn loop_closure(scene: &WindowScene) -> Result<SceneState> {
    let canon = scene.canonical();
    let last = scene
        .trajectory
        .states
        .last()
        .ok_or_else(|| VppError::invalid("empty trajectory"))?;
    let mut out = last.clone();
    out.background = canon.background.clone();
    for (oi, obj) in out.objects.iter_mut().enumerate() {
        let canon_obj = &canon.objects[oi];
        let k = obj.gaussians_per_particle;
        let delta = obj.particle_size;
        obj.gaussians = canon_obj.gaussians.clone();
        for j in 0..obj.particles.len() {
            let p_t = obj.particles[j].position;
            let world: Vec<Vec3> = (0..k)
                .map(|kk| {
                    let g = &canon_obj.gaussians[j * k + kk];
                    p_t + g.raw_offset.map(squash) * delta
                })
                .collect();
            let mut sum = Vec3::ZERO;
            for w in &world {
                sum = sum + *w;
            }
            let anchor = sum / k as f64;
            debug_assert!((anchor - p_t).norm_inf() < delta);
            for kk in 0..k {
                let g = &mut obj.gaussians[j * k + kk];
                g.raw_offset = crate::math::vec3(
                    reexpress_coord(anchor.x, world[kk].x, delta)?,
                    reexpress_coord(anchor.y, world[kk].y, delta)?,
                    reexpress_coord(anchor.z, world[kk].z, delta)?,
                );
            }
            obj.particles[j].position = anchor;
            // velocity inherited from the simulator as-is
        }
    }
    Ok(out)
}

/// Shift every temporal gate into the next window's span.
pub fn rebase_temporal(state: &mut SceneState, shift: f64) {
    for b in &mut state.background {
        b.temporal_center += shift;
    }
    for obj in &mut state.objects {
        for g in &mut obj.gaussians {
            g.temporal_center += shift;
        }
    }
}

/// One full cycle: forward physics, progressive refinement + optimization,
/// final renders from every camera, loop closure.
pub fn run_window(
    state: &SceneState,
    actions: &[Action],
    cameras: &[(String, ViewRole, Camera)],
    refiner: &Refiner,
    sim: &SimConfig,
    optim: &OptimConfig,
    window_index: usize,
) -> Result<WindowResult> {
    let mut timings = Vec::new();
    let t = Instant::now();
    let traj = forward_window(state, actions, sim).map_err(|e| with_window_context(e, window_index))?;
    timings.push(("forward".to_string(), t.elapsed().as_secs_f64()));

    let mut scene = WindowScene::new(traj);
    let t = Instant::now();
    let prog = progressive_optimize(&mut scene, refiner, cameras, window_index, optim)
        .map_err(|e| with_window_context(e, window_index))?;
    timings.push(("refine+optimize".to_string(), t.elapsed().as_secs_f64()));

    let t = Instant::now();
    let per_view_frames: Vec<(String, Vec<RenderedFrame>)> = cameras
        .iter()
        .map(|(name, _, cam)| {
            let frames = (0..scene.frame_count())
                .map(|f| render_window_frame(&scene, f, cam, optim.clear_color))
                .collect();
            (name.clone(), frames)
        })
        .collect();
    timings.push(("render".to_string(), t.elapsed().as_secs_f64()));

    let t = Instant::now();
    let closure_state = loop_closure(&scene).map_err(|e| with_window_context(e, window_index))?;
    timings.push(("closure".to_string(), t.elapsed().as_secs_f64()));

    for (oi, obj) in closure_state.objects.iter().enumerate() {
        assert_eq!(obj.particles.len(), state.objects[oi].particles.len());
        assert_eq!(obj.gaussians_per_particle, state.objects[oi].gaussians_per_particle);
    }

    Ok(WindowResult {
        refined_trajectory: scene.trajectory,
        per_view_frames,
        loss_history: prog.history,
        events: prog.events,
        timings,
        closure_state,
    })
}

/// W sequential windows, each seeded from the previous closure state with its
/// temporal gates shifted into the new span; checkpoints written after each
/// window when a directory is given.
pub fn run_sequence(
    initial: &SceneState,
    actions_per_window: &[Vec<Action>],
    cameras: &[(String, ViewRole, Camera)],
    refiner: &Refiner,
    sim: &SimConfig,
    optim: &OptimConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<WindowResult>> {
    let mut results = Vec::with_capacity(actions_per_window.len());
    let mut state = initial.clone();
    for (w, actions) in actions_per_window.iter().enumerate() {
        if w > 0 {
            rebase_temporal(&mut state, sim.window_duration());
        }
        let res = run_window(&state, actions, cameras, refiner, sim, optim, w)?;
        if let Some(dir) = checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            crate::checkpoint::save(&dir.join(format!("w{w}.vppc")), &res.closure_state)?;
        }
        state = res.closure_state.clone();
        results.push(res);
    }
    Ok(results)
}
