//! Acceptance gate: ten end-to-end checks, one pass/fail line each.
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::time::Instant;

use vppsim::math::{vec3, Vec3};
use vppsim::optimize::{
    progressive_optimize, sim_consistency_loss, total_loss, OptimConfig, ViewTarget, ViewRole,
    WindowScene,
};
use vppsim::physics::{advance_steps, forward_window, DomainBox, SimConfig, Trajectory};
use vppsim::pipeline::{loop_closure, rebase_temporal, render_window_frame, run_sequence, run_window};
use vppsim::refiner::{ExternalRefiner, RefineRequest, Refiner};
use vppsim::render::{project_visible, rasterize, render, Camera, Layer, MASK_THRESHOLD};
use vppsim::scenario::parse_scenario;
use vppsim::vpp::{
    build_vpp, gaussian_world_position, squash, temporal_opacity, MaterialKind, MaterialParams,
    SceneState,
};

fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn load_scenario(name: &str) -> vppsim::scenario::Scenario {
    let text = std::fs::read_to_string(scenario_path(name)).unwrap();
    parse_scenario(&text).unwrap()
}

/// Wraps a criterion body: prints exactly one line, then propagates failure.
fn criterion(label: &str, limit_secs: f64, body: impl FnOnce() -> Result<(), String>) {
    let t = Instant::now();
    let result = body();
    let elapsed = t.elapsed().as_secs_f64();
    match &result {
        Ok(()) if elapsed < limit_secs => {
            println!("acceptance {label}: PASS ({elapsed:.2}s)");
        }
        Ok(()) => {
            println!("acceptance {label}: FAIL (over time budget: {elapsed:.2}s >= {limit_secs}s)");
            panic!("{label}: over time budget");
        }
        Err(msg) => {
            println!("acceptance {label}: FAIL ({msg})");
            panic!("{label}: {msg}");
        }
    }
}

// -------------------------------------------------------------------- 1

#[test]
fn c01_representation_bounds() {
    criterion("01 representation-bounds", 1.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let delta = 0.01;
        for i in 0..10_000 {
            let p = vec3(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(0.0..4.0),
            );
            let raw = vec3(
                rng.gen_range(-1e6..1e6),
                rng.gen_range(-1e6..1e6),
                rng.gen_range(-1e6..1e6),
            );
            let mu = gaussian_world_position(p, raw, delta).map_err(|e| e.to_string())?;
            let d = (mu - p).norm_inf();
            if !(d < delta) {
                return Err(format!("sample {i}: |mu-p|inf = {d} >= {delta}"));
            }
        }
        Ok(())
    });
}

// -------------------------------------------------------------------- 2

#[test]
fn c02_temporal_opacity_algebra() {
    criterion("02 temporal-opacity-algebra", 1.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let half = (-0.5f64).exp();
        for i in 0..1000 {
            let center = rng.gen_range(-10.0..10.0);
            let dur = rng.gen_range(1e-3..10.0);
            let at_center = temporal_opacity(center, center, dur).map_err(|e| e.to_string())?;
            if at_center != 1.0 {
                return Err(format!("sample {i}: o(mu_t) = {at_center} != 1"));
            }
            for sign in [-1.0, 1.0] {
                let v = temporal_opacity(center + sign * dur, center, dur).map_err(|e| e.to_string())?;
                if (v - half).abs() > 1e-12 {
                    return Err(format!("sample {i}: o(mu_t{sign:+}s_d) = {v}, want exp(-1/2)"));
                }
            }
            let off = rng.gen_range(0.0..5.0);
            let a = temporal_opacity(center + off, center, dur).map_err(|e| e.to_string())?;
            let b = temporal_opacity(center - off, center, dur).map_err(|e| e.to_string())?;
            if (a - b).abs() > 1e-15 {
                return Err(format!("sample {i}: asymmetry {a} vs {b}"));
            }
        }
        Ok(())
    });
}

// -------------------------------------------------------------------- 3

fn single_particle_scene(material: MaterialKind, params: MaterialParams, z: f64) -> SceneState {
    let obj = build_vpp(&[vec3(0.0, 0.0, z)], material, params, 0.01, 0, [0.5; 3], 0.0, 0.392)
        .unwrap();
    SceneState { background: vec![], objects: vec![obj], sim_time: 0.0 }
}

#[test]
fn c03_physics_free_fall_oracle() {
    criterion("03 physics-free-fall-oracle", 30.0, || {
        // default step/substep parameters; domain tall enough for a 5 m drop
        let cfg = SimConfig {
            domain: DomainBox { min: [-2.0, -2.0, -10.0], max: [2.0, 2.0, 10.0] },
            ..SimConfig::default()
        };
        let n_outer = 1000usize;
        let n = (n_outer * cfg.substeps) as f64;
        let dt = cfg.step_time / cfg.substeps as f64;
        let z0 = 5.0;
        let expected = z0 - 9.8 * dt * dt * n * (n + 1.0) / 2.0;

        let mut smoke_params = MaterialParams::defaults_for(MaterialKind::Smoke);
        smoke_params.viscosity = 0.0;
        let cases = [
            ("rigid", MaterialKind::Rigid, MaterialParams::defaults_for(MaterialKind::Rigid)),
            ("elastic", MaterialKind::Elastic, MaterialParams::defaults_for(MaterialKind::Elastic)),
            ("smoke", MaterialKind::Smoke, smoke_params),
        ];
        for (name, material, params) in cases {
            let mut state = single_particle_scene(material, params, z0);
            advance_steps(&mut state, &[], &cfg, n_outer, 0, |_| {}).map_err(|e| e.to_string())?;
            let z = state.objects[0].particles[0].position.z;
            if (z - expected).abs() >= 1e-9 {
                return Err(format!("{name}: z = {z}, closed form {expected}, err {:e}", (z - expected).abs()));
            }
        }

        // MPM mass conservation over one full default window
        let scene = single_particle_scene(
            MaterialKind::Elastic,
            MaterialParams::defaults_for(MaterialKind::Elastic),
            5.0,
        );
        let before = scene.total_mass();
        let traj = forward_window(&scene, &[], &cfg).map_err(|e| e.to_string())?;
        for (i, s) in traj.states.iter().enumerate() {
            if s.total_mass().to_bits() != before.to_bits() {
                return Err(format!("mass drifted at snapshot {i}"));
            }
        }
        Ok(())
    });
}

// -------------------------------------------------------------------- 4

#[test]
fn c04_gradient_contract() {
    criterion("04 gradient-contract", 120.0, || {
        let out = std::process::Command::new(env!("CARGO_BIN_EXE_vppsim"))
            .arg("gradcheck")
            .arg(scenario_path("gradcheck.json"))
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!(
                "gradcheck exit {:?}: {}",
                out.status.code(),
                String::from_utf8_lossy(&out.stdout)
            ));
        }
        Ok(())
    });
}

// -------------------------------------------------------------------- 5

/// Direct 2D-loop SSIM map with the renormalized-border convention.
fn reference_ssim(x: &[f64], y: &[f64], w: usize, h: usize, window: usize, sigma: f64) -> Vec<f64> {
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let r = (window / 2) as isize;
    let mut k2 = vec![0.0; window * window];
    for i in 0..window {
        for j in 0..window {
            let di = i as f64 - r as f64;
            let dj = j as f64 - r as f64;
            k2[i * window + j] = (-(di * di) / (2.0 * sigma * sigma)).exp()
                * (-(dj * dj) / (2.0 * sigma * sigma)).exp();
        }
    }
    let k1d: Vec<f64> = (0..window)
        .map(|i| {
            let d = i as f64 - r as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let k1d_sum: f64 = k1d.iter().sum();
    let mut out = vec![0.0; w * h];
    for py in 0..h as isize {
        for px in 0..w as isize {
            let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            let mut zx = 0.0;
            let mut zy = 0.0;
            for o in -r..=r {
                if px + o >= 0 && px + o < w as isize {
                    zx += k1d[(o + r) as usize] / k1d_sum;
                }
                if py + o >= 0 && py + o < h as isize {
                    zy += k1d[(o + r) as usize] / k1d_sum;
                }
            }
            for oy in -r..=r {
                for ox in -r..=r {
                    let (qx, qy) = (px + ox, py + oy);
                    if qx < 0 || qy < 0 || qx >= w as isize || qy >= h as isize {
                        continue;
                    }
                    let kw = k2[((oy + r) * window as isize + ox + r) as usize]
                        / (k1d_sum * k1d_sum)
                        / (zx * zy);
                    let xv = x[(qy * w as isize + qx) as usize];
                    let yv = y[(qy * w as isize + qx) as usize];
                    mx += kw * xv;
                    my += kw * yv;
                    mxx += kw * xv * xv;
                    myy += kw * yv * yv;
                    mxy += kw * xv * yv;
                }
            }
            let sx = mxx - mx * mx;
            let sy = myy - my * my;
            let sxy = mxy - mx * my;
            out[(py * w as isize + px) as usize] = ((2.0 * mx * my + C1) * (2.0 * sxy + C2))
                / ((mx * mx + my * my + C1) * (sx + sy + C2));
        }
    }
    out
}

fn reference_photometric(
    rendered: &[f64],
    target: &[f64],
    mask: &[bool],
    w: usize,
    h: usize,
    cfg: &OptimConfig,
) -> f64 {
    let m: usize = mask.iter().filter(|&&b| b).count();
    if m == 0 {
        return 0.0;
    }
    let mf = m as f64;
    let mut l1 = 0.0;
    for p in 0..w * h {
        if !mask[p] {
            continue;
        }
        for c in 0..3 {
            l1 += (rendered[p * 3 + c] - target[p * 3 + c]).abs();
        }
    }
    l1 /= mf * 3.0;
    let mut ssim_sum = 0.0;
    for c in 0..3 {
        let mut x: Vec<f64> = rendered.iter().skip(c).step_by(3).copied().collect();
        let mut y: Vec<f64> = target.iter().skip(c).step_by(3).copied().collect();
        for p in 0..w * h {
            if !mask[p] {
                x[p] = 0.0;
                y[p] = 0.0;
            }
        }
        let map = reference_ssim(&x, &y, w, h, cfg.ssim_window, 1.5);
        for p in 0..w * h {
            if mask[p] {
                ssim_sum += map[p];
            }
        }
    }
    cfg.l1_weight * l1 + cfg.ssim_weight * (1.0 - ssim_sum / (mf * 3.0))
}

#[test]
fn c05_loss_correctness() {
    criterion("05 loss-correctness", 10.0, || {
        // small two-layer window: a rigid pair plus one background splat
        let mut obj = build_vpp(
            &[vec3(-0.02, 0.0, 1.0), vec3(0.02, 0.0, 1.0)],
            MaterialKind::Rigid,
            MaterialParams::defaults_for(MaterialKind::Rigid),
            0.02,
            0,
            [0.6, 0.3, 0.2],
            0.0,
            0.016,
        )
        .map_err(|e| e.to_string())?;
        for g in &mut obj.gaussians {
            g.spatial_opacity = 0.9;
            g.raw_offset = vec3(0.2, -0.1, 0.05);
        }
        let state = SceneState {
            background: vec![vppsim::vpp::BackgroundGaussian {
                position: vec3(0.0, 0.3, 1.0),
                spatial_opacity: 0.8,
                temporal_center: 0.008,
                temporal_duration: 1e3,
                rotation: vppsim::math::Quat::IDENTITY,
                color: [0.1, 0.2, 0.7],
                scale: 0.1,
            }],
            objects: vec![obj],
            sim_time: 0.0,
        };
        let mut sim = SimConfig::default();
        sim.steps_per_window = 16;
        sim.sample_stride = 8;
        let traj = forward_window(&state, &[], &sim).map_err(|e| e.to_string())?;
        let scene = WindowScene::new(traj);

        let cam = Camera {
            fx: 60.0,
            fy: 60.0,
            cx: 12.0,
            cy: 12.0,
            rotation: vppsim::math::Quat::IDENTITY,
            translation: Vec3::ZERO,
            width: 24,
            height: 24,
            near: 0.01,
        };
        let mut cfg = OptimConfig::default();
        cfg.lambda_sim = 0.7;
        cfg.clear_color = [0.05, 0.0, 0.1];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let frames: Vec<Vec<f64>> = (0..scene.frame_count())
            .map(|_| (0..24 * 24 * 3).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        let target = ViewTarget {
            camera: cam,
            frames: frames.clone(),
            control_weight: 1.0,
            view_role: ViewRole::Frontal,
        };
        let parts = total_loss(&scene, std::slice::from_ref(&target), &cfg).map_err(|e| e.to_string())?;

        // straight-line reference: per-frame two-layer photometric + mean
        let mut photo_ref = 0.0;
        for f in 0..scene.frame_count() {
            let (bg, fg) = scene.frame_splats(f);
            let time = scene.trajectory.states[f + 1].sim_time;
            let buf_fg = rasterize(&project_visible(&fg, time, &cam), &cam, [0.0; 3], false);
            let buf_bg = rasterize(&project_visible(&bg, time, &cam), &cam, cfg.clear_color, false);
            let mask: Vec<bool> = buf_fg.alpha.iter().map(|&a| a > MASK_THRESHOLD).collect();
            let inv: Vec<bool> = mask.iter().map(|&m| !m).collect();
            photo_ref += reference_photometric(&buf_bg.rgb, &frames[f], &inv, 24, 24, &cfg);
            photo_ref += reference_photometric(&buf_fg.rgb, &frames[f], &mask, 24, 24, &cfg);
        }
        photo_ref /= scene.frame_count() as f64;

        // straight-line consistency term over all stored frames
        let mut sim_ref = 0.0;
        let canon = scene.canonical();
        let frames_t = scene.frame_count();
        for f in 0..frames_t {
            let cur = &scene.trajectory.states[f + 1];
            for (oi, o) in canon.objects.iter().enumerate() {
                let k = o.gaussians_per_particle;
                for j in 0..o.particles.len() {
                    let p = cur.objects[oi].particles[j].position;
                    let mut mean = Vec3::ZERO;
                    for kk in 0..k {
                        mean += p + o.gaussians[j * k + kk].raw_offset.map(squash) * o.particle_size;
                    }
                    mean = mean / k as f64;
                    sim_ref += (p - mean).norm_sq();
                }
            }
        }
        let j_total: usize = canon.objects.iter().map(|o| o.particles.len()).sum();
        sim_ref /= (frames_t * j_total) as f64;
        let total_ref = photo_ref + cfg.lambda_sim * sim_ref;

        if (parts.photometric - photo_ref).abs() > 1e-12 {
            return Err(format!("photometric {} vs reference {}", parts.photometric, photo_ref));
        }
        if (parts.sim - sim_ref).abs() > 1e-12 {
            return Err(format!("sim {} vs reference {}", parts.sim, sim_ref));
        }
        if (parts.total - total_ref).abs() > 1e-12 {
            return Err(format!("total {} vs reference {}", parts.total, total_ref));
        }

        // hand cases for the consistency loss
        let p = vec![vec![vec3(0.0, 0.0, 1.0)]];
        let exact = sim_consistency_loss(&p, &vec![vec![vec![vec3(0.0, 0.0, 1.0)]]])
            .map_err(|e| e.to_string())?;
        if exact != 0.0 {
            return Err(format!("K=1 identity case: {exact}"));
        }
        let sym = sim_consistency_loss(&p, &vec![vec![vec![vec3(0.01, 0.0, 1.0), vec3(-0.01, 0.0, 1.0)]]])
            .map_err(|e| e.to_string())?;
        if sym != 0.0 {
            return Err(format!("symmetric-K case: {sym}"));
        }
        let dev = sim_consistency_loss(&p, &vec![vec![vec![vec3(0.003, 0.0, 1.0)]]])
            .map_err(|e| e.to_string())?;
        if (dev - 9e-6).abs() > 1e-20 {
            return Err(format!("deviation case: {dev} vs 9e-6"));
        }
        Ok(())
    });
}

// -------------------------------------------------------------------- 6

#[test]
fn c06_closed_loop_noop() {
    criterion("06 closed-loop-noop", 60.0, || {
        let sc = load_scenario("noop-two-window.json");
        let initial = sc.build_initial_state().map_err(|e| e.to_string())?;
        let cameras = sc.build_cameras();
        let refiner = sc.build_refiner("acc6").map_err(|e| e.to_string())?;
        let optim = sc.optim_for_window(0);
        let results = run_sequence(&initial, &sc.actions_per_window(), &cameras, &refiner, &sc.sim, &optim, None)
            .map_err(|e| e.to_string())?;

        // reference: one continuous 784-step run, sampled every stride
        let mut long = initial.clone();
        let mut snaps: Vec<SceneState> = Vec::new();
        advance_steps(&mut long, &[], &sc.sim, 2 * sc.sim.steps_per_window, 0, |s| {
            snaps.push(s.clone())
        })
        .map_err(|e| e.to_string())?;
        let per_window = sc.sim.steps_per_window / sc.sim.sample_stride;
        if snaps.len() != 2 * per_window {
            return Err(format!("expected {} snapshots, got {}", 2 * per_window, snaps.len()));
        }

        for w in 0..2 {
            let res = &results[w];
            for f in 0..per_window {
                let ours = &res.refined_trajectory.states[f + 1];
                let reference = &snaps[w * per_window + f];
                if ours.sim_time.to_bits() != reference.sim_time.to_bits() {
                    return Err(format!("window {w} frame {f}: sim_time differs"));
                }
                for (oa, ob) in ours.objects.iter().zip(&reference.objects) {
                    for (pa, pb) in oa.particles.iter().zip(&ob.particles) {
                        let pos_eq = (0..3).all(|ax| {
                            pa.position.get(ax).to_bits() == pb.position.get(ax).to_bits()
                        });
                        let vel_eq = (0..3).all(|ax| {
                            pa.velocity.get(ax).to_bits() == pb.velocity.get(ax).to_bits()
                        });
                        if !pos_eq || !vel_eq {
                            return Err(format!("window {w} frame {f}: particle state differs"));
                        }
                    }
                }
            }

            // frames: render the long run through the same windowed timebase
            let mut canon = if w == 0 { initial.clone() } else { snaps[per_window - 1].clone() };
            if w > 0 {
                rebase_temporal(&mut canon, sc.sim.window_duration());
            }
            let mut states = vec![canon];
            states.extend(snaps[w * per_window..(w + 1) * per_window].iter().cloned());
            let ref_scene = WindowScene::new(Trajectory {
                states,
                sample_stride: sc.sim.sample_stride,
                steps_per_window: sc.sim.steps_per_window,
                step_time: sc.sim.step_time,
            });
            let (name, _, cam) = &cameras[0];
            let (got_name, got_frames) = &res.per_view_frames[0];
            if got_name != name {
                return Err("view name mismatch".into());
            }
            for f in 0..per_window {
                let want = render_window_frame(&ref_scene, f, cam, sc.background.clear_color);
                let got = &got_frames[f];
                let rgb_eq = want.rgb.iter().zip(&got.rgb).all(|(a, b)| a.to_bits() == b.to_bits());
                let flow_eq = want.flow.iter().zip(&got.flow).all(|(a, b)| a.to_bits() == b.to_bits());
                if !rgb_eq || !flow_eq || want.mask != got.mask {
                    return Err(format!("window {w} frame {f}: rendered frame differs"));
                }
            }
        }
        Ok(())
    });
}

// -------------------------------------------------------------------- 7

#[test]
fn c07_oracle_color_recovery() {
    criterion("07 oracle-color-recovery", 600.0, || {
        let sc = load_scenario("oracle-color-shift.json");
        let initial = sc.build_initial_state().map_err(|e| e.to_string())?;
        let cameras = sc.build_cameras();
        let refiner = sc.build_refiner("acc7").map_err(|e| e.to_string())?;
        let cfg = sc.optim_for_window(0);
        let traj = forward_window(&initial, &[], &sc.sim).map_err(|e| e.to_string())?;
        let mut scene = WindowScene::new(traj);
        let res = progressive_optimize(&mut scene, &refiner, &cameras, 0, &cfg).map_err(|e| e.to_string())?;
        let first = res.history.first().ok_or("empty loss history")?.total;
        let last = res.history.last().unwrap().total;
        if !(last <= 0.1 * first) {
            return Err(format!("loss {first} -> {last}: reduction {:.1}% < 90%", 100.0 * (1.0 - last / first)));
        }

        // masked per-pixel L1 of the final scene against the frontal target
        let (name, _, cam) = cameras.iter().find(|(_, r, _)| *r == ViewRole::Frontal).unwrap();
        let frames: Vec<_> = (0..scene.frame_count())
            .map(|f| render_window_frame(&scene, f, cam, sc.background.clear_color))
            .collect();
        let request = RefineRequest {
            view_id: name.clone(),
            window_index: 0,
            control_weight: cfg.w_front,
            prompt: String::new(),
            width: cam.width,
            height: cam.height,
            coarse_rgb: frames.iter().map(|f| f.rgb.clone()).collect(),
            coarse_flow: frames.iter().map(|f| f.flow.clone()).collect(),
        };
        let targets = refiner.refine(&request).map_err(|e| e.to_string())?;
        let mut err = 0.0;
        let mut count = 0usize;
        for (f, frame) in frames.iter().enumerate() {
            for p in 0..frame.mask.len() {
                if !frame.mask[p] {
                    continue;
                }
                for c in 0..3 {
                    err += (frame.rgb[p * 3 + c] - targets[f][p * 3 + c]).abs();
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err("empty mask".into());
        }
        let mean = err / (count * 3) as f64;
        if !(mean < 0.02) {
            return Err(format!("masked per-pixel L1 {mean} >= 0.02"));
        }
        Ok(())
    });
}

// -------------------------------------------------------------------- 8

fn mean_offset_norm(scene: &WindowScene) -> f64 {
    let canon = scene.canonical();
    let mut total = 0.0;
    let mut count = 0usize;
    for o in &canon.objects {
        let k = o.gaussians_per_particle;
        for j in 0..o.particles.len() {
            let mut mean = Vec3::ZERO;
            for kk in 0..k {
                mean += o.gaussians[j * k + kk].raw_offset.map(squash);
            }
            total += (mean * (o.particle_size / k as f64)).norm();
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn c08_regularizer_direction() {
    criterion("08 regularizer-direction", 600.0, || {
        let sc = load_scenario("offset-sweep.json");
        let initial = sc.build_initial_state().map_err(|e| e.to_string())?;
        let cameras = sc.build_cameras();
        let mut norms = Vec::new();
        for lambda in [10.0, 0.1] {
            let refiner = sc.build_refiner("acc8").map_err(|e| e.to_string())?;
            let mut cfg = sc.optim_for_window(0);
            cfg.lambda_sim = lambda;
            let traj = forward_window(&initial, &[], &sc.sim).map_err(|e| e.to_string())?;
            let mut scene = WindowScene::new(traj);
            progressive_optimize(&mut scene, &refiner, &cameras, 0, &cfg).map_err(|e| e.to_string())?;
            norms.push(mean_offset_norm(&scene));
        }
        if !(norms[0] <= norms[1]) {
            return Err(format!(
                "mean offset norm with lambda 10 ({}) exceeds lambda 0.1 ({})",
                norms[0], norms[1]
            ));
        }
        Ok(())
    });
}

// -------------------------------------------------------------------- 9

#[test]
fn c09_loop_closure_exactness() {
    criterion("09 loop-closure-exactness", 60.0, || {
        let sc = load_scenario("minimal-rigid.json");
        let initial = sc.build_initial_state().map_err(|e| e.to_string())?;
        let cameras = sc.build_cameras();
        let refiner = sc.build_refiner("acc9").map_err(|e| e.to_string())?;
        let cfg = sc.optim_for_window(0);
        let res = run_window(&initial, &[], &cameras, &refiner, &sc.sim, &cfg, 0)
            .map_err(|e| e.to_string())?;
        let closed = &res.closure_state;

        // boundary render of the closed state equals the final optimized frame
        let (_, _, cam) = &cameras[0];
        let frame = render(closed, None, cam, Layer::Full, sc.background.clear_color);
        let last = res.per_view_frames[0].1.last().unwrap();
        let rgb_eq = frame.rgb.iter().zip(&last.rgb).all(|(a, b)| a.to_bits() == b.to_bits());
        let flow_eq = frame.flow.iter().zip(&last.flow).all(|(a, b)| a.to_bits() == b.to_bits());
        let alpha_eq = frame.alpha.iter().zip(&last.alpha).all(|(a, b)| a.to_bits() == b.to_bits());
        if !rgb_eq || !flow_eq || !alpha_eq || frame.mask != last.mask {
            return Err("boundary render differs from the final optimized frame".into());
        }

        // anchors moved by less than delta; re-expressed offsets finite
        let end = res.refined_trajectory.states.last().unwrap();
        for (oc, oe) in closed.objects.iter().zip(&end.objects) {
            for (pc, pe) in oc.particles.iter().zip(&oe.particles) {
                if (pc.position - pe.position).norm_inf() >= oc.particle_size {
                    return Err("closure anchor moved by >= delta".into());
                }
            }
            for g in &oc.gaussians {
                if !g.raw_offset.is_finite() {
                    return Err("non-finite re-expressed offset".into());
                }
            }
        }

        // the closure is the exact fixed point of re-closing
        let reclosed = loop_closure(&WindowScene::new(res.refined_trajectory.clone()))
            .map_err(|e| e.to_string())?;
        for (a, b) in reclosed.objects.iter().zip(&closed.objects) {
            for (ga, gb) in a.gaussians.iter().zip(&b.gaussians) {
                let wa = ga.raw_offset.map(squash);
                let wb = gb.raw_offset.map(squash);
                for ax in 0..3 {
                    if (wa.get(ax) - wb.get(ax)).abs() > 1e-15 {
                        return Err("re-closing moved an offset".into());
                    }
                }
            }
        }
        Ok(())
    });
}

// -------------------------------------------------------------------- 10

fn dir_files_sorted(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn c10_determinism_and_formats() {
    criterion("10 determinism-and-formats", 120.0, || {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let (out_a, out_b) = (tmp.path().join("a"), tmp.path().join("b"));
        for out in [&out_a, &out_b] {
            let status = std::process::Command::new(env!("CARGO_BIN_EXE_vppsim"))
                .arg("run")
                .arg(scenario_path("minimal-rigid.json"))
                .arg("--out")
                .arg(out)
                .stdout(std::process::Stdio::null())
                .stderr(std::process::Stdio::null())
                .status()
                .map_err(|e| e.to_string())?;
            if !status.success() {
                return Err(format!("run failed with {status:?}"));
            }
        }
        let files_a = dir_files_sorted(&out_a);
        let files_b = dir_files_sorted(&out_b);
        let rel = |p: &Path, base: &Path| p.strip_prefix(base).unwrap().to_path_buf();
        let rel_a: Vec<_> = files_a.iter().map(|p| rel(p, &out_a)).collect();
        let rel_b: Vec<_> = files_b.iter().map(|p| rel(p, &out_b)).collect();
        if rel_a != rel_b {
            return Err("run output file sets differ".into());
        }
        for (a, b) in files_a.iter().zip(&files_b) {
            if std::fs::read(a).unwrap() != std::fs::read(b).unwrap() {
                return Err(format!("{} differs between runs", rel(a, &out_a).display()));
            }
        }

        // checkpoint round trip is bit-exact on disk and in memory
        let ckpt = out_a.join("ckpt/w0.vppc");
        let state = vppsim::checkpoint::load(&ckpt).map_err(|e| e.to_string())?;
        let resaved = tmp.path().join("resaved.vppc");
        vppsim::checkpoint::save(&resaved, &state).map_err(|e| e.to_string())?;
        if std::fs::read(&ckpt).unwrap() != std::fs::read(&resaved).unwrap() {
            return Err("checkpoint re-serialization differs".into());
        }
        let reloaded = vppsim::checkpoint::load(&resaved).map_err(|e| e.to_string())?;
        if reloaded != state {
            return Err("checkpoint reload differs".into());
        }

        // external exchange with a copy stub returns the input frames bit-exactly
        let ext = ExternalRefiner {
            exchange_root: tmp.path().join("exchange"),
            run_id: "acc10".into(),
            poll_interval: std::time::Duration::from_millis(10),
            timeout: std::time::Duration::from_secs(30),
        };
        let (w, h) = (16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut frames: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..w * h * 3).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        for f in &mut frames {
            for v in f.iter_mut() {
                *v = (*v * 255.0).round() / 255.0; // on the ppm grid, so lossless
            }
        }
        let request = RefineRequest {
            view_id: "frontal".into(),
            window_index: 0,
            control_weight: 1.0,
            prompt: String::new(),
            width: w,
            height: h,
            coarse_rgb: frames.clone(),
            coarse_flow: vec![vec![0.0; w * h * 2]; 3],
        };
        let exchange = ext.exchange_dir(0, "frontal");
        let n_frames = frames.len();
        let stub = std::thread::spawn(move || {
            loop {
                if exchange.join(format!("rgb_{:04}.ppm", n_frames - 1)).exists()
                    && exchange.join("request.json").exists()
                {
                    break;
                }
                std::thread::sleep(std::time::Duration::from_millis(5));
            }
            for i in 0..n_frames {
                std::fs::copy(
                    exchange.join(format!("rgb_{i:04}.ppm")),
                    exchange.join(format!("refined_{i:04}.ppm")),
                )
                .unwrap();
            }
            std::fs::write(exchange.join("done"), b"").unwrap();
        });
        let refined = Refiner::External(ext).refine(&request).map_err(|e| e.to_string())?;
        stub.join().unwrap();
        for (got, want) in refined.iter().zip(&frames) {
            let eq = got.iter().zip(want).all(|(a, b)| a.to_bits() == b.to_bits());
            if !eq {
                return Err("external round trip altered a frame".into());
            }
        }
        Ok(())
    });
}
