use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use vppsim::math::vec3;
use vppsim::optimize::{gradients, param_groups, GradientMode, ParamGroup, ViewTarget, WindowScene};
use vppsim::physics::forward_window;
use vppsim::pipeline::{render_window_frame, run_window};
use vppsim::render::{imageio, render, Camera, Layer};
use vppsim::scenario::{parse_scenario, serialize_scenario, Scenario};
use vppsim::{Result, VppError};

#[derive(Parser)]
#[command(name = "vppsim", version, about = "Desk-scale closed-loop particle/splat simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// scenario JSON file
    scenario: PathBuf,
    /// override the scenario seed
    #[arg(long)]
    seed: Option<u64>,
    /// run only the first N windows
    #[arg(long)]
    windows: Option<usize>,
    /// override the refiner kind (identity only; oracle/external need their config sections)
    #[arg(long)]
    refiner: Option<String>,
    /// output directory (defaults to the scenario's output_dir, then ./out/<name>)
    #[arg(long)]
    out: Option<PathBuf>,
    /// worker threads for rendering
    #[arg(long, env = "VPP_THREADS")]
    threads: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    scenario: PathBuf,
    /// number of parameters to sample (all when omitted)
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, env = "VPP_THREADS")]
    threads: Option<usize>,
}

#[derive(Args)]
struct ReplayArgs {
    /// checkpoint written by `run` (ckpt/w<window>.vppc)
    checkpoint: PathBuf,
    /// scenario providing the named camera
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// camera name inside the scenario (defaults to the frontal one)
    #[arg(long)]
    camera: Option<String>,
    /// render N ad-hoc orbit cameras instead of a scenario camera
    #[arg(long)]
    orbit: Option<usize>,
    #[arg(long, default_value = "replay-out")]
    out: PathBuf,
    #[arg(long, env = "VPP_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a scenario end to end and write all artifacts
    Run(RunArgs),
    /// Parse and semantically check a scenario; no simulation
    Validate { scenario: PathBuf },
    /// Compare analytic gradients against central finite differences
    Gradcheck(GradcheckArgs),
    /// Render a saved checkpoint from a scenario camera or an orbit
    Replay(ReplayArgs),
}

fn exit_code_for(e: &VppError) -> u8 {
    match e {
        VppError::SimulationDiverged { .. } | VppError::OptimizerDiverged { .. } => 2,
        VppError::RefinerUnavailable { .. } => 3,
        _ => 1,
    }
}

fn init_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path).map_err(|e| VppError::Scenario {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    parse_scenario(&text)
}

fn write_frame_files(
    dir: &Path,
    window: usize,
    frame: usize,
    frame_data: &vppsim::render::RenderedFrame,
) -> Result<()> {
    let stem = format!("w{window}_f{frame:04}");
    imageio::write_ppm(&dir.join(format!("{stem}.ppm")), frame_data.width, frame_data.height, &frame_data.rgb)?;
    imageio::write_flow_raw(&dir.join(format!("{stem}.flo-raw")), frame_data.width, frame_data.height, &frame_data.flow)?;
    imageio::write_mask_pgm(&dir.join(format!("{stem}.pgm")), frame_data.width, frame_data.height, &frame_data.mask)?;
    Ok(())
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    init_threads(args.threads);
    let mut scenario = load_scenario(&args.scenario)?;
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    if let Some(w) = args.windows {
        if w == 0 || w > scenario.windows.len() {
            return Err(VppError::Scenario {
                path: "--windows".into(),
                detail: format!("must be in 1..={}", scenario.windows.len()),
            });
        }
        scenario.windows.truncate(w);
    }
    if let Some(kind) = &args.refiner {
        match kind.as_str() {
            "identity" => scenario.refiner = vppsim::scenario::RefinerSpec::Identity,
            other => {
                return Err(VppError::Scenario {
                    path: "--refiner".into(),
                    detail: format!("only 'identity' can be forced from the command line, got '{other}'"),
                })
            }
        }
    }
    scenario.validate()?;

    let out = args
        .out
        .clone()
        .or_else(|| scenario.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(&scenario.name));
    std::fs::create_dir_all(&out)?;

    let normalized = serialize_scenario(&scenario);
    let config_hash = format!("{:x}", Sha256::digest(normalized.as_bytes()));

    let initial = scenario.build_initial_state()?;
    let cameras = scenario.build_cameras();
    let refiner = scenario.build_refiner(&config_hash[..12])?;
    let actions = scenario.actions_per_window();
    let ckpt_dir = out.join("ckpt");

    // windows are driven one by one so each can carry its own optim config;
    // this mirrors run_sequence's closure/rebase path exactly
    let mut results = Vec::new();
    let mut state = initial.clone();
    for w in 0..scenario.windows.len() {
        let optim = scenario.optim_for_window(w);
        let mut res = run_window(&state, &actions[w], &cameras, &refiner, &scenario.sim, &optim, w)?;
        std::fs::create_dir_all(&ckpt_dir)?;
        vppsim::checkpoint::save(&ckpt_dir.join(format!("w{w}.vppc")), &res.closure_state)?;
        state = res.closure_state.clone();
        vppsim::pipeline::rebase_temporal(&mut state, scenario.sim.window_duration());
        for (label, secs) in &res.timings {
            eprintln!("window {w}: {label} {secs:.3}s");
        }
        res.timings.clear();
        results.push(res);
    }

    let mut losses = String::new();
    for (w, res) in results.iter().enumerate() {
        for rec in &res.loss_history {
            let mut v = serde_json::to_value(rec).expect("loss record");
            v["window"] = serde_json::json!(w);
            losses.push_str(&v.to_string());
            losses.push('\n');
        }
        for (view, frames) in &res.per_view_frames {
            let dir = out.join("frames").join(view);
            std::fs::create_dir_all(&dir)?;
            for (f, frame) in frames.iter().enumerate() {
                write_frame_files(&dir, w, f, frame)?;
            }
        }
    }
    std::fs::write(out.join("losses.jsonl"), losses)?;

    let manifest = serde_json::json!({
        "name": scenario.name,
        "seed": scenario.seed,
        "windows": scenario.windows.len(),
        "refiner": scenario.refiner,
        "config_hash": config_hash,
        "version": env!("CARGO_PKG_VERSION"),
    });
    std::fs::write(out.join("run.json"), serde_json::to_string_pretty(&manifest).expect("manifest") + "\n")?;
    println!("{}", out.display());
    Ok(())
}

fn cmd_validate(path: &Path) -> Result<()> {
    load_scenario(path)?;
    println!("ok");
    Ok(())
}

fn group_name(g: ParamGroup) -> &'static str {
    match g {
        ParamGroup::Offset => "offset",
        ParamGroup::Color => "color",
        ParamGroup::Opacity => "opacity",
        ParamGroup::Temporal => "temporal",
        ParamGroup::Rotation => "rotation",
    }
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<bool> {
    init_threads(args.threads);
    let scenario = load_scenario(&args.scenario)?;
    let initial = scenario.build_initial_state()?;
    let splats: usize = initial.background.len()
        + initial.objects.iter().map(|o| o.gaussians.len()).sum::<usize>();
    if splats > 10 {
        return Err(VppError::Scenario {
            path: args.scenario.display().to_string(),
            detail: format!("gradcheck needs <= 10 splats for numeric differentiation, scene has {splats}"),
        });
    }
    let mut cfg = scenario.optim_for_window(0);
    let cameras = scenario.build_cameras();
    let traj = forward_window(&initial, &scenario.actions_per_window()[0], &scenario.sim)?;
    let scene = WindowScene::new(traj);

    // targets: the same geometry with deterministically shifted colors, so the
    // photometric chain carries signal on every attribute group
    let mut shifted = scene.clone();
    for obj in &mut shifted.trajectory.states[0].objects {
        for g in &mut obj.gaussians {
            for c in 0..3 {
                g.color[c] = (g.color[c] + 0.15).min(1.0);
            }
        }
    }
    let targets: Vec<ViewTarget> = cameras
        .iter()
        .map(|(_, role, cam)| {
            let frames = (0..shifted.frame_count())
                .map(|f| render_window_frame(&shifted, f, cam, cfg.clear_color).rgb)
                .collect();
            ViewTarget { camera: *cam, frames, control_weight: 1.0, view_role: *role }
        })
        .collect();

    cfg.gradient_mode = GradientMode::Analytic;
    let mut ga = gradients(&scene, &targets, &cfg)?;
    cfg.gradient_mode = GradientMode::Numeric;
    let gn = gradients(&scene, &targets, &cfg)?;
    if std::env::var("VPP_GRADCHECK_BREAK").is_ok() {
        // negative control for the harness: corrupt the analytic side
        for v in &mut ga {
            *v += 1.0;
        }
    }

    let groups = param_groups(&scene);
    let n = args.samples.unwrap_or(ga.len()).min(ga.len());
    let mut pass = 0usize;
    let mut per_group: std::collections::BTreeMap<&str, (f64, usize, usize)> = Default::default();
    for i in 0..n {
        let (ok, rel) = if gn[i].abs() < 1e-8 {
            ((ga[i] - gn[i]).abs() <= 1e-7, 0.0)
        } else {
            let rel = (ga[i] - gn[i]).abs() / gn[i].abs().max(ga[i].abs());
            (rel <= 1e-3, rel)
        };
        let entry = per_group.entry(group_name(groups[i])).or_insert((0.0, 0, 0));
        entry.0 = entry.0.max(rel);
        entry.1 += ok as usize;
        entry.2 += 1;
        pass += ok as usize;
    }
    for (name, (max_rel, ok, total)) in &per_group {
        println!("{name}: max_rel_err {max_rel:.3e} pass {ok}/{total}");
    }
    let rate = pass as f64 / n as f64;
    println!("overall: {pass}/{n} ({:.1}%)", rate * 100.0);
    Ok(rate >= 0.95)
}

fn orbit_cameras(state: &vppsim::vpp::SceneState, n: usize) -> Vec<(String, Camera)> {
    let mut centroid = vppsim::math::Vec3::ZERO;
    let mut count = 0usize;
    for obj in &state.objects {
        for p in &obj.particles {
            centroid += p.position;
            count += 1;
        }
    }
    for b in &state.background {
        centroid += b.position;
        count += 1;
    }
    if count > 0 {
        centroid = centroid / count as f64;
    }
    (0..n)
        .map(|i| {
            let angle = i as f64 / n as f64 * std::f64::consts::TAU;
            let eye = centroid + vec3(angle.cos(), angle.sin(), 0.3);
            let (rotation, translation) = Camera::look_at(eye, centroid, vec3(0.0, 0.0, 1.0));
            let cam = Camera {
                fx: 160.0,
                fy: 160.0,
                cx: 64.0,
                cy: 64.0,
                rotation,
                translation,
                width: 128,
                height: 128,
                near: 0.01,
            };
            (format!("orbit{i}"), cam)
        })
        .collect()
}

fn cmd_replay(args: &ReplayArgs) -> Result<()> {
    init_threads(args.threads);
    let state = vppsim::checkpoint::load(&args.checkpoint)?;
    let mut cams: Vec<(String, Camera)> = Vec::new();
    if let Some(n) = args.orbit {
        cams.extend(orbit_cameras(&state, n));
    }
    let mut clear = [0.0; 3];
    if let Some(path) = &args.scenario {
        let scenario = load_scenario(path)?;
        clear = scenario.background.clear_color;
        let built = scenario.build_cameras();
        match &args.camera {
            Some(name) => {
                let cam = built
                    .iter()
                    .find(|(n, _, _)| n == name)
                    .ok_or_else(|| VppError::invalid(format!("no camera named '{name}' in the scenario")))?;
                cams.push((cam.0.clone(), cam.2));
            }
            None => {
                for (name, role, cam) in &built {
                    if *role == vppsim::optimize::ViewRole::Frontal {
                        cams.push((name.clone(), *cam));
                    }
                }
            }
        }
    }
    if cams.is_empty() {
        return Err(VppError::invalid("replay needs --scenario (with optional --camera) or --orbit N"));
    }
    std::fs::create_dir_all(&args.out)?;
    // render the stored state at its own clock; the clear color comes from
    // the scenario when given, else black
    for (name, cam) in &cams {
        let frame = render(&state, None, cam, Layer::Full, clear);
        imageio::write_ppm(&args.out.join(format!("{name}.ppm")), frame.width, frame.height, &frame.rgb)?;
    }
    println!("{}", args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(args) => cmd_run(args).map(|()| true),
        Command::Validate { scenario } => cmd_validate(scenario).map(|()| true),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Replay(args) => cmd_replay(args).map(|()| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
