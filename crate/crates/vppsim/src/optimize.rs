//! Backward pass: Eq.-style photometric + consistency losses, analytic
//! gradients through the compositing chain, and the progressive multi-view
//! Adam schedule.

use crate::math::Vec3;
use crate::physics::Trajectory;
use crate::refiner::{RefineRequest, Refiner};
use crate::render::{
    project_visible, rasterize, rasterize_backward, Camera, SplatInput, MASK_THRESHOLD,
};
use crate::vpp::{squash, BackgroundGaussian, VppGaussian};
use crate::{Result, VppError};
use serde::{Deserialize, Serialize};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const SSIM_SIGMA: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub offset: f64,
    pub color: f64,
    pub opacity: f64,
    pub temporal: f64,
    pub rotation: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        // temporal 10x lower: those gradients are ill-conditioned for wide gates
        LearningRates { offset: 0.01, color: 0.01, opacity: 0.01, temporal: 0.001, rotation: 0.001 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    Analytic,
    Numeric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lambda_sim: f64,
    pub l1_weight: f64,
    pub ssim_weight: f64,
    pub ssim_window: usize,
    pub learning_rates: LearningRates,
    pub iterations_per_stage: usize,
    pub gradient_mode: GradientMode,
    pub seed: u64,
    pub clear_color: [f64; 3],
    pub w_front: f64,
    pub w_side: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lambda_sim: 1.0,
            l1_weight: 0.8,
            ssim_weight: 0.2,
            ssim_window: 11,
            learning_rates: LearningRates::default(),
            iterations_per_stage: 300,
            gradient_mode: GradientMode::Analytic,
            seed: 0,
            clear_color: [0.0; 3],
            w_front: 1.0,
            w_side: 0.4,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if (self.l1_weight + self.ssim_weight - 1.0).abs() > 1e-12 {
            return Err(VppError::config("l1_weight + ssim_weight must equal 1"));
        }
        if self.lambda_sim < 0.0 {
            return Err(VppError::config("lambda_sim must be >= 0"));
        }
        if self.ssim_window % 2 == 0 || self.ssim_window == 0 {
            return Err(VppError::config("ssim_window must be odd"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewRole {
    Frontal,
    Left,
    Right,
}

#[derive(Debug, Clone)]
pub struct ViewTarget {
    pub camera: Camera,
    /// one H*W*3 buffer per rendered frame
    pub frames: Vec<Vec<f64>>,
    pub control_weight: f64,
    pub view_role: ViewRole,
}

/// One action window under optimization: per-frame particle positions plus
/// a canonical attribute set (gaussians of the first stored state).
#[derive(Debug, Clone)]
pub struct WindowScene {
    pub trajectory: Trajectory,
}

impl WindowScene {
    pub fn new(trajectory: Trajectory) -> WindowScene {
        WindowScene { trajectory }
    }

    pub fn frame_count(&self) -> usize {
        self.trajectory.frame_count()
    }

    pub fn canonical(&self) -> &crate::vpp::SceneState {
        &self.trajectory.states[0]
    }

    /// Splats for frame `f`: canonical attributes over the particle positions
    /// of post-step sample `f+1` (frame 0 is the state after the first stride,
    /// the last frame is the window boundary). Returns (background,
    /// foreground) lists in canonical order.
    pub fn frame_splats(&self, f: usize) -> (Vec<SplatInput>, Vec<SplatInput>) {
        let canon = self.canonical();
        let cur = &self.trajectory.states[f + 1];
        let nxt = self.trajectory.states.get(f + 2);
        let bg: Vec<SplatInput> = canon
            .background
            .iter()
            .map(|b| SplatInput {
                pos: b.position,
                pos_next: b.position,
                color: b.color,
                spatial_opacity: b.spatial_opacity,
                temporal_center: b.temporal_center,
                temporal_duration: b.temporal_duration,
                scale: b.scale,
                foreground: false,
            })
            .collect();
        let mut fg = Vec::new();
        for (oi, obj) in canon.objects.iter().enumerate() {
            let k = obj.gaussians_per_particle;
            for j in 0..obj.particles.len() {
                for kk in 0..k {
                    let g = &obj.gaussians[j * k + kk];
                    let off = g.raw_offset.map(squash) * obj.particle_size;
                    let pos = cur.objects[oi].particles[j].position + off;
                    let pos_next = match nxt {
                        Some(n) => n.objects[oi].particles[j].position + off,
                        None => pos,
                    };
                    fg.push(SplatInput {
                        pos,
                        pos_next,
                        color: g.color,
                        spatial_opacity: g.spatial_opacity,
                        temporal_center: g.temporal_center,
                        temporal_duration: g.temporal_duration,
                        scale: g.scale,
                        foreground: true,
                    });
                }
            }
        }
        (bg, fg)
    }
}

// ---------------------------------------------------------------------------
// parameter packing

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Offset,
    Color,
    Opacity,
    Temporal,
    Rotation,
}

const BG_STRIDE: usize = 3 + 1 + 1 + 1 + 4; // color, o_s, mu_t, s_d, rot
const FG_STRIDE: usize = 3 + BG_STRIDE; // + raw offset

fn pack_bg(out: &mut Vec<f64>, b: &BackgroundGaussian) {
    out.extend_from_slice(&b.color);
    out.push(b.spatial_opacity);
    out.push(b.temporal_center);
    out.push(b.temporal_duration);
    out.extend_from_slice(&[b.rotation.w, b.rotation.x, b.rotation.y, b.rotation.z]);
}

fn pack_fg(out: &mut Vec<f64>, g: &VppGaussian) {
    out.extend_from_slice(&[g.raw_offset.x, g.raw_offset.y, g.raw_offset.z]);
    out.extend_from_slice(&g.color);
    out.push(g.spatial_opacity);
    out.push(g.temporal_center);
    out.push(g.temporal_duration);
    out.extend_from_slice(&[g.rotation.w, g.rotation.x, g.rotation.y, g.rotation.z]);
}

pub fn pack_params(scene: &WindowScene) -> Vec<f64> {
    let canon = scene.canonical();
    let mut out = Vec::new();
    for b in &canon.background {
        pack_bg(&mut out, b);
    }
    for obj in &canon.objects {
        for g in &obj.gaussians {
            pack_fg(&mut out, g);
        }
    }
    out
}

pub fn unpack_params(scene: &mut WindowScene, params: &[f64]) {
    let canon = &mut scene.trajectory.states[0];
    let mut i = 0;
    for b in &mut canon.background {
        b.color = [params[i], params[i + 1], params[i + 2]];
        b.spatial_opacity = params[i + 3];
        b.temporal_center = params[i + 4];
        b.temporal_duration = params[i + 5];
        b.rotation = crate::math::Quat::new(params[i + 6], params[i + 7], params[i + 8], params[i + 9]);
        i += BG_STRIDE;
    }
    for obj in &mut canon.objects {
        for g in &mut obj.gaussians {
            g.raw_offset = crate::math::vec3(params[i], params[i + 1], params[i + 2]);
            g.color = [params[i + 3], params[i + 4], params[i + 5]];
            g.spatial_opacity = params[i + 6];
            g.temporal_center = params[i + 7];
            g.temporal_duration = params[i + 8];
            g.rotation =
                crate::math::Quat::new(params[i + 9], params[i + 10], params[i + 11], params[i + 12]);
            i += FG_STRIDE;
        }
    }
    debug_assert_eq!(i, params.len());
}

/// Attribute group per packed parameter, for the per-group learning rates.
pub fn param_groups(scene: &WindowScene) -> Vec<ParamGroup> {
    use ParamGroup::*;
    let canon = scene.canonical();
    let mut out = Vec::new();
    let bg_layout = [Color, Color, Color, Opacity, Temporal, Temporal, Rotation, Rotation, Rotation, Rotation];
    let fg_layout = [
        Offset, Offset, Offset, Color, Color, Color, Opacity, Temporal, Temporal, Rotation, Rotation,
        Rotation, Rotation,
    ];
    for _ in &canon.background {
        out.extend_from_slice(&bg_layout);
    }
    let total_fg: usize = canon.objects.iter().map(|o| o.gaussians.len()).sum();
    for _ in 0..total_fg {
        out.extend_from_slice(&fg_layout);
    }
    out
}

// ---------------------------------------------------------------------------
// photometric loss (L1 + SSIM)

/// Separable Gaussian filter with renormalized (in-bounds-only) borders.
struct SsimFilter {
    k: Vec<f64>,
    radius: usize,
    zx: Vec<f64>,
    zy: Vec<f64>,
}

impl SsimFilter {
    fn new(window: usize, width: usize, height: usize) -> SsimFilter {
        let radius = window / 2;
        let mut k = Vec::with_capacity(window);
        for i in 0..window {
            let d = i as f64 - radius as f64;
            k.push((-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
        let s: f64 = k.iter().sum();
        for v in &mut k {
            *v /= s;
        }
        let z_axis = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|i| {
                    let lo = i.saturating_sub(radius);
                    let hi = (i + radius).min(n - 1);
                    (lo..=hi).map(|j| k[j + radius - i]).sum()
                })
                .collect()
        };
        let (zx, zy) = (z_axis(width), z_axis(height));
        SsimFilter { k, radius, zx, zy }
    }

    /// Normalized blur (borders renormalized so weights always sum to 1).
    fn blur(&self, img: &[f64], w: usize, h: usize) -> Vec<f64> {
        let tmp = self.pass_x(img, w, h, true);
        self.pass_y(&tmp, w, h, true)
    }

    /// Transpose of `blur`: scatters a field back through the same weights.
    fn blur_t(&self, field: &[f64], w: usize, h: usize) -> Vec<f64> {
        let mut pre = field.to_vec();
        for y in 0..h {
            for x in 0..w {
                pre[y * w + x] /= self.zx[x] * self.zy[y];
            }
        }
        let tmp = self.pass_y(&pre, w, h, false);
        self.pass_x(&tmp, w, h, false)
    }

    fn pass_x(&self, img: &[f64], w: usize, h: usize, normalize: bool) -> Vec<f64> {
        let r = self.radius as isize;
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for o in -r..=r {
                    let xx = x as isize + o;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    acc += self.k[(o + r) as usize] * img[y * w + xx as usize];
                }
                out[y * w + x] = if normalize { acc / self.zx[x] } else { acc };
            }
        }
        out
    }

    fn pass_y(&self, img: &[f64], w: usize, h: usize, normalize: bool) -> Vec<f64> {
        let r = self.radius as isize;
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for o in -r..=r {
                    let yy = y as isize + o;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    acc += self.k[(o + r) as usize] * img[yy as usize * w + x];
                }
                out[y * w + x] = if normalize { acc / self.zy[y] } else { acc };
            }
        }
        out
    }
}

fn channel(img: &[f64], c: usize) -> Vec<f64> {
    img.iter().skip(c).step_by(3).copied().collect()
}

/// l1_weight * mean|r-t| + ssim_weight * (1 - SSIM), restricted to the mask.
/// Returns 0 on an empty mask.
pub fn photometric_loss(
    rendered: &[f64],
    target: &[f64],
    mask: &[bool],
    width: usize,
    height: usize,
    config: &OptimConfig,
) -> Result<f64> {
    let (loss, _) = photometric_loss_grad(rendered, target, mask, width, height, config, false)?;
    Ok(loss)
}

/// Loss plus (optionally) its gradient with respect to the rendered image.
pub fn photometric_loss_grad(
    rendered: &[f64],
    target: &[f64],
    mask: &[bool],
    width: usize,
    height: usize,
    config: &OptimConfig,
    want_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let n = width * height;
    if rendered.len() != n * 3 || target.len() != n * 3 || mask.len() != n {
        return Err(VppError::invalid("photometric loss images must share one resolution"));
    }
    let m: usize = mask.iter().filter(|&&b| b).count();
    if m == 0 {
        return Ok((0.0, vec![0.0; n * 3]));
    }
    let mf = m as f64;

    let mut grad = vec![0.0; n * 3];
    // L1 over masked pixel-channels
    let mut l1 = 0.0;
    for p in 0..n {
        if !mask[p] {
            continue;
        }
        for c in 0..3 {
            let d = rendered[p * 3 + c] - target[p * 3 + c];
            l1 += d.abs();
            if want_grad && d != 0.0 {
                // note f64::signum(0.0) is 1.0, not 0.0
                grad[p * 3 + c] += config.l1_weight * d.signum() / (mf * 3.0);
            }
        }
    }
    l1 /= mf * 3.0;

    // SSIM on mask-premultiplied images (A*M vs V*M), masked mean of the map;
    // premultiplying keeps windows that straddle the mask boundary from
    // leaking residuals into the restricted region
    let filt = SsimFilter::new(config.ssim_window, width, height);
    let mut ssim_sum = 0.0;
    for c in 0..3 {
        let mut x = channel(rendered, c);
        let mut y = channel(target, c);
        for p in 0..n {
            if !mask[p] {
                x[p] = 0.0;
                y[p] = 0.0;
            }
        }
        let mu_x = filt.blur(&x, width, height);
        let mu_y = filt.blur(&y, width, height);
        let xx = filt.blur(&x.iter().map(|v| v * v).collect::<Vec<_>>(), width, height);
        let yy = filt.blur(&y.iter().map(|v| v * v).collect::<Vec<_>>(), width, height);
        let xy = filt.blur(&x.iter().zip(&y).map(|(a, b)| a * b).collect::<Vec<_>>(), width, height);

        let mut f_mu = vec![0.0; n];
        let mut f_var = vec![0.0; n];
        let mut f_cov = vec![0.0; n];
        for p in 0..n {
            let sx = xx[p] - mu_x[p] * mu_x[p];
            let sy = yy[p] - mu_y[p] * mu_y[p];
            let sxy = xy[p] - mu_x[p] * mu_y[p];
            let a1 = 2.0 * mu_x[p] * mu_y[p] + SSIM_C1;
            let a2 = 2.0 * sxy + SSIM_C2;
            let b1 = mu_x[p] * mu_x[p] + mu_y[p] * mu_y[p] + SSIM_C1;
            let b2 = sx + sy + SSIM_C2;
            let s = (a1 * a2) / (b1 * b2);
            if mask[p] {
                ssim_sum += s;
                if want_grad {
                    // d(1-S) contribution, scaled by the masked-mean weight
                    let cf = -config.ssim_weight / (mf * 3.0);
                    f_mu[p] = cf * (2.0 * mu_y[p] * a2 / (b1 * b2) - 2.0 * mu_x[p] * s / b1);
                    f_var[p] = cf * (-s / b2);
                    f_cov[p] = cf * (2.0 * a1 / (b1 * b2));
                }
            }
        }
        if want_grad {
            let t_mu = filt.blur_t(&f_mu, width, height);
            let t_var = filt.blur_t(&f_var, width, height);
            let t_var_mux = filt.blur_t(
                &f_var.iter().zip(&mu_x).map(|(a, b)| a * b).collect::<Vec<_>>(),
                width,
                height,
            );
            let t_cov = filt.blur_t(&f_cov, width, height);
            let t_cov_muy = filt.blur_t(
                &f_cov.iter().zip(&mu_y).map(|(a, b)| a * b).collect::<Vec<_>>(),
                width,
                height,
            );
            for p in 0..n {
                if !mask[p] {
                    continue; // premultiplied input is constant 0 there
                }
                grad[p * 3 + c] += t_mu[p] + 2.0 * x[p] * t_var[p] - 2.0 * t_var_mux[p]
                    + y[p] * t_cov[p]
                    - t_cov_muy[p];
            }
        }
    }
    let ssim_mean = ssim_sum / (mf * 3.0);
    Ok((config.l1_weight * l1 + config.ssim_weight * (1.0 - ssim_mean), grad))
}

// ---------------------------------------------------------------------------
// simulation consistency (Eq.-4 style)

/// (1/(T*J)) sum_t sum_j || p_{j,t} - mean_k mu_{j,k,t} ||^2
pub fn sim_consistency_loss(particles: &[Vec<Vec3>], gaussians: &[Vec<Vec<Vec3>>]) -> Result<f64> {
    if particles.len() != gaussians.len() {
        return Err(VppError::invalid("frame counts differ"));
    }
    let t_count = particles.len();
    if t_count == 0 {
        return Err(VppError::invalid("need at least one frame"));
    }
    let j_count = particles[0].len();
    let mut total = 0.0;
    for (pt, gt) in particles.iter().zip(gaussians) {
        if pt.len() != j_count || gt.len() != j_count {
            return Err(VppError::invalid("particle counts differ across frames"));
        }
        for (p, g) in pt.iter().zip(gt) {
            if g.is_empty() {
                return Err(VppError::invalid("particle without gaussians"));
            }
            let mut mean = Vec3::ZERO;
            for mu in g {
                mean += *mu;
            }
            mean = mean / g.len() as f64;
            total += (*p - mean).norm_sq();
        }
    }
    Ok(total / (t_count as f64 * j_count as f64))
}

/// Same quantity evaluated on a window scene: canonical offsets are constant
/// across frames, so the per-frame deviation reduces to the per-particle
/// centroid of the squashed offsets.
pub fn window_sim_loss(scene: &WindowScene) -> f64 {
    let canon = scene.canonical();
    let j_total: usize = canon.objects.iter().map(|o| o.particles.len()).sum();
    if j_total == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for obj in &canon.objects {
        let k = obj.gaussians_per_particle;
        for j in 0..obj.particles.len() {
            let mut mean = Vec3::ZERO;
            for kk in 0..k {
                mean += obj.gaussians[j * k + kk].raw_offset.map(squash);
            }
            mean = mean * (obj.particle_size / k as f64);
            total += mean.norm_sq();
        }
    }
    total / j_total as f64
}

// ---------------------------------------------------------------------------
// total loss and gradients

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossParts {
    pub total: f64,
    pub photometric: f64,
    pub sim: f64,
}

fn frame_masks(
    scene: &WindowScene,
    camera: &Camera,
    f: usize,
) -> (Vec<SplatInput>, Vec<SplatInput>, crate::render::RenderBuffers, Vec<bool>) {
    let (bg, fg) = scene.frame_splats(f);
    let time = scene.trajectory.states[f + 1].sim_time;
    let vis_fg = project_visible(&fg, time, camera);
    let buf_fg = rasterize(&vis_fg, camera, [0.0; 3], false);
    let mask: Vec<bool> = buf_fg.alpha.iter().map(|&a| a > MASK_THRESHOLD).collect();
    (bg, fg, buf_fg, mask)
}

pub fn total_loss(scene: &WindowScene, targets: &[ViewTarget], config: &OptimConfig) -> Result<LossParts> {
    config.validate()?;
    if targets.is_empty() {
        return Err(VppError::invalid("need at least one view target"));
    }
    let frames = scene.frame_count();
    let mut photo = 0.0;
    for t in targets {
        if t.frames.len() != frames {
            return Err(VppError::invalid("target frame count does not match the window"));
        }
        for f in 0..frames {
            let (bg, _fg, buf_fg, mask) = frame_masks(scene, &t.camera, f);
            let time = scene.trajectory.states[f + 1].sim_time;
            let vis_bg = project_visible(&bg, time, &t.camera);
            let buf_bg = rasterize(&vis_bg, &t.camera, config.clear_color, false);
            let inv_mask: Vec<bool> = mask.iter().map(|&m| !m).collect();
            let (w, h) = (t.camera.width, t.camera.height);
            photo += photometric_loss(&buf_bg.rgb, &t.frames[f], &inv_mask, w, h, config)?;
            photo += photometric_loss(&buf_fg.rgb, &t.frames[f], &mask, w, h, config)?;
        }
    }
    photo /= (targets.len() * frames) as f64;
    let sim = window_sim_loss(scene);
    Ok(LossParts { total: photo + config.lambda_sim * sim, photometric: photo, sim })
}

/// Gradient of `total_loss` over the packed parameter vector.
pub fn gradients(scene: &WindowScene, targets: &[ViewTarget], config: &OptimConfig) -> Result<Vec<f64>> {
    match config.gradient_mode {
        GradientMode::Analytic => analytic_gradients(scene, targets, config),
        GradientMode::Numeric => numeric_gradients(scene, targets, config),
    }
}

pub fn numeric_gradients(
    scene: &WindowScene,
    targets: &[ViewTarget],
    config: &OptimConfig,
) -> Result<Vec<f64>> {
    let base = pack_params(scene);
    let mut grad = vec![0.0; base.len()];
    let h = 1e-4;
    let mut work = scene.clone();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        unpack_params(&mut work, &plus);
        let lp = total_loss(&work, targets, config)?.total;
        let mut minus = base.clone();
        minus[i] -= h;
        unpack_params(&mut work, &minus);
        let lm = total_loss(&work, targets, config)?.total;
        grad[i] = (lp - lm) / (2.0 * h);
    }
    Ok(grad)
}

fn analytic_gradients(
    scene: &WindowScene,
    targets: &[ViewTarget],
    config: &OptimConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    if targets.is_empty() {
        return Err(VppError::invalid("need at least one view target"));
    }
    let canon = scene.canonical();
    let n_bg = canon.background.len();
    let n_params = pack_params(scene).len();
    let mut grad = vec![0.0; n_params];
    let frames = scene.frame_count();
    let norm = 1.0 / (targets.len() * frames) as f64;

    // (delta, sech^2 weights) per foreground splat, for offset chain rule
    struct FgMeta {
        param_base: usize,
        delta: f64,
        raw: Vec3,
    }
    let mut fg_meta = Vec::new();
    {
        let mut base = n_bg * BG_STRIDE;
        for obj in &canon.objects {
            for g in &obj.gaussians {
                fg_meta.push(FgMeta { param_base: base, delta: obj.particle_size, raw: g.raw_offset });
                base += FG_STRIDE;
            }
        }
    }

    for t in targets {
        if t.frames.len() != frames {
            return Err(VppError::invalid("target frame count does not match the window"));
        }
        let (w, h) = (t.camera.width, t.camera.height);
        for f in 0..frames {
            let (bg, fg, _buf, mask) = frame_masks(scene, &t.camera, f);
            let time = scene.trajectory.states[f + 1].sim_time;
            let inv_mask: Vec<bool> = mask.iter().map(|&m| !m).collect();

            // background layer against the mask complement
            let vis_bg = project_visible(&bg, time, &t.camera);
            let buf_bg = rasterize(&vis_bg, &t.camera, config.clear_color, true);
            let (_, d_rgb_bg) =
                photometric_loss_grad(&buf_bg.rgb, &t.frames[f], &inv_mask, w, h, config, true)?;
            let g_bg = rasterize_backward(&buf_bg, bg.len(), time, &t.camera, config.clear_color, &d_rgb_bg);
            for (bi, sg) in g_bg.iter().enumerate() {
                let base = bi * BG_STRIDE;
                for c in 0..3 {
                    grad[base + c] += norm * sg.d_color[c];
                }
                grad[base + 3] += norm * sg.d_spatial_opacity;
                grad[base + 4] += norm * sg.d_temporal_center;
                grad[base + 5] += norm * sg.d_temporal_duration;
                // background positions are not optimizable; d_pos dropped
            }

            // foreground layer against the mask
            let vis_fg = project_visible(&fg, time, &t.camera);
            let buf_fg = rasterize(&vis_fg, &t.camera, [0.0; 3], true);
            let (_, d_rgb_fg) =
                photometric_loss_grad(&buf_fg.rgb, &t.frames[f], &mask, w, h, config, true)?;
            let g_fg = rasterize_backward(&buf_fg, fg.len(), time, &t.camera, [0.0; 3], &d_rgb_fg);
            for (fi, sg) in g_fg.iter().enumerate() {
                let meta = &fg_meta[fi];
                let base = meta.param_base;
                // world position -> raw offset through mu = p + tanh(raw)*delta
                let sech2 = meta.raw.map(|u| {
                    let th = u.tanh();
                    1.0 - th * th
                });
                grad[base] += norm * sg.d_pos.x * meta.delta * sech2.x;
                grad[base + 1] += norm * sg.d_pos.y * meta.delta * sech2.y;
                grad[base + 2] += norm * sg.d_pos.z * meta.delta * sech2.z;
                for c in 0..3 {
                    grad[base + 3 + c] += norm * sg.d_color[c];
                }
                grad[base + 6] += norm * sg.d_spatial_opacity;
                grad[base + 7] += norm * sg.d_temporal_center;
                grad[base + 8] += norm * sg.d_temporal_duration;
            }
        }
    }

    // consistency term: lambda/(J) * || delta * mean_k tanh(raw) ||^2 per particle
    let j_total: usize = canon.objects.iter().map(|o| o.particles.len()).sum();
    if j_total > 0 && config.lambda_sim > 0.0 {
        let mut fg_index = 0;
        for obj in &canon.objects {
            let k = obj.gaussians_per_particle;
            for j in 0..obj.particles.len() {
                let mut mean = Vec3::ZERO;
                for kk in 0..k {
                    mean += obj.gaussians[j * k + kk].raw_offset.map(squash);
                }
                let e = mean * (obj.particle_size / k as f64);
                for kk in 0..k {
                    let meta = &fg_meta[fg_index + kk];
                    let sech2 = meta.raw.map(|u| {
                        let th = u.tanh();
                        1.0 - th * th
                    });
                    let coef = config.lambda_sim * 2.0 * obj.particle_size
                        / (k as f64 * j_total as f64);
                    grad[meta.param_base] += coef * e.x * sech2.x;
                    grad[meta.param_base + 1] += coef * e.y * sech2.y;
                    grad[meta.param_base + 2] += coef * e.z * sech2.z;
                }
                fg_index += k;
            }
        }
    }
    Ok(grad)
}

// ---------------------------------------------------------------------------
// Adam + stages

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossRecord {
    pub stage: usize,
    pub iteration: usize,
    pub total: f64,
    pub photometric: f64,
    pub sim: f64,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl Adam {
    fn new(n: usize) -> Adam {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lrs: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grads[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grads[i] * grads[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lrs[i] * mh / (vh.sqrt() + EPS);
        }
    }
}

/// Bounds projection after each step: quaternions renormalized, opacities and
/// colors clamped to [0,1], durations floored at 1e-3 s.
fn project_bounds(scene: &mut WindowScene) {
    let canon = &mut scene.trajectory.states[0];
    for b in &mut canon.background {
        b.rotation = b.rotation.normalized();
        b.spatial_opacity = b.spatial_opacity.clamp(0.0, 1.0);
        for c in &mut b.color {
            *c = c.clamp(0.0, 1.0);
        }
        b.temporal_duration = b.temporal_duration.max(1e-3);
    }
    for obj in &mut canon.objects {
        for g in &mut obj.gaussians {
            g.rotation = g.rotation.normalized();
            g.spatial_opacity = g.spatial_opacity.clamp(0.0, 1.0);
            for c in &mut g.color {
                *c = c.clamp(0.0, 1.0);
            }
            g.temporal_duration = g.temporal_duration.max(1e-3);
        }
    }
}

fn assert_bounds(scene: &WindowScene) {
    let canon = scene.canonical();
    for b in &canon.background {
        assert!((b.rotation.norm() - 1.0).abs() <= 1e-9);
        assert!((0.0..=1.0).contains(&b.spatial_opacity));
        assert!(b.temporal_duration > 0.0);
    }
    for obj in &canon.objects {
        for g in &obj.gaussians {
            assert!((g.rotation.norm() - 1.0).abs() <= 1e-9);
            assert!((0.0..=1.0).contains(&g.spatial_opacity));
            assert!(g.temporal_duration > 0.0);
        }
    }
}

/// Adam over the optimizable set; records loss per iteration and never
/// returns parameters worse than the best recorded state.
pub fn optimize_stage(
    scene: &mut WindowScene,
    targets: &[ViewTarget],
    config: &OptimConfig,
    iterations: usize,
    stage: usize,
) -> Result<Vec<LossRecord>> {
    config.validate()?;
    if iterations == 0 {
        return Ok(Vec::new());
    }
    let groups = param_groups(scene);
    let lrs: Vec<f64> = groups
        .iter()
        .map(|g| match g {
            ParamGroup::Offset => config.learning_rates.offset,
            ParamGroup::Color => config.learning_rates.color,
            ParamGroup::Opacity => config.learning_rates.opacity,
            ParamGroup::Temporal => config.learning_rates.temporal,
            ParamGroup::Rotation => config.learning_rates.rotation,
        })
        .collect();
    let mut params = pack_params(scene);
    let mut adam = Adam::new(params.len());
    let mut history = Vec::with_capacity(iterations);
    let mut best = (f64::INFINITY, params.clone());
    for it in 0..iterations {
        let parts = total_loss(scene, targets, config)?;
        if !parts.total.is_finite() {
            return Err(VppError::OptimizerDiverged { iteration: it, detail: "loss is not finite".into() });
        }
        history.push(LossRecord {
            stage,
            iteration: it,
            total: parts.total,
            photometric: parts.photometric,
            sim: parts.sim,
        });
        if parts.total < best.0 {
            best = (parts.total, params.clone());
        }
        let g = gradients(scene, targets, config)?;
        adam.step(&mut params, &g, &lrs);
        unpack_params(scene, &params);
        project_bounds(scene);
        params = pack_params(scene);
        assert_bounds(scene);
    }
    let final_parts = total_loss(scene, targets, config)?;
    if final_parts.total.is_finite() && final_parts.total < best.0 {
        best = (final_parts.total, params);
    }
    unpack_params(scene, &best.1);
    project_bounds(scene);
    Ok(history)
}

#[derive(Debug, Clone, Serialize)]
pub struct ProgressiveResult {
    pub history: Vec<LossRecord>,
    pub events: Vec<String>,
}

/// Stage 1: refine + optimize frontal. Stage 2: refine side views of the
/// current scene at the lower control weight. Stage 3: joint optimization.
pub fn progressive_optimize(
    scene: &mut WindowScene,
    refiner: &Refiner,
    cameras: &[(String, ViewRole, Camera)],
    window_index: usize,
    config: &OptimConfig,
) -> Result<ProgressiveResult> {
    config.validate()?;
    let frontal = cameras
        .iter()
        .find(|(_, role, _)| *role == ViewRole::Frontal)
        .ok_or_else(|| VppError::invalid("a frontal camera is required"))?;
    let mut events = Vec::new();
    let mut history = Vec::new();

    let refine_view = |scene: &WindowScene, name: &str, cam: &Camera, weight: f64| -> Result<Vec<Vec<f64>>> {
        let frames = scene.frame_count();
        let mut rgb = Vec::with_capacity(frames);
        let mut flow = Vec::with_capacity(frames);
        for f in 0..frames {
            let (bg, fg) = scene.frame_splats(f);
            let mut all = bg;
            all.extend(fg);
            let time = scene.trajectory.states[f + 1].sim_time;
            let vis = project_visible(&all, time, cam);
            let buf = rasterize(&vis, cam, config.clear_color, false);
            rgb.push(buf.rgb);
            flow.push(buf.flow);
        }
        let request = RefineRequest {
            view_id: name.to_string(),
            window_index,
            control_weight: weight,
            prompt: String::new(),
            width: cam.width,
            height: cam.height,
            coarse_rgb: rgb,
            coarse_flow: flow,
        };
        refiner.refine(&request).map_err(|e| match e {
            VppError::RefinerUnavailable { context, detail } => VppError::RefinerUnavailable {
                context: format!("view {name}: {context}"),
                detail,
            },
            other => other,
        })
    };

    // stage 1: frontal
    let (f_name, _, f_cam) = frontal;
    events.push(format!("frontal-refine:{f_name}"));
    let frontal_frames = refine_view(scene, f_name, f_cam, config.w_front)?;
    let frontal_target = ViewTarget {
        camera: *f_cam,
        frames: frontal_frames,
        control_weight: config.w_front,
        view_role: ViewRole::Frontal,
    };
    events.push("stage-1-opt".to_string());
    history.extend(optimize_stage(scene, std::slice::from_ref(&frontal_target), config, config.iterations_per_stage, 1)?);

    // stage 2: side refines on the current (stage-1) scene
    let mut all_targets = vec![frontal_target];
    for (name, role, cam) in cameras {
        if *role == ViewRole::Frontal {
            continue;
        }
        events.push(format!("side-refine:{name}"));
        let frames = refine_view(scene, name, cam, config.w_side)?;
        all_targets.push(ViewTarget {
            camera: *cam,
            frames,
            control_weight: config.w_side,
            view_role: *role,
        });
    }

    // stage 3: joint
    events.push("stage-3-opt".to_string());
    history.extend(optimize_stage(scene, &all_targets, config, config.iterations_per_stage, 3)?);
    Ok(ProgressiveResult { history, events })
}
