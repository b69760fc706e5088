//! Time-conditioned isotropic splat rasterizer.
//!
//! Splats are composited front-to-back with truncated Gaussian footprints.
//! The forward pass can record per-pixel contributions so the optimizer can
//! run an exact analytic backward pass over the same compositing chain.

use crate::math::{vec3, Quat, Vec3};
use crate::vpp::{squash, SceneState};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const MASK_THRESHOLD: f64 = 0.5;
/// footprint truncation radius in sigmas; changes gradients at the edge
pub const FOOTPRINT_SIGMAS: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// world-to-camera
    pub rotation: Quat,
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
    pub near: f64,
}

impl Camera {
    pub fn validate(&self) -> crate::Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(crate::VppError::invalid("focal lengths must be > 0"));
        }
        if self.width < 16 || self.height < 16 {
            return Err(crate::VppError::invalid("resolution must be at least 16x16"));
        }
        if self.near <= 0.0 {
            return Err(crate::VppError::invalid("near plane must be > 0"));
        }
        if (self.rotation.norm() - 1.0).abs() > 1e-9 {
            return Err(crate::VppError::invalid("camera rotation must be unit norm"));
        }
        Ok(())
    }

    /// World-to-camera pose looking from `eye` toward `target`, z-up world.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> (Quat, Vec3) {
        let fwd = {
            let d = target - eye;
            d / d.norm()
        };
        let right = {
            let r = fwd.cross(up);
            r / r.norm()
        };
        let down = fwd.cross(right); // camera y axis points down the image
        // rows of the rotation matrix are the camera axes in world frame
        let m = [right, down, fwd];
        // matrix -> quaternion (rotation world->cam has rows right/down/fwd)
        let trace = m[0].x + m[1].y + m[2].z;
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            Quat::new(
                0.25 * s,
                (m[2].y - m[1].z) / s,
                (m[0].z - m[2].x) / s,
                (m[1].x - m[0].y) / s,
            )
        } else if m[0].x > m[1].y && m[0].x > m[2].z {
            let s = (1.0 + m[0].x - m[1].y - m[2].z).sqrt() * 2.0;
            Quat::new(
                (m[2].y - m[1].z) / s,
                0.25 * s,
                (m[0].y + m[1].x) / s,
                (m[0].z + m[2].x) / s,
            )
        } else if m[1].y > m[2].z {
            let s = (1.0 + m[1].y - m[0].x - m[2].z).sqrt() * 2.0;
            Quat::new(
                (m[0].z - m[2].x) / s,
                (m[0].y + m[1].x) / s,
                0.25 * s,
                (m[1].z + m[2].y) / s,
            )
        } else {
            let s = (1.0 + m[2].z - m[0].x - m[1].y).sqrt() * 2.0;
            Quat::new(
                (m[1].x - m[0].y) / s,
                (m[0].z + m[2].x) / s,
                (m[1].z + m[2].y) / s,
                0.25 * s,
            )
        }
        .normalized();
        let t = -q.rotate(eye);
        (q, t)
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        self.rotation.rotate(p) + self.translation
    }
}

/// Pinhole projection of an isotropic footprint. Returns
/// (pixel center, pixel sigma, depth); `None` when culled by the near plane.
pub fn project_splat(camera: &Camera, world_pos: Vec3, scale: f64) -> Option<(f64, f64, f64, f64)> {
    let pc = camera.to_camera(world_pos);
    if pc.z <= camera.near {
        return None;
    }
    let px = camera.fx * pc.x / pc.z + camera.cx;
    let py = camera.fy * pc.y / pc.z + camera.cy;
    let sigma = scale * camera.fx / pc.z;
    Some((px, py, sigma, pc.z))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Full,
    BackgroundOnly,
    ForegroundOnly,
}

/// Renderer-facing view of one splat at a frame time.
#[derive(Debug, Clone, Copy)]
pub struct SplatInput {
    pub pos: Vec3,
    pub pos_next: Vec3,
    pub color: [f64; 3],
    pub spatial_opacity: f64,
    pub temporal_center: f64,
    pub temporal_duration: f64,
    pub scale: f64,
    pub foreground: bool,
}

/// Flatten a scene snapshot (with its successor for flow) into splat inputs.
/// Ordering is stable: background first, then objects, then flat gaussian order.
pub fn collect_splats(state: &SceneState, next: Option<&SceneState>) -> Vec<SplatInput> {
    let mut out = Vec::new();
    for b in &state.background {
        out.push(SplatInput {
            pos: b.position,
            pos_next: b.position,
            color: b.color,
            spatial_opacity: b.spatial_opacity,
            temporal_center: b.temporal_center,
            temporal_duration: b.temporal_duration,
            scale: b.scale,
            foreground: false,
        });
    }
    for (oi, obj) in state.objects.iter().enumerate() {
        let k = obj.gaussians_per_particle;
        for j in 0..obj.particles.len() {
            for kk in 0..k {
                let g = &obj.gaussians[j * k + kk];
                let pos = obj.particles[j].position + g.raw_offset.map(squash) * obj.particle_size;
                let pos_next = match next {
                    Some(n) => {
                        let no = &n.objects[oi];
                        no.particles[j].position + g.raw_offset.map(squash) * no.particle_size
                    }
                    None => pos,
                };
                out.push(SplatInput {
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
    out
}

/// A projected, depth-sorted splat ready for compositing.
#[derive(Debug, Clone, Copy)]
pub struct ProjectedSplat {
    /// index into the input splat list
    pub id: usize,
    pub px: f64,
    pub py: f64,
    pub sigma: f64,
    pub depth: f64,
    pub cam: Vec3,
    pub flow: [f64; 2],
    pub color: [f64; 3],
    pub alpha_base: f64,
    pub spatial_opacity: f64,
    pub temporal: f64,
    pub temporal_center: f64,
    pub temporal_duration: f64,
}

/// One splat's footprint hit on one pixel, with the transmittance in front
/// of it at composite time. Enough to replay the chain backward exactly.
#[derive(Debug, Clone, Copy)]
pub struct Contribution {
    pub splat: u32,
    pub alpha: f64,
    pub transmittance: f64,
}

pub struct RenderBuffers {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f64>,
    pub alpha: Vec<f64>,
    pub flow: Vec<f64>,
    /// per-pixel contribution chains, front-to-back; present when recorded
    pub contribs: Option<Vec<Vec<Contribution>>>,
    pub visible: Vec<ProjectedSplat>,
}

/// Project and depth-sort the splats visible at `time`.
pub fn project_visible(splats: &[SplatInput], time: f64, camera: &Camera) -> Vec<ProjectedSplat> {
    let mut visible: Vec<ProjectedSplat> = Vec::with_capacity(splats.len());
    for (id, s) in splats.iter().enumerate() {
        let Some((px, py, sigma, depth)) = project_splat(camera, s.pos, s.scale) else {
            continue;
        };
        let ot = crate::vpp::temporal_opacity(time, s.temporal_center, s.temporal_duration)
            .unwrap_or(0.0);
        let alpha_base = (s.spatial_opacity * ot).clamp(0.0, 1.0);
        let flow = match project_splat(camera, s.pos_next, s.scale) {
            Some((nx, ny, _, _)) => [nx - px, ny - py],
            None => [0.0, 0.0],
        };
        visible.push(ProjectedSplat {
            id,
            px,
            py,
            sigma,
            depth,
            cam: camera.to_camera(s.pos),
            flow,
            color: s.color,
            alpha_base,
            spatial_opacity: s.spatial_opacity,
            temporal: ot,
            temporal_center: s.temporal_center,
            temporal_duration: s.temporal_duration,
        });
    }
    // front-to-back, ties broken by stable input index
    visible.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap().then(a.id.cmp(&b.id)));
    visible
}

/// Front-to-back compositing of the projected splats.
///
/// `fill` is blended under the residual transmittance. Rows are independent,
/// so the result is bit-identical regardless of thread count.
pub fn rasterize(
    visible: &[ProjectedSplat],
    camera: &Camera,
    fill: [f64; 3],
    record: bool,
) -> RenderBuffers {
    let (w, h) = (camera.width, camera.height);
    let mut rgb = vec![0.0; w * h * 3];
    let mut alpha = vec![0.0; w * h];
    let mut flow = vec![0.0; w * h * 2];
    let mut contribs: Option<Vec<Vec<Contribution>>> = record.then(|| vec![Vec::new(); w * h]);

    let contrib_rows: Vec<&mut [Vec<Contribution>]> = match contribs.as_mut() {
        Some(c) => c.chunks_mut(w).collect(),
        None => Vec::new(),
    };
    let do_record = !contrib_rows.is_empty();

    let rows: Vec<(usize, &mut [f64], &mut [f64], &mut [f64])> = {
        let rgb_rows = rgb.chunks_mut(w * 3);
        let alpha_rows = alpha.chunks_mut(w);
        let flow_rows = flow.chunks_mut(w * 2);
        rgb_rows
            .zip(alpha_rows.zip(flow_rows))
            .enumerate()
            .map(|(y, (r, (a, f)))| (y, r, a, f))
            .collect()
    };

    let body = |(y, rgb_row, alpha_row, flow_row): (usize, &mut [f64], &mut [f64], &mut [f64]),
                contrib_row: Option<&mut [Vec<Contribution>]>| {
        let mut trans = vec![1.0_f64; w];
        let mut crow = contrib_row;
        let fy = y as f64;
        for (vi, p) in visible.iter().enumerate() {
            let reach = FOOTPRINT_SIGMAS * p.sigma;
            if fy < p.py - reach || fy > p.py + reach || p.alpha_base == 0.0 {
                continue;
            }
            let x0 = ((p.px - reach).floor().max(0.0)) as usize;
            let x1 = ((p.px + reach).ceil().min((w - 1) as f64)) as usize;
            if x0 > x1 {
                continue;
            }
            let cutoff = reach * reach;
            let inv_2s2 = 1.0 / (2.0 * p.sigma * p.sigma);
            for x in x0..=x1 {
                let dx = x as f64 - p.px;
                let dy = fy - p.py;
                let r2 = dx * dx + dy * dy;
                if r2 > cutoff {
                    continue;
                }
                let g = (-r2 * inv_2s2).exp();
                let a = p.alpha_base * g;
                if a == 0.0 {
                    continue;
                }
                let t = trans[x];
                let wgt = a * t;
                rgb_row[x * 3] += wgt * p.color[0];
                rgb_row[x * 3 + 1] += wgt * p.color[1];
                rgb_row[x * 3 + 2] += wgt * p.color[2];
                alpha_row[x] += wgt;
                flow_row[x * 2] += wgt * p.flow[0];
                flow_row[x * 2 + 1] += wgt * p.flow[1];
                if let Some(cr) = crow.as_deref_mut() {
                    cr[x].push(Contribution {
                        splat: vi as u32,
                        alpha: a,
                        transmittance: t,
                    });
                }
                trans[x] *= 1.0 - a;
            }
        }
        for x in 0..w {
            let t = trans[x];
            rgb_row[x * 3] += t * fill[0];
            rgb_row[x * 3 + 1] += t * fill[1];
            rgb_row[x * 3 + 2] += t * fill[2];
            let a = alpha_row[x];
            if a > 0.0 {
                flow_row[x * 2] /= a;
                flow_row[x * 2 + 1] /= a;
            }
        }
    };

    if do_record {
        // recording path stays sequential; used on small optimization scenes
        let mut iter_rows = contrib_rows;
        for (row, crow) in rows.into_iter().zip(iter_rows.iter_mut()) {
            body(row, Some(crow));
        }
    } else {
        rows.into_par_iter().for_each(|row| body(row, None));
    }

    RenderBuffers {
        width: w,
        height: h,
        rgb,
        alpha,
        flow,
        contribs,
        visible: visible.to_vec(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub width: usize,
    pub height: usize,
    /// H*W*3 in [0,1]
    pub rgb: Vec<f64>,
    /// H*W*2, pixels/frame
    pub flow: Vec<f64>,
    /// H*W
    pub mask: Vec<bool>,
    /// H*W
    pub alpha: Vec<f64>,
    pub time: f64,
}

/// Render a snapshot pair into RGB/flow/mask/alpha for one camera.
pub fn render(
    state: &SceneState,
    next: Option<&SceneState>,
    camera: &Camera,
    layer: Layer,
    clear_color: [f64; 3],
) -> RenderedFrame {
    let splats = collect_splats(state, next);
    let time = state.sim_time;
    let selected: Vec<SplatInput> = splats
        .iter()
        .filter(|s| match layer {
            Layer::Full => true,
            Layer::BackgroundOnly => !s.foreground,
            Layer::ForegroundOnly => s.foreground,
        })
        .copied()
        .collect();
    let fill = if layer == Layer::ForegroundOnly {
        [0.0; 3] // compared against mask-restricted targets; no clear color under foreground
    } else {
        clear_color
    };
    let vis = project_visible(&selected, time, camera);
    let buf = rasterize(&vis, camera, fill, false);

    // mask always comes from the foreground-only alpha
    let fg_alpha: Vec<f64> = if layer == Layer::ForegroundOnly {
        buf.alpha.clone()
    } else {
        let fg: Vec<SplatInput> = splats.iter().filter(|s| s.foreground).copied().collect();
        let vis_fg = project_visible(&fg, time, camera);
        rasterize(&vis_fg, camera, [0.0; 3], false).alpha
    };
    let mask = fg_alpha.iter().map(|&a| a > MASK_THRESHOLD).collect();

    RenderedFrame {
        width: camera.width,
        height: camera.height,
        rgb: buf.rgb,
        flow: buf.flow,
        mask,
        alpha: buf.alpha,
        time,
    }
}

/// One frame per stored post-step sample (49 at defaults); the last frame is
/// the window boundary.
pub fn render_video(
    trajectory: &crate::physics::Trajectory,
    camera: &Camera,
    clear_color: [f64; 3],
) -> Vec<RenderedFrame> {
    (0..trajectory.frame_count())
        .map(|f| {
            render(
                &trajectory.states[f + 1],
                trajectory.states.get(f + 2),
                camera,
                Layer::Full,
                clear_color,
            )
        })
        .collect()
}

/// Gradients flowing back to one splat from the compositing chain.
#[derive(Debug, Clone, Copy, Default)]
pub struct SplatGrad {
    pub d_pos: Vec3,
    pub d_color: [f64; 3],
    pub d_spatial_opacity: f64,
    pub d_temporal_center: f64,
    pub d_temporal_duration: f64,
}

/// Backward pass through the recorded compositing chain.
///
/// `d_rgb` is dL/d(pixel rgb), H*W*3. Returns one gradient per input splat
/// (indexed like the `SplatInput` list that produced `buffers.visible`).
pub fn rasterize_backward(
    buffers: &RenderBuffers,
    splats_len: usize,
    time: f64,
    camera: &Camera,
    fill: [f64; 3],
    d_rgb: &[f64],
) -> Vec<SplatGrad> {
    let contribs = buffers
        .contribs
        .as_ref()
        .expect("rasterize must be called with record=true before backward");
    let (w, h) = (buffers.width, buffers.height);
    assert_eq!(d_rgb.len(), w * h * 3);

    // accumulated per visible splat: d_px, d_py, d_sigma and direct params
    let nvis = buffers.visible.len();
    let mut d_px = vec![0.0; nvis];
    let mut d_py = vec![0.0; nvis];
    let mut d_sigma = vec![0.0; nvis];
    let mut grads = vec![SplatGrad::default(); splats_len];

    for y in 0..h {
        for x in 0..w {
            let pix = y * w + x;
            let chain = &contribs[pix];
            if chain.is_empty() {
                continue;
            }
            let g = [d_rgb[pix * 3], d_rgb[pix * 3 + 1], d_rgb[pix * 3 + 2]];
            if g == [0.0; 3] {
                continue;
            }
            // behind-color recurrence, back to front; fill is the base case
            let mut behind = fill;
            for c in chain.iter().rev() {
                let p = &buffers.visible[c.splat as usize];
                let d_alpha = c.transmittance
                    * ((p.color[0] - behind[0]) * g[0]
                        + (p.color[1] - behind[1]) * g[1]
                        + (p.color[2] - behind[2]) * g[2]);
                let wgt = c.alpha * c.transmittance;
                let sg = &mut grads[p.id];
                sg.d_color[0] += wgt * g[0];
                sg.d_color[1] += wgt * g[1];
                sg.d_color[2] += wgt * g[2];

                // alpha = o_s * o_t(time) * G(r^2, sigma)
                let dx = x as f64 - p.px;
                let dy = y as f64 - p.py;
                let r2 = dx * dx + dy * dy;
                let gauss = if p.alpha_base > 0.0 { c.alpha / p.alpha_base } else { 0.0 };

                sg.d_spatial_opacity += d_alpha * p.temporal * gauss;
                let d_ot = d_alpha * p.spatial_opacity * gauss;
                let u = (time - p.temporal_center) / p.temporal_duration;
                sg.d_temporal_center += d_ot * p.temporal * u / p.temporal_duration;
                sg.d_temporal_duration += d_ot * p.temporal * u * u / p.temporal_duration;
                let d_gauss = d_alpha * p.alpha_base;
                let inv_s2 = 1.0 / (p.sigma * p.sigma);
                d_px[c.splat as usize] += d_gauss * gauss * dx * inv_s2;
                d_py[c.splat as usize] += d_gauss * gauss * dy * inv_s2;
                d_sigma[c.splat as usize] += d_gauss * gauss * r2 / (p.sigma * p.sigma * p.sigma);

                behind = [
                    c.alpha * p.color[0] + (1.0 - c.alpha) * behind[0],
                    c.alpha * p.color[1] + (1.0 - c.alpha) * behind[1],
                    c.alpha * p.color[2] + (1.0 - c.alpha) * behind[2],
                ];
            }
        }
    }

    // map projected-space gradients back to world position
    let rot_inv = camera.rotation.conjugate();
    for (vi, p) in buffers.visible.iter().enumerate() {
        if d_px[vi] == 0.0 && d_py[vi] == 0.0 && d_sigma[vi] == 0.0 {
            continue;
        }
        let z = p.cam.z;
        let dcam = vec3(
            d_px[vi] * camera.fx / z,
            d_py[vi] * camera.fy / z,
            -d_px[vi] * camera.fx * p.cam.x / (z * z)
                - d_py[vi] * camera.fy * p.cam.y / (z * z)
                - d_sigma[vi] * p.sigma / z,
        );
        grads[p.id].d_pos += rot_inv.rotate(dcam);
    }
    grads
}

pub mod imageio {
    //! Bit-exact frame export: binary PPM/PGM for color and masks, raw
    //! little-endian f32 with a width/height header for flow.

    use std::io::{Read, Write};
    use std::path::Path;

    pub fn rgb_to_bytes(rgb: &[f64]) -> Vec<u8> {
        rgb.iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[f64]) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        write!(f, "P6\n{width} {height}\n255\n")?;
        f.write_all(&rgb_to_bytes(rgb))?;
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> std::io::Result<(usize, usize, Vec<f64>)> {
        let mut data = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut data)?;
        parse_ppm(&data)
    }

    pub fn parse_ppm(data: &[u8]) -> std::io::Result<(usize, usize, Vec<f64>)> {
        let err = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
        let mut pos = 0usize;
        let mut token = || -> std::io::Result<String> {
            while pos < data.len() && (data[pos] as char).is_whitespace() {
                pos += 1;
            }
            if pos < data.len() && data[pos] == b'#' {
                while pos < data.len() && data[pos] != b'\n' {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < data.len() && !(data[pos] as char).is_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::UnexpectedEof,
                    "truncated header",
                ));
            }
            Ok(String::from_utf8_lossy(&data[start..pos]).into_owned())
        };
        if token()? != "P6" {
            return Err(err("not a P6 ppm"));
        }
        let width: usize = token()?.parse().map_err(|_| err("bad width"))?;
        let height: usize = token()?.parse().map_err(|_| err("bad height"))?;
        let maxv: usize = token()?.parse().map_err(|_| err("bad maxval"))?;
        if maxv != 255 {
            return Err(err("only 8-bit ppm supported"));
        }
        let body = &data[pos + 1..];
        if body.len() < width * height * 3 {
            return Err(err("truncated pixel data"));
        }
        Ok((
            width,
            height,
            body[..width * height * 3].iter().map(|&b| b as f64 / 255.0).collect(),
        ))
    }

    pub fn write_mask_pgm(path: &Path, width: usize, height: usize, mask: &[bool]) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        write!(f, "P5\n{width} {height}\n255\n")?;
        let bytes: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn write_flow_raw(path: &Path, width: usize, height: usize, flow: &[f64]) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&(width as u32).to_le_bytes())?;
        f.write_all(&(height as u32).to_le_bytes())?;
        for &v in flow {
            f.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_flow_raw(path: &Path) -> std::io::Result<(usize, usize, Vec<f64>)> {
        let mut data = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut data)?;
        if data.len() < 8 {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                "flow file too short",
            ));
        }
        let width = u32::from_le_bytes(data[0..4].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(data[4..8].try_into().unwrap()) as usize;
        let need = width * height * 2;
        let body = &data[8..];
        if body.len() < need * 4 {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                "flow file truncated",
            ));
        }
        let flow = body
            .chunks_exact(4)
            .take(need)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok((width, height, flow))
    }
}
