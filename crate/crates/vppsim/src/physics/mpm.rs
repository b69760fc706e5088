//! MLS-MPM solver with APIC transfers and quadratic B-spline kernels.
//!
//! Constitutive models: fixed corotated elasticity (elastic), weakly
//! compressible fluid via deviatoric reset (liquid), and Drucker-Prager
//! return mapping on Hencky strain (sand, snow).

use crate::math::{vec3, Mat3, Vec3};
use crate::vpp::{MaterialKind, VppObject};

/// Per-particle solver state that lives for the duration of a window.
#[derive(Debug, Clone)]
pub struct MpmParticleState {
    pub deformation: Vec<Mat3>,
    pub affine_velocity: Vec<Mat3>,
}

impl MpmParticleState {
    pub fn new(n: usize) -> Self {
        MpmParticleState {
            deformation: vec![Mat3::IDENTITY; n],
            affine_velocity: vec![Mat3::ZERO; n],
        }
    }
}

/// Dense background grid with a touched-node list so clearing and updating
/// stay proportional to the active region.
pub struct MpmGrid {
    pub origin: Vec3,
    pub h: f64,
    pub dims: [usize; 3],
    mass: Vec<f64>,
    momentum: Vec<Vec3>,
    velocity: Vec<Vec3>,
    touched: Vec<usize>,
    stamp: Vec<u32>,
    current_stamp: u32,
}

impl MpmGrid {
    pub fn new(domain_min: Vec3, domain_max: Vec3, grid_density: usize) -> Self {
        let size = domain_max - domain_min;
        let max_extent = size.x.max(size.y).max(size.z);
        let h = max_extent / grid_density as f64;
        let dims = [
            (size.x / h).ceil() as usize + 1,
            (size.y / h).ceil() as usize + 1,
            (size.z / h).ceil() as usize + 1,
        ];
        let n = dims[0] * dims[1] * dims[2];
        MpmGrid {
            origin: domain_min,
            h,
            dims,
            mass: vec![0.0; n],
            momentum: vec![Vec3::ZERO; n],
            velocity: vec![Vec3::ZERO; n],
            touched: Vec::new(),
            stamp: vec![0; n],
            current_stamp: 0,
        }
    }

    fn flat(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    fn begin_step(&mut self) {
        self.current_stamp = self.current_stamp.wrapping_add(1);
        self.touched.clear();
    }

    fn touch(&mut self, idx: usize) {
        if self.stamp[idx] != self.current_stamp {
            self.stamp[idx] = self.current_stamp;
            self.mass[idx] = 0.0;
            self.momentum[idx] = Vec3::ZERO;
            self.velocity[idx] = Vec3::ZERO;
            self.touched.push(idx);
        }
    }
}

/// Quadratic B-spline weights along one axis. `fx` is the particle position
/// in cell units relative to the base node.
fn bspline_weights(fx: f64) -> [f64; 3] {
    [
        0.5 * (1.5 - fx) * (1.5 - fx),
        0.75 - (fx - 1.0) * (fx - 1.0),
        0.5 * (fx - 0.5) * (fx - 0.5),
    ]
}

/// SVD of the deformation gradient via the eigendecomposition of F^T F.
fn svd3(f: &Mat3) -> (Mat3, [f64; 3], Mat3) {
    let ata = f.transpose().mul_mat(f);
    let (mut vals, v) = ata.sym_eigen();
    for val in &mut vals {
        *val = val.max(1e-20);
    }
    let sigma = [vals[0].sqrt(), vals[1].sqrt(), vals[2].sqrt()];
    let u = Mat3::from_cols(
        f.mul_vec(v.c[0]) / sigma[0],
        f.mul_vec(v.c[1]) / sigma[1],
        f.mul_vec(v.c[2]) / sigma[2],
    );
    (u, sigma, v)
}

fn eye(s: f64) -> Mat3 {
    Mat3::from_cols(vec3(s, 0.0, 0.0), vec3(0.0, s, 0.0), vec3(0.0, 0.0, s))
}

/// Kirchhoff-type stress used by the fused MLS-MPM momentum transfer.
fn stress_tensor(material: MaterialKind, f: &Mat3, mu: f64, lambda: f64, friction_angle_deg: f64) -> Mat3 {
    match material {
        MaterialKind::Elastic => {
            let r = f.polar_rotation();
            let j = f.det();
            let p1 = f.sub(&r).mul_mat(&f.transpose()).scale(2.0 * mu);
            p1.add(&eye(lambda * j * (j - 1.0)))
        }
        MaterialKind::Liquid => {
            // F is kept spherical; only the volumetric response remains
            let j = f.det();
            let p1 = f.sub(&Mat3::IDENTITY).mul_mat(&f.transpose()).scale(2.0 * mu);
            p1.add(&eye(lambda * j * (j - 1.0)))
        }
        MaterialKind::Sand | MaterialKind::Snow => {
            let (u, sigma, _v) = svd3(f);
            let log_s = [sigma[0].ln(), sigma[1].ln(), sigma[2].ln()];
            let tr = log_s[0] + log_s[1] + log_s[2];
            let diag = [
                2.0 * mu * log_s[0] + lambda * tr,
                2.0 * mu * log_s[1] + lambda * tr,
                2.0 * mu * log_s[2] + lambda * tr,
            ];
            let _ = friction_angle_deg;
            // tau = U diag U^T
            let d = Mat3::from_cols(
                vec3(diag[0], 0.0, 0.0),
                vec3(0.0, diag[1], 0.0),
                vec3(0.0, 0.0, diag[2]),
            );
            u.mul_mat(&d).mul_mat(&u.transpose())
        }
        _ => Mat3::ZERO,
    }
}

/// Drucker-Prager return mapping on the Hencky strain of F.
fn plastic_return(f: &Mat3, mu: f64, lambda: f64, friction_angle_deg: f64) -> Mat3 {
    let (u, sigma, v) = svd3(f);
    let mut eps = [sigma[0].ln(), sigma[1].ln(), sigma[2].ln()];
    let tr: f64 = eps.iter().sum();
    if tr > 0.0 {
        // expansion: project to the tip, all elastic strain released
        eps = [0.0; 3];
    } else {
        let mean = tr / 3.0;
        let dev = [eps[0] - mean, eps[1] - mean, eps[2] - mean];
        let dev_norm = (dev[0] * dev[0] + dev[1] * dev[1] + dev[2] * dev[2]).sqrt();
        if dev_norm > 1e-18 {
            let phi = friction_angle_deg.to_radians();
            let alpha = (2.0_f64 / 3.0).sqrt() * 2.0 * phi.sin() / (3.0 - phi.sin());
            let dg = dev_norm + (3.0 * lambda + 2.0 * mu) / (2.0 * mu) * tr * alpha;
            if dg > 0.0 {
                for i in 0..3 {
                    eps[i] -= dg * dev[i] / dev_norm;
                }
            }
        }
    }
    let s = [eps[0].exp(), eps[1].exp(), eps[2].exp()];
    let d = Mat3::from_cols(vec3(s[0], 0.0, 0.0), vec3(0.0, s[1], 0.0), vec3(0.0, 0.0, s[2]));
    u.mul_mat(&d).mul_mat(&v.transpose())
}

/// One MPM substep over all MPM-material objects sharing the grid.
///
/// `forces[oi][pi]` are external forces in N, applied as impulses during the
/// particle-to-grid transfer. Returns the count of particles clamped at the
/// domain boundary (callers may log it).
pub fn step_mpm(
    objects: &mut [VppObject],
    mpm_indices: &[usize],
    states: &mut [MpmParticleState],
    forces: &[Vec<Vec3>],
    dt: f64,
    grid: &mut MpmGrid,
    domain_min: Vec3,
    domain_max: Vec3,
) -> usize {
    grid.begin_step();
    let inv_h = 1.0 / grid.h;

    // particle to grid
    for (si, &oi) in mpm_indices.iter().enumerate() {
        let obj = &objects[oi];
        let (mu, lambda) = obj.params.lame();
        let volume = obj.particle_size.powi(3);
        let state = &states[si];
        for (pi, p) in obj.particles.iter().enumerate() {
            let xp = (p.position - grid.origin) * inv_h;
            let base = [
                (xp.x - 0.5).floor() as isize,
                (xp.y - 0.5).floor() as isize,
                (xp.z - 0.5).floor() as isize,
            ];
            let fx = vec3(xp.x - base[0] as f64, xp.y - base[1] as f64, xp.z - base[2] as f64);
            let wx = bspline_weights(fx.x);
            let wy = bspline_weights(fx.y);
            let wz = bspline_weights(fx.z);

            let tau = stress_tensor(obj.material, &state.deformation[pi], mu, lambda, obj.params.friction_angle);
            let stress = tau.scale(-dt * volume * 4.0 * inv_h * inv_h);
            let affine = stress.add(&state.affine_velocity[pi].scale(p.mass));
            // external force folded in as a velocity impulse
            let v_star = p.velocity + forces[oi][pi] / p.mass * dt;
            let mv = v_star * p.mass;

            for (di, &wi) in wx.iter().enumerate() {
                for (dj, &wj) in wy.iter().enumerate() {
                    for (dk, &wk) in wz.iter().enumerate() {
                        let ni = base[0] + di as isize;
                        let nj = base[1] + dj as isize;
                        let nk = base[2] + dk as isize;
                        if ni < 0
                            || nj < 0
                            || nk < 0
                            || ni >= grid.dims[0] as isize
                            || nj >= grid.dims[1] as isize
                            || nk >= grid.dims[2] as isize
                        {
                            continue;
                        }
                        let idx = grid.flat(ni as usize, nj as usize, nk as usize);
                        grid.touch(idx);
                        let w = wi * wj * wk;
                        let dpos = vec3(
                            (di as f64 - fx.x) * grid.h,
                            (dj as f64 - fx.y) * grid.h,
                            (dk as f64 - fx.z) * grid.h,
                        );
                        grid.mass[idx] += w * p.mass;
                        grid.momentum[idx] += (mv + affine.mul_vec(dpos)) * w;
                    }
                }
            }
        }
    }

    // grid update with boundary conditions
    let margin = 2usize;
    for ti in 0..grid.touched.len() {
        let idx = grid.touched[ti];
        let mass = grid.mass[idx];
        if mass <= 0.0 {
            continue;
        }
        let mut v = grid.momentum[idx] / mass;
        let k = idx % grid.dims[2];
        let j = (idx / grid.dims[2]) % grid.dims[1];
        let i = idx / (grid.dims[1] * grid.dims[2]);
        // sticky floor
        if k < margin && v.z < 0.0 {
            v = Vec3::ZERO;
        }
        if k >= grid.dims[2] - margin && v.z > 0.0 {
            v.z = 0.0;
        }
        if i < margin && v.x < 0.0 {
            v.x = 0.0;
        }
        if i >= grid.dims[0] - margin && v.x > 0.0 {
            v.x = 0.0;
        }
        if j < margin && v.y < 0.0 {
            v.y = 0.0;
        }
        if j >= grid.dims[1] - margin && v.y > 0.0 {
            v.y = 0.0;
        }
        grid.velocity[idx] = v;
    }

    // grid to particle
    let mut clamped = 0usize;
    for (si, &oi) in mpm_indices.iter().enumerate() {
        let obj = &mut objects[oi];
        let state = &mut states[si];
        for (pi, p) in obj.particles.iter_mut().enumerate() {
            let xp = (p.position - grid.origin) * inv_h;
            let base = [
                (xp.x - 0.5).floor() as isize,
                (xp.y - 0.5).floor() as isize,
                (xp.z - 0.5).floor() as isize,
            ];
            let fx = vec3(xp.x - base[0] as f64, xp.y - base[1] as f64, xp.z - base[2] as f64);
            let wx = bspline_weights(fx.x);
            let wy = bspline_weights(fx.y);
            let wz = bspline_weights(fx.z);

            let mut new_v = Vec3::ZERO;
            let mut new_c = Mat3::ZERO;
            for (di, &wi) in wx.iter().enumerate() {
                for (dj, &wj) in wy.iter().enumerate() {
                    for (dk, &wk) in wz.iter().enumerate() {
                        let ni = base[0] + di as isize;
                        let nj = base[1] + dj as isize;
                        let nk = base[2] + dk as isize;
                        if ni < 0
                            || nj < 0
                            || nk < 0
                            || ni >= grid.dims[0] as isize
                            || nj >= grid.dims[1] as isize
                            || nk >= grid.dims[2] as isize
                        {
                            continue;
                        }
                        let idx = grid.flat(ni as usize, nj as usize, nk as usize);
                        if grid.stamp[idx] != grid.current_stamp {
                            continue;
                        }
                        let w = wi * wj * wk;
                        let dpos = vec3(
                            (di as f64 - fx.x) * grid.h,
                            (dj as f64 - fx.y) * grid.h,
                            (dk as f64 - fx.z) * grid.h,
                        );
                        let gv = grid.velocity[idx];
                        new_v += gv * w;
                        new_c = new_c.add(&Mat3::outer(gv, dpos).scale(4.0 * inv_h * inv_h * w));
                    }
                }
            }
            p.velocity = new_v;
            p.position += new_v * dt;
            // domain clamp with velocity zeroing
            for axis in 0..3 {
                let lo = domain_min.get(axis);
                let hi = domain_max.get(axis);
                let x = p.position.get(axis);
                if x < lo {
                    p.position.set(axis, lo);
                    p.velocity.set(axis, 0.0);
                    clamped += 1;
                } else if x > hi {
                    p.position.set(axis, hi);
                    p.velocity.set(axis, 0.0);
                    clamped += 1;
                }
            }
            state.affine_velocity[pi] = new_c;

            // deformation gradient update + constitutive post-processing
            let f_new = Mat3::IDENTITY.add(&new_c.scale(dt)).mul_mat(&state.deformation[pi]);
            state.deformation[pi] = match obj.material {
                MaterialKind::Liquid => eye(f_new.det().abs().powf(1.0 / 3.0)),
                MaterialKind::Sand | MaterialKind::Snow => {
                    let (mu, lambda) = obj.params.lame();
                    plastic_return(&f_new, mu, lambda, obj.params.friction_angle)
                }
                _ => f_new,
            };
        }
    }
    clamped
}
