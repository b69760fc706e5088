//! Unified visual-physical representation: physics particles anchoring
//! tanh-bounded isotropic splats with time-gated opacity.

use crate::error::{Result, VppError};
use crate::math::{vec3, Quat, Vec3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaterialKind {
    Rigid,
    Elastic,
    Liquid,
    Sand,
    Snow,
    Cloth,
    Smoke,
}

impl MaterialKind {
    pub const ALL: [MaterialKind; 7] = [
        MaterialKind::Rigid,
        MaterialKind::Elastic,
        MaterialKind::Liquid,
        MaterialKind::Sand,
        MaterialKind::Snow,
        MaterialKind::Cloth,
        MaterialKind::Smoke,
    ];

    /// Splats anchored per particle. Solid/surface materials bind one-to-one,
    /// volumetric materials bind a cloud of 20.
    pub fn splats_per_particle(self) -> usize {
        match self {
            MaterialKind::Rigid | MaterialKind::Cloth => 1,
            _ => 20,
        }
    }

    /// Splat radius relative to the particle size.
    pub fn scale_factor(self) -> f64 {
        match self {
            MaterialKind::Rigid | MaterialKind::Cloth => 1.0,
            _ => 0.5,
        }
    }

    pub fn uses_mpm(self) -> bool {
        matches!(
            self,
            MaterialKind::Elastic | MaterialKind::Liquid | MaterialKind::Sand | MaterialKind::Snow
        )
    }
}

/// Per-material solver parameters. Fields irrelevant to a material's solver
/// keep their defaults and are ignored by dispatch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaterialParams {
    /// Pa
    pub youngs_modulus: f64,
    /// dimensionless, in (0, 0.5)
    pub poisson_ratio: f64,
    /// degrees
    pub friction_angle: f64,
    /// dimensionless, >= 0
    pub friction_coefficient: f64,
    /// 1/Pa
    pub stretch_compliance: f64,
    /// 1/Pa
    pub bending_compliance: f64,
    /// dimensionless, >= 0
    pub viscosity: f64,
    /// kg/m^3, > 0
    pub density: f64,
}

impl Default for MaterialParams {
    fn default() -> Self {
        MaterialParams {
            youngs_modulus: 3e5,
            poisson_ratio: 0.2,
            friction_angle: 45.0,
            friction_coefficient: 0.1,
            stretch_compliance: 1e-7,
            bending_compliance: 1e-5,
            viscosity: 0.1,
            density: 1000.0,
        }
    }
}

impl MaterialParams {
    /// Defaults keyed by material.
    pub fn defaults_for(kind: MaterialKind) -> MaterialParams {
        let mut p = MaterialParams::default();
        match kind {
            MaterialKind::Elastic => p.youngs_modulus = 3e5,
            MaterialKind::Liquid => p.youngs_modulus = 1e7,
            MaterialKind::Sand | MaterialKind::Snow => {
                p.youngs_modulus = 1e6;
                p.friction_angle = 45.0;
            }
            MaterialKind::Rigid => p.friction_coefficient = 0.1,
            MaterialKind::Cloth => {
                p.stretch_compliance = 1e-7;
                p.bending_compliance = 1e-5;
            }
            MaterialKind::Smoke => p.viscosity = 0.1,
        }
        p
    }

    pub fn lame(&self) -> (f64, f64) {
        let e = self.youngs_modulus;
        let nu = self.poisson_ratio;
        let mu = e / (2.0 * (1.0 + nu));
        let lambda = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
        (mu, lambda)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicsParticle {
    pub position: Vec3,
    pub velocity: Vec3,
    pub mass: f64,
}

/// A visual primitive anchored to a particle. `scale` is fixed at
/// construction; everything else is the optimizable set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VppGaussian {
    pub raw_offset: Vec3,
    pub spatial_opacity: f64,
    pub temporal_center: f64,
    pub temporal_duration: f64,
    pub rotation: Quat,
    pub color: [f64; 3],
    pub scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundGaussian {
    pub position: Vec3,
    pub spatial_opacity: f64,
    pub temporal_center: f64,
    pub temporal_duration: f64,
    pub rotation: Quat,
    pub color: [f64; 3],
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VppObject {
    pub particles: Vec<PhysicsParticle>,
    /// flat list, length J*K; (j, k) lives at j*K + k
    pub gaussians: Vec<VppGaussian>,
    pub gaussians_per_particle: usize,
    pub particle_size: f64,
    pub material: MaterialKind,
    pub params: MaterialParams,
    /// (nx, ny) lattice dims when the object was sampled from a plane; cloth requires it
    pub grid_dims: Option<(usize, usize)>,
    /// per-particle pin flags (cloth)
    pub pinned: Vec<bool>,
    /// upward drive for smoke, m/s^2
    #[serde(default)]
    pub smoke_buoyancy: Vec3,
    /// diffusion jitter amplitude for smoke, in particle sizes per second
    #[serde(default)]
    pub smoke_jitter: f64,
}

/// tanh squashed away from +-1 so offsets stay strictly inside the particle
/// box and the atanh inversion at loop closure stays finite.
pub fn squash(u: f64) -> f64 {
    u.tanh().clamp(-SQUASH_LIMIT, SQUASH_LIMIT)
}

const SQUASH_LIMIT: f64 = 1.0 - 1e-15;

impl VppObject {
    pub fn particle_count(&self) -> usize {
        self.particles.len()
    }

    pub fn gaussian_world_position(&self, j: usize, k: usize) -> Vec3 {
        let g = &self.gaussians[j * self.gaussians_per_particle + k];
        self.particles[j].position + g.raw_offset.map(squash) * self.particle_size
    }

    pub fn assert_invariants(&self) {
        let k = self.material.splats_per_particle();
        assert_eq!(self.gaussians_per_particle, k);
        assert_eq!(self.gaussians.len(), self.particles.len() * k);
        let scale = self.material.scale_factor() * self.particle_size;
        for g in &self.gaussians {
            assert!(g.scale <= self.particle_size);
            assert_eq!(g.scale, scale);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub background: Vec<BackgroundGaussian>,
    pub objects: Vec<VppObject>,
    pub sim_time: f64,
}

impl SceneState {
    pub fn total_mass(&self) -> f64 {
        self.objects
            .iter()
            .flat_map(|o| o.particles.iter())
            .map(|p| p.mass)
            .sum()
    }
}

/// Splat world position from its anchor particle: the offset is squashed
/// through tanh and scaled by the particle size, so it can never leave the
/// particle's +-delta box.
pub fn gaussian_world_position(particle_position: Vec3, raw_offset: Vec3, delta: f64) -> Result<Vec3> {
    if !particle_position.is_finite() || !raw_offset.is_finite() || !delta.is_finite() {
        return Err(VppError::invalid("non-finite input to gaussian_world_position"));
    }
    if delta <= 0.0 {
        return Err(VppError::invalid("delta must be > 0"));
    }
    let mut mu = particle_position + raw_offset.map(squash) * delta;
    // the squashed offset is strictly inside +-delta, but the final addition
    // can round onto the box face; walk back (at most one ulp) to keep the
    // containment strict in the representable numbers too
    for axis in 0..3 {
        let p = particle_position.get(axis);
        let mut x = mu.get(axis);
        while (x - p).abs() >= delta {
            x = if x > p { x.next_down() } else { x.next_up() };
        }
        mu.set(axis, x);
    }
    Ok(mu)
}

/// Bell-shaped time gate centered at `temporal_center` with width `temporal_duration`.
pub fn temporal_opacity(t: f64, temporal_center: f64, temporal_duration: f64) -> Result<f64> {
    if temporal_duration <= 0.0 {
        return Err(VppError::invalid("temporal_duration must be > 0"));
    }
    let z = (t - temporal_center) / temporal_duration;
    Ok((-0.5 * z * z).exp())
}

pub fn effective_opacity(spatial_opacity: f64, temporal: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&spatial_opacity) || !(0.0..=1.0).contains(&temporal) {
        return Err(VppError::invalid("opacities must lie in [0,1]"));
    }
    Ok(spatial_opacity * temporal)
}

/// Primitive shapes that can be lattice-sampled into particles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Box { center: [f64; 3], size: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
    /// Horizontal sheet at z = center.z, lattice in x/y. Used for cloth.
    Plane { center: [f64; 3], size: [f64; 2] },
    /// Points between z = center.z and the bilinear surface z = center.z + height(x, y).
    HeightField {
        center: [f64; 3],
        size: [f64; 2],
        heights: Vec<Vec<f64>>,
    },
}

fn lattice_1d(min: f64, extent: f64, delta: f64) -> Result<Vec<f64>> {
    if extent <= 0.0 {
        return Err(VppError::invalid("shape dimensions must be > 0"));
    }
    let n = ((extent / delta) + 1e-9).floor() as usize;
    if n == 0 {
        return Err(VppError::invalid(format!(
            "delta {delta} larger than shape extent {extent}"
        )));
    }
    Ok((0..n).map(|i| min + (i as f64 + 0.5) * delta).collect())
}

/// Axis-aligned lattice points strictly inside the shape at spacing `delta`,
/// ordered x-fastest.
pub fn sample_particles_from_shape(shape: &Shape, delta: f64) -> Result<Vec<Vec3>> {
    if delta <= 0.0 {
        return Err(VppError::invalid("delta must be > 0"));
    }
    match shape {
        Shape::Box { center, size } => {
            let c = vec3(center[0], center[1], center[2]);
            let xs = lattice_1d(c.x - size[0] / 2.0, size[0], delta)?;
            let ys = lattice_1d(c.y - size[1] / 2.0, size[1], delta)?;
            let zs = lattice_1d(c.z - size[2] / 2.0, size[2], delta)?;
            let mut pts = Vec::with_capacity(xs.len() * ys.len() * zs.len());
            for &z in &zs {
                for &y in &ys {
                    for &x in &xs {
                        pts.push(vec3(x, y, z));
                    }
                }
            }
            Ok(pts)
        }
        Shape::Sphere { center, radius } => {
            let c = vec3(center[0], center[1], center[2]);
            let d = 2.0 * radius;
            let xs = lattice_1d(c.x - radius, d, delta)?;
            let ys = lattice_1d(c.y - radius, d, delta)?;
            let zs = lattice_1d(c.z - radius, d, delta)?;
            let mut pts = Vec::new();
            for &z in &zs {
                for &y in &ys {
                    for &x in &xs {
                        let p = vec3(x, y, z);
                        if (p - c).norm() < *radius {
                            pts.push(p);
                        }
                    }
                }
            }
            if pts.is_empty() {
                return Err(VppError::invalid("no lattice point inside sphere"));
            }
            Ok(pts)
        }
        Shape::Plane { center, size } => {
            let c = vec3(center[0], center[1], center[2]);
            let xs = lattice_1d(c.x - size[0] / 2.0, size[0], delta)?;
            let ys = lattice_1d(c.y - size[1] / 2.0, size[1], delta)?;
            let mut pts = Vec::with_capacity(xs.len() * ys.len());
            for &y in &ys {
                for &x in &xs {
                    pts.push(vec3(x, y, c.z));
                }
            }
            Ok(pts)
        }
        Shape::HeightField { center, size, heights } => {
            if heights.is_empty() || heights[0].is_empty() {
                return Err(VppError::invalid("height field needs a non-empty grid"));
            }
            let c = vec3(center[0], center[1], center[2]);
            let xs = lattice_1d(c.x - size[0] / 2.0, size[0], delta)?;
            let ys = lattice_1d(c.y - size[1] / 2.0, size[1], delta)?;
            let max_h = heights
                .iter()
                .flat_map(|r| r.iter())
                .fold(0.0_f64, |a, &b| a.max(b));
            let zs = lattice_1d(c.z, max_h, delta)?;
            let nx = heights[0].len();
            let ny = heights.len();
            let sample_height = |x: f64, y: f64| -> f64 {
                let u = ((x - (c.x - size[0] / 2.0)) / size[0]).clamp(0.0, 1.0);
                let v = ((y - (c.y - size[1] / 2.0)) / size[1]).clamp(0.0, 1.0);
                if nx == 1 || ny == 1 {
                    return heights[((v * (ny - 1) as f64).round() as usize).min(ny - 1)]
                        [((u * (nx - 1) as f64).round() as usize).min(nx - 1)];
                }
                let fx = u * (nx - 1) as f64;
                let fy = v * (ny - 1) as f64;
                let ix = (fx.floor() as usize).min(nx - 2);
                let iy = (fy.floor() as usize).min(ny - 2);
                let tx = fx - ix as f64;
                let ty = fy - iy as f64;
                let h00 = heights[iy][ix];
                let h10 = heights[iy][ix + 1];
                let h01 = heights[iy + 1][ix];
                let h11 = heights[iy + 1][ix + 1];
                h00 * (1.0 - tx) * (1.0 - ty) + h10 * tx * (1.0 - ty) + h01 * (1.0 - tx) * ty + h11 * tx * ty
            };
            let mut pts = Vec::new();
            for &z in &zs {
                for &y in &ys {
                    for &x in &xs {
                        if z - c.z < sample_height(x, y) {
                            pts.push(vec3(x, y, z));
                        }
                    }
                }
            }
            if pts.is_empty() {
                return Err(VppError::invalid("no lattice point under height field"));
            }
            Ok(pts)
        }
    }
}

/// Halton sequence term, used for the deterministic in-box scatter of K=20 clouds.
fn halton(index: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    let mut i = index;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// Assemble a VPP object from sampled particle positions.
///
/// K and scale follow the material rule (1 and delta for solids/surfaces,
/// 20 and 0.5*delta for volumetric materials). K=1 splats coincide with
/// their particle; K=20 splats are scattered on a seeded low-discrepancy
/// pattern inside the particle's +-delta box and the raw offsets recovered
/// through atanh.
#[allow(clippy::too_many_arguments)]
pub fn build_vpp(
    particle_positions: &[Vec3],
    material: MaterialKind,
    params: MaterialParams,
    delta: f64,
    seed: u64,
    base_color: [f64; 3],
    window_start: f64,
    window_len: f64,
) -> Result<VppObject> {
    if particle_positions.is_empty() {
        return Err(VppError::invalid("particle list must be non-empty"));
    }
    if delta <= 0.0 {
        return Err(VppError::invalid("delta must be > 0"));
    }
    let k = material.splats_per_particle();
    let scale = material.scale_factor() * delta;
    let mass = params.density * delta * delta * delta;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let particles: Vec<PhysicsParticle> = particle_positions
        .iter()
        .map(|&p| PhysicsParticle {
            position: p,
            velocity: Vec3::ZERO,
            mass,
        })
        .collect();

    let total = particles.len() * k;
    let mut gaussians = Vec::with_capacity(total);
    for j in 0..particles.len() {
        for kk in 0..k {
            let raw_offset = if k == 1 {
                Vec3::ZERO
            } else {
                // low-discrepancy point in (-0.9, 0.9)^3 plus a small seeded jitter
                let h = vec3(halton(kk + 1, 2), halton(kk + 1, 3), halton(kk + 1, 5));
                let jitter = vec3(
                    rng.gen_range(-0.04..0.04),
                    rng.gen_range(-0.04..0.04),
                    rng.gen_range(-0.04..0.04),
                );
                let u = (h * 1.8 - vec3(0.9, 0.9, 0.9) + jitter).map(|v| v.clamp(-0.95, 0.95));
                u.map(f64::atanh)
            };
            let idx = j * k + kk;
            let temporal_center = window_start + (idx as f64 + 0.5) / total as f64 * window_len;
            gaussians.push(VppGaussian {
                raw_offset,
                spatial_opacity: 0.5,
                temporal_center,
                temporal_duration: window_len,
                rotation: Quat::IDENTITY,
                color: base_color,
                scale,
            });
        }
    }

    let obj = VppObject {
        pinned: vec![false; particles.len()],
        particles,
        gaussians,
        gaussians_per_particle: k,
        particle_size: delta,
        material,
        params,
        grid_dims: None,
        smoke_buoyancy: Vec3::ZERO,
        smoke_jitter: 0.0,
    };
    obj.assert_invariants();
    Ok(obj)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn world_position_identity_and_saturation() {
        let p = vec3(1.0, 2.0, 3.0);
        let r = gaussian_world_position(p, Vec3::ZERO, 0.01).unwrap();
        assert_eq!(r, p);

        let r = gaussian_world_position(Vec3::ZERO, vec3(50.0, 0.0, 0.0), 0.01).unwrap();
        assert!(r.x < 0.01 && 0.01 - r.x < 1e-12);
        assert_eq!(r.y, 0.0);
    }

    #[test]
    fn world_position_derived_case() {
        // frozen from a high-precision tanh evaluation:
        // tanh(1) = 0.7615941559..., tanh(0.5) = 0.4621171572...
        let r = gaussian_world_position(Vec3::ZERO, vec3(1.0, -1.0, 0.5), 0.01).unwrap();
        assert!((r.x - 0.0076159).abs() < 1e-7);
        assert!((r.y + 0.0076159).abs() < 1e-7);
        assert!((r.z - 0.0046212).abs() < 1e-7);
    }

    #[test]
    fn world_position_rejects_non_finite() {
        assert!(gaussian_world_position(vec3(f64::NAN, 0.0, 0.0), Vec3::ZERO, 0.01).is_err());
        assert!(gaussian_world_position(Vec3::ZERO, vec3(f64::INFINITY, 0.0, 0.0), 0.01).is_err());
    }

    #[test]
    fn temporal_opacity_cases() {
        assert_eq!(temporal_opacity(1.5, 1.5, 0.2).unwrap(), 1.0);
        let v = temporal_opacity(1.2, 1.0, 0.2).unwrap();
        assert!((v - (-0.5_f64).exp()).abs() < 1e-12);
        let v = temporal_opacity(2.0, 1.0, 0.5).unwrap();
        assert!((v - (-2.0_f64).exp()).abs() < 1e-12);
        assert!(temporal_opacity(0.0, 0.0, 0.0).is_err());
        assert!(temporal_opacity(0.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn effective_opacity_cases() {
        assert_eq!(effective_opacity(1.0, 1.0).unwrap(), 1.0);
        assert_eq!(effective_opacity(0.0, 0.7).unwrap(), 0.0);
        assert!((effective_opacity(0.8, 0.60653).unwrap() - 0.485224).abs() < 1e-6);
        assert!(effective_opacity(1.2, 0.5).is_err());
        assert!(effective_opacity(0.5, -0.1).is_err());
    }

    #[test]
    fn box_lattice_counts() {
        let pts = sample_particles_from_shape(
            &Shape::Box {
                center: [0.05, 0.05, 0.05],
                size: [0.1, 0.1, 0.1],
            },
            0.05,
        )
        .unwrap();
        // hand-enumerated 2x2x2 lattice at offsets 0.025 / 0.075
        assert_eq!(pts.len(), 8);
        assert!((pts[0] - vec3(0.025, 0.025, 0.025)).norm() < 1e-12);
        assert!((pts[7] - vec3(0.075, 0.075, 0.075)).norm() < 1e-12);
    }

    #[test]
    fn plane_lattice_count() {
        let pts = sample_particles_from_shape(
            &Shape::Plane {
                center: [0.0, 0.0, 1.0],
                size: [0.2, 0.2],
            },
            0.01,
        )
        .unwrap();
        assert_eq!(pts.len(), 400);
    }

    #[test]
    fn degenerate_sphere_errors() {
        let r = sample_particles_from_shape(
            &Shape::Sphere {
                center: [0.0, 0.0, 0.0],
                radius: 0.02,
            },
            0.05,
        );
        assert!(r.is_err());
    }

    #[test]
    fn build_vpp_material_rules() {
        let pts: Vec<Vec3> = (0..100).map(|i| vec3(i as f64 * 0.01, 0.0, 0.0)).collect();
        let rigid = build_vpp(
            &pts,
            MaterialKind::Rigid,
            MaterialParams::defaults_for(MaterialKind::Rigid),
            0.01,
            1,
            [0.5, 0.5, 0.5],
            0.0,
            0.392,
        )
        .unwrap();
        assert_eq!(rigid.gaussians.len(), 100);
        assert_eq!(rigid.gaussians[0].scale, 0.01);

        let liquid = build_vpp(
            &pts,
            MaterialKind::Liquid,
            MaterialParams::defaults_for(MaterialKind::Liquid),
            0.01,
            1,
            [0.5, 0.5, 0.5],
            0.0,
            0.392,
        )
        .unwrap();
        assert_eq!(liquid.gaussians.len(), 2000);
        assert_eq!(liquid.gaussians[0].scale, 0.005);
    }

    #[test]
    fn build_vpp_deterministic() {
        let pts: Vec<Vec3> = (0..10).map(|i| vec3(i as f64 * 0.01, 0.0, 0.0)).collect();
        let mk = || {
            build_vpp(
                &pts,
                MaterialKind::Snow,
                MaterialParams::defaults_for(MaterialKind::Snow),
                0.01,
                42,
                [1.0, 0.0, 0.0],
                0.0,
                0.392,
            )
            .unwrap()
        };
        assert_eq!(mk(), mk());
    }

    #[test]
    fn build_vpp_empty_errors() {
        assert!(build_vpp(
            &[],
            MaterialKind::Rigid,
            MaterialParams::default(),
            0.01,
            0,
            [0.0; 3],
            0.0,
            1.0
        )
        .is_err());
    }
}
