//! XPBD cloth on the lattice topology produced by plane sampling.

use crate::error::{Result, VppError};
use crate::math::Vec3;
use crate::vpp::{MaterialKind, VppObject};

/// 1/s; drains swing energy so pinned sheets reach a quasi-static drape
const CLOTH_DAMPING: f64 = 4.0;

struct Constraint {
    a: usize,
    b: usize,
    rest: f64,
    compliance: f64,
}

fn build_constraints(obj: &VppObject) -> Result<Vec<Constraint>> {
    let (nx, ny) = obj
        .grid_dims
        .ok_or_else(|| VppError::config("cloth object requires a plane lattice topology"))?;
    if nx * ny != obj.particles.len() {
        return Err(VppError::config("cloth lattice dims do not match particle count"));
    }
    let spacing = obj.particle_size;
    let idx = |x: usize, y: usize| y * nx + x;
    let mut cs = Vec::new();
    // stretch: structural edges
    for y in 0..ny {
        for x in 0..nx {
            if x + 1 < nx {
                cs.push(Constraint {
                    a: idx(x, y),
                    b: idx(x + 1, y),
                    rest: spacing,
                    compliance: obj.params.stretch_compliance,
                });
            }
            if y + 1 < ny {
                cs.push(Constraint {
                    a: idx(x, y),
                    b: idx(x, y + 1),
                    rest: spacing,
                    compliance: obj.params.stretch_compliance,
                });
            }
        }
    }
    // bending: cross-edge constraints two particles apart
    for y in 0..ny {
        for x in 0..nx {
            if x + 2 < nx {
                cs.push(Constraint {
                    a: idx(x, y),
                    b: idx(x + 2, y),
                    rest: 2.0 * spacing,
                    compliance: obj.params.bending_compliance,
                });
            }
            if y + 2 < ny {
                cs.push(Constraint {
                    a: idx(x, y),
                    b: idx(x, y + 2),
                    rest: 2.0 * spacing,
                    compliance: obj.params.bending_compliance,
                });
            }
        }
    }
    Ok(cs)
}

/// One XPBD step: predict under forces, run `iterations` rounds of compliant
/// constraint projection, recover velocities from the position delta.
/// Pinned particles never move.
pub fn step_cloth(obj: &mut VppObject, forces: &[Vec3], dt: f64, iterations: usize) -> Result<()> {
    debug_assert_eq!(obj.material, MaterialKind::Cloth);
    let constraints = build_constraints(obj)?;
    let n = obj.particles.len();
    let inv_mass: Vec<f64> = (0..n)
        .map(|i| if obj.pinned[i] { 0.0 } else { 1.0 / obj.particles[i].mass })
        .collect();

    let old: Vec<Vec3> = obj.particles.iter().map(|p| p.position).collect();
    for (i, p) in obj.particles.iter_mut().enumerate() {
        if inv_mass[i] > 0.0 {
            p.velocity += forces[i] / p.mass * dt;
            p.position += p.velocity * dt;
        }
    }

    let mut lambdas = vec![0.0; constraints.len()];
    let dt2 = dt * dt;
    for _ in 0..iterations.max(1) {
        for (ci, c) in constraints.iter().enumerate() {
            let wa = inv_mass[c.a];
            let wb = inv_mass[c.b];
            let wsum = wa + wb;
            if wsum == 0.0 {
                continue;
            }
            let d = obj.particles[c.a].position - obj.particles[c.b].position;
            let len = d.norm();
            if len < 1e-12 {
                continue;
            }
            let normal = d / len;
            let violation = len - c.rest;
            let alpha_tilde = c.compliance / dt2;
            let dlambda = (-violation - alpha_tilde * lambdas[ci]) / (wsum + alpha_tilde);
            lambdas[ci] += dlambda;
            obj.particles[c.a].position += normal * (wa * dlambda);
            obj.particles[c.b].position -= normal * (wb * dlambda);
        }
    }

    let damping = (1.0 - CLOTH_DAMPING * dt).max(0.0);
    for (i, p) in obj.particles.iter_mut().enumerate() {
        if inv_mass[i] > 0.0 {
            p.velocity = (p.position - old[i]) / dt * damping;
        } else {
            p.position = old[i];
            p.velocity = Vec3::ZERO;
        }
    }
    Ok(())
}
