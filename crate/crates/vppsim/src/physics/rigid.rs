//! Rigid body integration on top of the particle representation.
//!
//! The body state is derived from the particle positions/velocities each
//! step (center of mass, angular momentum), so stepping is a pure function
//! of the particle state. Splitting a run into windows cannot change the
//! trajectory.

use crate::math::{vec3, Mat3, Quat, Vec3};
use crate::vpp::VppObject;

/// One symplectic Euler step of rigid translation + rotation, with ground
/// contact at `floor_z` (projection) and Coulomb friction against it.
pub fn step_rigid(obj: &mut VppObject, forces: &[Vec3], dt: f64, floor_z: f64, gravity: Vec3) {
    debug_assert_eq!(obj.material, crate::vpp::MaterialKind::Rigid);
    let n = obj.particles.len();
    let m_total: f64 = obj.particles.iter().map(|p| p.mass).sum();

    let mut com = Vec3::ZERO;
    let mut v_com = Vec3::ZERO;
    for p in &obj.particles {
        com += p.position * p.mass;
        v_com += p.velocity * p.mass;
    }
    com = com / m_total;
    v_com = v_com / m_total;

    // inertia tensor and angular momentum about the center of mass
    let mut inertia = Mat3::ZERO;
    let mut ang_mom = Vec3::ZERO;
    let mut force_total = Vec3::ZERO;
    let mut torque = Vec3::ZERO;
    for (p, f) in obj.particles.iter().zip(forces) {
        let r = p.position - com;
        let r2 = r.norm_sq();
        let eye_r2 = Mat3::from_cols(vec3(r2, 0.0, 0.0), vec3(0.0, r2, 0.0), vec3(0.0, 0.0, r2));
        inertia = inertia.add(&eye_r2.sub(&Mat3::outer(r, r)).scale(p.mass));
        ang_mom += r.cross(p.velocity - v_com) * p.mass;
        force_total += *f;
        torque += r.cross(*f);
    }
    // pseudo-inverse drops degenerate axes (single particle, collinear rod)
    let inertia_inv = inertia.pseudo_inverse_sym(1e-9);
    let omega = inertia_inv.mul_vec(ang_mom);

    let v_com_new = v_com + force_total / m_total * dt;
    let omega_new = omega + inertia_inv.mul_vec(torque) * dt;
    let dq = Quat::from_scaled_axis(omega_new * dt);
    let com_new = com + v_com_new * dt;

    for p in &mut obj.particles {
        let r = dq.rotate(p.position - com);
        p.position = com_new + r;
        p.velocity = v_com_new + omega_new.cross(r);
    }

    // ground contact: resolve penetration by projection, then kill vertical
    // body velocity and apply Coulomb friction while touching
    let min_z = obj
        .particles
        .iter()
        .map(|p| p.position.z)
        .fold(f64::INFINITY, f64::min);
    if n > 0 && min_z <= floor_z {
        let lift = floor_z - min_z;
        let mut dv = Vec3::ZERO;
        if v_com_new.z < 0.0 {
            dv.z = -v_com_new.z;
        }
        let vt = vec3(v_com_new.x, v_com_new.y, 0.0);
        let vt_norm = vt.norm();
        if vt_norm > 0.0 {
            let decel = obj.params.friction_coefficient * gravity.z.abs() * dt;
            let scale = (1.0 - decel / vt_norm).max(0.0) - 1.0;
            dv += vt * scale;
        }
        for p in &mut obj.particles {
            p.position.z += lift;
            p.velocity += dv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vpp::{build_vpp, MaterialKind, MaterialParams};

    fn rigid_block(positions: &[Vec3]) -> VppObject {
        build_vpp(
            positions,
            MaterialKind::Rigid,
            MaterialParams::defaults_for(MaterialKind::Rigid),
            0.01,
            0,
            [0.5; 3],
            0.0,
            0.392,
        )
        .unwrap()
    }

    #[test]
    fn free_fall_matches_symplectic_sum() {
        let mut obj = rigid_block(&[vec3(0.0, 0.0, 10.0)]);
        let g = vec3(0.0, 0.0, -9.8);
        let dt = 1e-3;
        let n = 1000;
        let m = obj.particles[0].mass;
        for _ in 0..n {
            step_rigid(&mut obj, &[g * m], dt, -100.0, g);
        }
        let expected = -9.8 * dt * dt * (n as f64) * (n as f64 + 1.0) / 2.0;
        assert!((obj.particles[0].position.z - 10.0 - expected).abs() < 1e-9);
    }

    #[test]
    fn zero_force_zero_velocity_is_fixed_point() {
        let pts = [vec3(0.0, 0.0, 1.0), vec3(0.1, 0.0, 1.0), vec3(0.0, 0.1, 1.1)];
        let mut obj = rigid_block(&pts);
        let before = obj.particles.clone();
        step_rigid(&mut obj, &[Vec3::ZERO; 3], 1e-3, 0.0, vec3(0.0, 0.0, -9.8));
        assert_eq!(obj.particles, before);
    }

    #[test]
    fn sliding_block_coulomb_deceleration() {
        // block resting on the floor, sliding at 1 m/s; mu = 0.1 -> 0.98 m/s^2
        let pts = [vec3(0.0, 0.0, 0.0), vec3(0.02, 0.0, 0.0)];
        let mut obj = rigid_block(&pts);
        for p in &mut obj.particles {
            p.velocity = vec3(1.0, 0.0, 0.0);
        }
        let g = vec3(0.0, 0.0, -9.8);
        let dt = 1e-3;
        let forces: Vec<Vec3> = obj.particles.iter().map(|p| g * p.mass).collect();
        let v0 = obj.particles[0].velocity.x;
        step_rigid(&mut obj, &forces, dt, 0.0, g);
        let v1 = obj.particles[0].velocity.x;
        let decel = (v0 - v1) / dt;
        assert!((decel - 0.98).abs() < 1e-6, "decel = {decel}");
    }

    #[test]
    fn torque_spins_the_body() {
        let pts = [vec3(-0.1, 0.0, 1.0), vec3(0.1, 0.0, 1.0)];
        let mut obj = rigid_block(&pts);
        // opposing forces -> pure torque about y? (r x f) with f along z
        let f = [vec3(0.0, 0.0, -1.0), vec3(0.0, 0.0, 1.0)];
        step_rigid(&mut obj, &f, 1e-2, -10.0, Vec3::ZERO);
        assert!(obj.particles[1].velocity.z > 0.0);
        assert!(obj.particles[0].velocity.z < 0.0);
        // rigid: distance preserved
        let d = (obj.particles[1].position - obj.particles[0].position).norm();
        assert!((d - 0.2).abs() < 1e-9);
    }
}
