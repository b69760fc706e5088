//! Smoke as advected particles with buoyancy, linear drag, and seeded
//! diffusion jitter. A full gas solve is out of proportion at desk scale;
//! the linear-drag ODE gives this model an exact oracle.

use crate::math::Vec3;
use crate::vpp::{MaterialKind, VppObject};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// One symplectic step: accelerate, damp by exp(-viscosity*dt), advect.
/// Jitter displaces positions by up to `jitter_amplitude * delta` per second.
pub fn step_smoke(obj: &mut VppObject, forces: &[Vec3], dt: f64, rng: &mut ChaCha8Rng) {
    debug_assert_eq!(obj.material, MaterialKind::Smoke);
    let damping = (-obj.params.viscosity * dt).exp();
    let buoyancy = obj.smoke_buoyancy;
    let jitter_scale = obj.smoke_jitter * obj.particle_size * dt;
    for (p, f) in obj.particles.iter_mut().zip(forces) {
        p.velocity = (p.velocity + (*f / p.mass + buoyancy) * dt) * damping;
        p.position += p.velocity * dt;
        if jitter_scale > 0.0 {
            let j = Vec3 {
                x: rng.gen_range(-1.0..1.0),
                y: rng.gen_range(-1.0..1.0),
                z: rng.gen_range(-1.0..1.0),
            };
            p.position += j * jitter_scale;
        }
    }
}
