//! Forward physics pass: multi-material particle solvers advancing the
//! scene under actions, producing the coarse trajectory for one window.

pub mod action;
pub mod cloth;
pub mod mpm;
pub mod rigid;
pub mod smoke;

pub use action::{accumulate_action_force, Action, FieldKind, ParticleSelection};

use crate::error::{Result, VppError};
use crate::math::{vec3, Vec3};
use crate::vpp::{MaterialKind, SceneState};
use mpm::{MpmGrid, MpmParticleState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl DomainBox {
    pub fn min_v(&self) -> Vec3 {
        vec3(self.min[0], self.min[1], self.min[2])
    }
    pub fn max_v(&self) -> Vec3 {
        vec3(self.max[0], self.max[1], self.max[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// s
    pub step_time: f64,
    pub substeps: usize,
    /// m
    pub particle_size: f64,
    /// m/s^2
    pub gravity: [f64; 3],
    /// nodes per axis along the longest domain extent
    pub grid_density: usize,
    pub domain: DomainBox,
    pub steps_per_window: usize,
    /// physics steps per stored frame
    pub sample_stride: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            step_time: 1e-3,
            substeps: 10,
            particle_size: 1e-2,
            gravity: [0.0, 0.0, -9.8],
            grid_density: 64,
            domain: DomainBox {
                min: [-2.0, -2.0, 0.0],
                max: [2.0, 2.0, 4.0],
            },
            steps_per_window: 392,
            sample_stride: 8,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn gravity_v(&self) -> Vec3 {
        vec3(self.gravity[0], self.gravity[1], self.gravity[2])
    }

    pub fn window_duration(&self) -> f64 {
        self.steps_per_window as f64 * self.step_time
    }

    pub fn validate(&self) -> Result<()> {
        if self.step_time <= 0.0 {
            return Err(VppError::config("step_time must be > 0"));
        }
        if self.substeps < 1 {
            return Err(VppError::config("substeps must be >= 1"));
        }
        if self.grid_density < 8 {
            return Err(VppError::config("grid_density must be >= 8"));
        }
        if self.sample_stride < 1 || self.steps_per_window % self.sample_stride != 0 {
            return Err(VppError::config(
                "sample_stride must divide steps_per_window",
            ));
        }
        let (mn, mx) = (self.domain.min_v(), self.domain.max_v());
        if mn.x >= mx.x || mn.y >= mx.y || mn.z >= mx.z {
            return Err(VppError::config("domain box is empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<SceneState>,
    pub sample_stride: usize,
    pub steps_per_window: usize,
    pub step_time: f64,
}

impl Trajectory {
    /// Number of rendered transitions (49 at defaults).
    pub fn frame_count(&self) -> usize {
        self.states.len() - 1
    }

    pub fn frame_interval(&self) -> f64 {
        self.sample_stride as f64 * self.step_time
    }
}

/// Advance `count` outer steps in place; `on_snapshot` is called after
/// every `sample_stride` steps. Exposed separately from [`forward_window`]
/// so tests can drive one long uninterrupted run.
pub fn advance_steps(
    state: &mut SceneState,
    actions: &[Action],
    config: &SimConfig,
    count: usize,
    step_offset: usize,
    mut on_snapshot: impl FnMut(&SceneState),
) -> Result<()> {
    config.validate()?;
    for a in actions {
        a.validate(&state.objects)?;
    }

    let dmin = config.domain.min_v();
    let dmax = config.domain.max_v();
    let mpm_indices: Vec<usize> = state
        .objects
        .iter()
        .enumerate()
        .filter(|(_, o)| o.material.uses_mpm())
        .map(|(i, _)| i)
        .collect();
    let mut mpm_states: Vec<MpmParticleState> = mpm_indices
        .iter()
        .map(|&i| MpmParticleState::new(state.objects[i].particles.len()))
        .collect();
    let mut grid = if mpm_indices.is_empty() {
        None
    } else {
        Some(MpmGrid::new(dmin, dmax, config.grid_density))
    };
    // smoke jitter stream, offset by the window's first step for continuity
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x736d6f6b65);
    let gravity = config.gravity_v();
    let dt_sub = config.step_time / config.substeps as f64;
    let mut clamped_total = 0usize;

    for step in 0..count {
        let global_step = step_offset + step;
        let t = state.sim_time;

        // forces at step start, in N, including ambient gravity
        let mut forces: Vec<Vec<Vec3>> = state
            .objects
            .iter()
            .map(|o| o.particles.iter().map(|p| gravity * p.mass).collect())
            .collect();
        for a in actions {
            accumulate_action_force(&state.objects, a, t, &mut forces)?;
        }

        for _ in 0..config.substeps {
            for (oi, obj) in state.objects.iter_mut().enumerate() {
                match obj.material {
                    MaterialKind::Rigid => {
                        rigid::step_rigid(obj, &forces[oi], dt_sub, dmin.z, gravity)
                    }
                    MaterialKind::Smoke => smoke::step_smoke(obj, &forces[oi], dt_sub, &mut rng),
                    _ => {}
                }
            }
            if let Some(grid) = grid.as_mut() {
                clamped_total += mpm::step_mpm(
                    &mut state.objects,
                    &mpm_indices,
                    &mut mpm_states,
                    &forces,
                    dt_sub,
                    grid,
                    dmin,
                    dmax,
                );
            }
        }
        // cloth runs once per outer step; substeps become projection iterations
        for (oi, obj) in state.objects.iter_mut().enumerate() {
            if obj.material == MaterialKind::Cloth {
                cloth::step_cloth(obj, &forces[oi], config.step_time, config.substeps)?;
            }
        }

        // domain containment for non-MPM materials
        for obj in &mut state.objects {
            if obj.material.uses_mpm() {
                continue;
            }
            for p in &mut obj.particles {
                for axis in 0..3 {
                    let (lo, hi) = (dmin.get(axis), dmax.get(axis));
                    let x = p.position.get(axis);
                    if x < lo {
                        p.position.set(axis, lo);
                        p.velocity.set(axis, 0.0);
                    } else if x > hi {
                        p.position.set(axis, hi);
                        p.velocity.set(axis, 0.0);
                    }
                }
            }
        }

        state.sim_time = t + config.step_time;
        for obj in &state.objects {
            for p in &obj.particles {
                if !p.position.is_finite() || !p.velocity.is_finite() {
                    return Err(VppError::SimulationDiverged {
                        step: global_step,
                        detail: "non-finite particle state".into(),
                    });
                }
            }
        }
        if (step + 1) % config.sample_stride == 0 {
            on_snapshot(state);
        }
    }
    if clamped_total > 0 {
        eprintln!("warning: {clamped_total} particle/axis clamps at the domain boundary");
    }
    Ok(())
}

/// Forward physics pass over one window: runs `steps_per_window` outer steps
/// and snapshots every `sample_stride` steps including step 0.
pub fn forward_window(state: &SceneState, actions: &[Action], config: &SimConfig) -> Result<Trajectory> {
    let mut cur = state.clone();
    let mut states = vec![cur.clone()];
    advance_steps(&mut cur, actions, config, config.steps_per_window, 0, |s| {
        states.push(s.clone())
    })?;
    Ok(Trajectory {
        states,
        sample_stride: config.sample_stride,
        steps_per_window: config.steps_per_window,
        step_time: config.step_time,
    })
}
