//! User actions: global force fields and local point forces over time intervals.

use crate::error::{Result, VppError};
use crate::math::{vec3, Vec3};
use crate::vpp::VppObject;
use serde::{Deserialize, Serialize};

/// Global force field presets, evaluated per particle position, in N/kg.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldKind {
    Constant { value: [f64; 3] },
    Gravity,
    Wind {
        direction: [f64; 3],
        strength: f64,
        /// gust oscillation, Hz; 0 = steady
        #[serde(default)]
        frequency: f64,
        /// gust amplitude relative to strength, in [0,1]
        #[serde(default)]
        gustiness: f64,
    },
}

impl FieldKind {
    pub fn eval(&self, p: Vec3, t: f64) -> Vec3 {
        match self {
            FieldKind::Constant { value } => vec3(value[0], value[1], value[2]),
            FieldKind::Gravity => vec3(0.0, 0.0, -9.8),
            FieldKind::Wind {
                direction,
                strength,
                frequency,
                gustiness,
            } => {
                let d = vec3(direction[0], direction[1], direction[2]);
                let n = d.norm();
                if n == 0.0 {
                    return Vec3::ZERO;
                }
                let phase = 2.0 * std::f64::consts::PI * (frequency * t + 0.1 * (p.x + p.y + p.z));
                d / n * (strength * (1.0 + gustiness * phase.sin()))
            }
        }
    }
}

/// Which particles of the target object a local force applies to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ParticleSelection {
    All,
    NearestToPoint { point: [f64; 3], radius: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    GlobalField {
        field: FieldKind,
        t0: f64,
        t1: f64,
    },
    LocalForce {
        /// total force in N, split equally among selected particles
        force: Vec<[f64; 3]>,
        /// seconds between force samples; single-sample series are constant
        #[serde(default)]
        sample_dt: Option<f64>,
        object: usize,
        selection: ParticleSelection,
        t0: f64,
        t1: f64,
    },
}

impl Action {
    pub fn interval(&self) -> (f64, f64) {
        match self {
            Action::GlobalField { t0, t1, .. } => (*t0, *t1),
            Action::LocalForce { t0, t1, .. } => (*t0, *t1),
        }
    }

    pub fn validate(&self, objects: &[VppObject]) -> Result<()> {
        let (t0, t1) = self.interval();
        if t0 > t1 {
            return Err(VppError::config(format!("action interval [{t0}, {t1}] inverted")));
        }
        if let Action::LocalForce {
            object,
            selection,
            force,
            ..
        } = self
        {
            if *object >= objects.len() {
                return Err(VppError::config(format!(
                    "action targets object {object} but scene has {}",
                    objects.len()
                )));
            }
            if force.is_empty() {
                return Err(VppError::config("local force series is empty"));
            }
            if let ParticleSelection::NearestToPoint { radius, .. } = selection {
                if *radius <= 0.0 {
                    return Err(VppError::config("selection radius must be > 0"));
                }
            }
        }
        Ok(())
    }
}

/// Per-particle forces (N) contributed by one action at time `t`, accumulated
/// into `forces[object][particle]`.
pub fn accumulate_action_force(
    objects: &[VppObject],
    action: &Action,
    t: f64,
    forces: &mut [Vec<Vec3>],
) -> Result<()> {
    action.validate(objects)?;
    if !t.is_finite() {
        return Err(VppError::invalid("time must be finite"));
    }
    let (t0, t1) = action.interval();
    if t < t0 || t > t1 {
        return Ok(());
    }
    match action {
        Action::GlobalField { field, .. } => {
            for (oi, obj) in objects.iter().enumerate() {
                for (pi, p) in obj.particles.iter().enumerate() {
                    forces[oi][pi] += field.eval(p.position, t) * p.mass;
                }
            }
        }
        Action::LocalForce {
            force,
            sample_dt,
            object,
            selection,
            ..
        } => {
            let obj = &objects[*object];
            let selected: Vec<usize> = match selection {
                ParticleSelection::All => (0..obj.particles.len()).collect(),
                ParticleSelection::NearestToPoint { point, radius } => {
                    let c = vec3(point[0], point[1], point[2]);
                    (0..obj.particles.len())
                        .filter(|&i| (obj.particles[i].position - c).norm() <= *radius)
                        .collect()
                }
            };
            if selected.is_empty() {
                return Ok(());
            }
            let f_total = if force.len() == 1 {
                force[0]
            } else {
                let dt = sample_dt.unwrap_or((t1 - t0) / force.len() as f64);
                let idx = (((t - t0) / dt).floor() as usize).min(force.len() - 1);
                force[idx]
            };
            let per = vec3(f_total[0], f_total[1], f_total[2]) / selected.len() as f64;
            for i in selected {
                forces[*object][i] += per;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vpp::{build_vpp, MaterialKind, MaterialParams};

    fn test_object(n: usize) -> VppObject {
        let pts: Vec<Vec3> = (0..n).map(|i| vec3(i as f64, 0.0, 0.0)).collect();
        let mut obj = build_vpp(
            &pts,
            MaterialKind::Rigid,
            MaterialParams::defaults_for(MaterialKind::Rigid),
            0.01,
            0,
            [0.5; 3],
            0.0,
            1.0,
        )
        .unwrap();
        for p in &mut obj.particles {
            p.mass = 1.0;
        }
        obj
    }

    #[test]
    fn gravity_preset_force() {
        let objs = vec![test_object(3)];
        let mut f = vec![vec![Vec3::ZERO; 3]];
        let a = Action::GlobalField {
            field: FieldKind::Gravity,
            t0: 0.0,
            t1: 1.0,
        };
        accumulate_action_force(&objs, &a, 0.5, &mut f).unwrap();
        for v in &f[0] {
            assert_eq!(*v, vec3(0.0, 0.0, -9.8));
        }
    }

    #[test]
    fn zero_outside_interval() {
        let objs = vec![test_object(2)];
        let mut f = vec![vec![Vec3::ZERO; 2]];
        let a = Action::GlobalField {
            field: FieldKind::Gravity,
            t0: 0.0,
            t1: 1.0,
        };
        accumulate_action_force(&objs, &a, 2.0, &mut f).unwrap();
        assert_eq!(f[0][0], Vec3::ZERO);
    }

    #[test]
    fn local_force_equal_split() {
        let objs = vec![test_object(4)];
        let mut f = vec![vec![Vec3::ZERO; 4]];
        let a = Action::LocalForce {
            force: vec![[2.0, 0.0, 0.0]],
            sample_dt: None,
            object: 0,
            selection: ParticleSelection::All,
            t0: 0.0,
            t1: 1.0,
        };
        accumulate_action_force(&objs, &a, 0.5, &mut f).unwrap();
        for v in &f[0] {
            assert_eq!(*v, vec3(0.5, 0.0, 0.0));
        }
    }

    #[test]
    fn missing_object_is_config_error() {
        let objs = vec![test_object(1)];
        let mut f = vec![vec![Vec3::ZERO; 1]];
        let a = Action::LocalForce {
            force: vec![[1.0, 0.0, 0.0]],
            sample_dt: None,
            object: 5,
            selection: ParticleSelection::All,
            t0: 0.0,
            t1: 1.0,
        };
        assert!(accumulate_action_force(&objs, &a, 0.5, &mut f).is_err());
    }
}
