//! Versioned binary checkpoints: `VPPC` magic, u32 format version, then the
//! scene state as little-endian counts followed by flat arrays in declared
//! field order. Round trips are bit-exact.

use crate::math::{vec3, Quat, Vec3};
use crate::vpp::{BackgroundGaussian, MaterialKind, MaterialParams, PhysicsParticle, SceneState, VppGaussian, VppObject};
use crate::{Result, VppError};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"VPPC";
pub const VERSION: u32 = 1;

struct Writer<W: Write> {
    w: W,
}

impl<W: Write> Writer<W> {
    fn f64(&mut self, v: f64) -> Result<()> {
        self.w.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        self.w.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn u8(&mut self, v: u8) -> Result<()> {
        self.w.write_all(&[v])?;
        Ok(())
    }
    fn vec3(&mut self, v: Vec3) -> Result<()> {
        self.f64(v.x)?;
        self.f64(v.y)?;
        self.f64(v.z)
    }
    fn quat(&mut self, q: Quat) -> Result<()> {
        self.f64(q.w)?;
        self.f64(q.x)?;
        self.f64(q.y)?;
        self.f64(q.z)
    }
    fn rgb(&mut self, c: [f64; 3]) -> Result<()> {
        self.f64(c[0])?;
        self.f64(c[1])?;
        self.f64(c[2])
    }
}

struct Reader<R: Read> {
    r: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.r
            .read_exact(&mut b)
            .map_err(|e| VppError::Checkpoint(format!("truncated: {e}")))?;
        Ok(b)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn count(&mut self) -> Result<usize> {
        let v = self.u64()?;
        if v > 1 << 32 {
            return Err(VppError::Checkpoint(format!("implausible count {v}")));
        }
        Ok(v as usize)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    fn vec3(&mut self) -> Result<Vec3> {
        Ok(vec3(self.f64()?, self.f64()?, self.f64()?))
    }
    fn quat(&mut self) -> Result<Quat> {
        Ok(Quat::new(self.f64()?, self.f64()?, self.f64()?, self.f64()?))
    }
    fn rgb(&mut self) -> Result<[f64; 3]> {
        Ok([self.f64()?, self.f64()?, self.f64()?])
    }
}

fn material_tag(kind: MaterialKind) -> u8 {
    match kind {
        MaterialKind::Rigid => 0,
        MaterialKind::Elastic => 1,
        MaterialKind::Liquid => 2,
        MaterialKind::Sand => 3,
        MaterialKind::Snow => 4,
        MaterialKind::Cloth => 5,
        MaterialKind::Smoke => 6,
    }
}

fn material_from_tag(tag: u8) -> Result<MaterialKind> {
    Ok(match tag {
        0 => MaterialKind::Rigid,
        1 => MaterialKind::Elastic,
        2 => MaterialKind::Liquid,
        3 => MaterialKind::Sand,
        4 => MaterialKind::Snow,
        5 => MaterialKind::Cloth,
        6 => MaterialKind::Smoke,
        other => return Err(VppError::Checkpoint(format!("unknown material tag {other}"))),
    })
}

pub fn write_state<W: Write>(out: W, state: &SceneState) -> Result<()> {
    let mut w = Writer { w: out };
    w.w.write_all(&MAGIC)?;
    w.w.write_all(&VERSION.to_le_bytes())?;
    w.f64(state.sim_time)?;

    w.u64(state.background.len() as u64)?;
    for b in &state.background {
        w.vec3(b.position)?;
        w.f64(b.spatial_opacity)?;
        w.f64(b.temporal_center)?;
        w.f64(b.temporal_duration)?;
        w.quat(b.rotation)?;
        w.rgb(b.color)?;
        w.f64(b.scale)?;
    }

    w.u64(state.objects.len() as u64)?;
    for obj in &state.objects {
        w.u64(obj.particles.len() as u64)?;
        w.u64(obj.gaussians_per_particle as u64)?;
        w.f64(obj.particle_size)?;
        w.u8(material_tag(obj.material))?;
        let p = &obj.params;
        for v in [
            p.youngs_modulus,
            p.poisson_ratio,
            p.friction_angle,
            p.friction_coefficient,
            p.stretch_compliance,
            p.bending_compliance,
            p.viscosity,
            p.density,
        ] {
            w.f64(v)?;
        }
        match obj.grid_dims {
            Some((a, b)) => {
                w.u8(1)?;
                w.u64(a as u64)?;
                w.u64(b as u64)?;
            }
            None => w.u8(0)?,
        }
        w.vec3(obj.smoke_buoyancy)?;
        w.f64(obj.smoke_jitter)?;
        for part in &obj.particles {
            w.vec3(part.position)?;
            w.vec3(part.velocity)?;
            w.f64(part.mass)?;
        }
        for g in &obj.gaussians {
            w.vec3(g.raw_offset)?;
            w.f64(g.spatial_opacity)?;
            w.f64(g.temporal_center)?;
            w.f64(g.temporal_duration)?;
            w.quat(g.rotation)?;
            w.rgb(g.color)?;
            w.f64(g.scale)?;
        }
        w.u64(obj.pinned.len() as u64)?;
        for &pin in &obj.pinned {
            w.u8(pin as u8)?;
        }
    }
    Ok(())
}

pub fn read_state<R: Read>(input: R) -> Result<SceneState> {
    let mut r = Reader { r: input };
    let magic: [u8; 4] = r.bytes()?;
    if magic != MAGIC {
        return Err(VppError::Checkpoint("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(r.bytes()?);
    if version != VERSION {
        return Err(VppError::Checkpoint(format!("unsupported version {version}")));
    }
    let sim_time = r.f64()?;

    let n_bg = r.count()?;
    let mut background = Vec::with_capacity(n_bg);
    for _ in 0..n_bg {
        background.push(BackgroundGaussian {
            position: r.vec3()?,
            spatial_opacity: r.f64()?,
            temporal_center: r.f64()?,
            temporal_duration: r.f64()?,
            rotation: r.quat()?,
            color: r.rgb()?,
            scale: r.f64()?,
        });
    }

    let n_obj = r.count()?;
    let mut objects = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        let n_particles = r.count()?;
        let gaussians_per_particle = r.count()?;
        let particle_size = r.f64()?;
        let material = material_from_tag(r.u8()?)?;
        let params = MaterialParams {
            youngs_modulus: r.f64()?,
            poisson_ratio: r.f64()?,
            friction_angle: r.f64()?,
            friction_coefficient: r.f64()?,
            stretch_compliance: r.f64()?,
            bending_compliance: r.f64()?,
            viscosity: r.f64()?,
            density: r.f64()?,
        };
        let grid_dims = match r.u8()? {
            0 => None,
            1 => Some((r.count()?, r.count()?)),
            other => return Err(VppError::Checkpoint(format!("bad grid_dims tag {other}"))),
        };
        let smoke_buoyancy = r.vec3()?;
        let smoke_jitter = r.f64()?;
        let mut particles = Vec::with_capacity(n_particles);
        for _ in 0..n_particles {
            particles.push(PhysicsParticle {
                position: r.vec3()?,
                velocity: r.vec3()?,
                mass: r.f64()?,
            });
        }
        let mut gaussians = Vec::with_capacity(n_particles * gaussians_per_particle);
        for _ in 0..n_particles * gaussians_per_particle {
            gaussians.push(VppGaussian {
                raw_offset: r.vec3()?,
                spatial_opacity: r.f64()?,
                temporal_center: r.f64()?,
                temporal_duration: r.f64()?,
                rotation: r.quat()?,
                color: r.rgb()?,
                scale: r.f64()?,
            });
        }
        let n_pinned = r.count()?;
        let mut pinned = Vec::with_capacity(n_pinned);
        for _ in 0..n_pinned {
            pinned.push(r.u8()? != 0);
        }
        objects.push(VppObject {
            particles,
            gaussians,
            gaussians_per_particle,
            particle_size,
            material,
            params,
            grid_dims,
            pinned,
            smoke_buoyancy,
            smoke_jitter,
        });
    }
    Ok(SceneState { background, objects, sim_time })
}

pub fn save(path: &Path, state: &SceneState) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut buf = std::io::BufWriter::new(file);
    write_state(&mut buf, state)?;
    buf.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<SceneState> {
    let file = std::fs::File::open(path)?;
    read_state(std::io::BufReader::new(file))
}
