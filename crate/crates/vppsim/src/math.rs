//! Minimal f64 vector/quaternion types used throughout the solvers and renderer.

use serde::{Deserialize, Serialize};
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

pub const fn vec3(x: f64, y: f64, z: f64) -> Vec3 {
    Vec3 { x, y, z }
}

impl Vec3 {
    pub const ZERO: Vec3 = vec3(0.0, 0.0, 0.0);

    pub fn splat(v: f64) -> Vec3 {
        vec3(v, v, v)
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        vec3(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm_inf(self) -> f64 {
        self.x.abs().max(self.y.abs()).max(self.z.abs())
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn map(self, f: impl Fn(f64) -> f64) -> Vec3 {
        vec3(f(self.x), f(self.y), f(self.z))
    }

    pub fn min(self, o: Vec3) -> Vec3 {
        vec3(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    pub fn max(self, o: Vec3) -> Vec3 {
        vec3(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    pub fn get(self, axis: usize) -> f64 {
        match axis {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }

    pub fn set(&mut self, axis: usize, v: f64) {
        match axis {
            0 => self.x = v,
            1 => self.y = v,
            _ => self.z = v,
        }
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        vec3(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        vec3(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl SubAssign for Vec3 {
    fn sub_assign(&mut self, o: Vec3) {
        *self = *self - o;
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        vec3(self.x * s, self.y * s, self.z * s)
    }
}

impl Mul<Vec3> for f64 {
    type Output = Vec3;
    fn mul(self, v: Vec3) -> Vec3 {
        v * self
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        vec3(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        vec3(-self.x, -self.y, -self.z)
    }
}

/// Unit quaternion, (w, x, y, z) storage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Quat {
        Quat { w, x, y, z }
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(self) -> Quat {
        let n = self.norm();
        Quat::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    pub fn mul(self, o: Quat) -> Quat {
        Quat::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }

    /// Rotate a vector by this quaternion.
    pub fn rotate(self, v: Vec3) -> Vec3 {
        let u = vec3(self.x, self.y, self.z);
        let t = u.cross(v) * 2.0;
        v + t * self.w + u.cross(t)
    }

    pub fn conjugate(self) -> Quat {
        Quat::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Quaternion from an axis-angle rotation vector (angle = |v|).
    pub fn from_scaled_axis(v: Vec3) -> Quat {
        let angle = v.norm();
        if angle < 1e-12 {
            // first-order expansion keeps the update smooth near zero
            Quat::new(1.0, v.x * 0.5, v.y * 0.5, v.z * 0.5).normalized()
        } else {
            let half = angle * 0.5;
            let s = half.sin() / angle;
            Quat::new(half.cos(), v.x * s, v.y * s, v.z * s)
        }
    }
}

impl Default for Quat {
    fn default() -> Self {
        Quat::IDENTITY
    }
}

/// Column-major 3x3 matrix for MPM deformation gradients and affine velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mat3 {
    /// columns
    pub c: [Vec3; 3],
}

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3 {
        c: [vec3(1.0, 0.0, 0.0), vec3(0.0, 1.0, 0.0), vec3(0.0, 0.0, 1.0)],
    };

    pub const ZERO: Mat3 = Mat3 {
        c: [Vec3::ZERO, Vec3::ZERO, Vec3::ZERO],
    };

    pub fn from_cols(c0: Vec3, c1: Vec3, c2: Vec3) -> Mat3 {
        Mat3 { c: [c0, c1, c2] }
    }

    /// Outer product a * b^T.
    pub fn outer(a: Vec3, b: Vec3) -> Mat3 {
        Mat3::from_cols(a * b.x, a * b.y, a * b.z)
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        self.c[0] * v.x + self.c[1] * v.y + self.c[2] * v.z
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        Mat3::from_cols(self.mul_vec(o.c[0]), self.mul_vec(o.c[1]), self.mul_vec(o.c[2]))
    }

    pub fn transpose(&self) -> Mat3 {
        Mat3::from_cols(
            vec3(self.c[0].x, self.c[1].x, self.c[2].x),
            vec3(self.c[0].y, self.c[1].y, self.c[2].y),
            vec3(self.c[0].z, self.c[1].z, self.c[2].z),
        )
    }

    pub fn det(&self) -> f64 {
        self.c[0].dot(self.c[1].cross(self.c[2]))
    }

    pub fn trace(&self) -> f64 {
        self.c[0].x + self.c[1].y + self.c[2].z
    }

    pub fn scale(&self, s: f64) -> Mat3 {
        Mat3::from_cols(self.c[0] * s, self.c[1] * s, self.c[2] * s)
    }

    pub fn add(&self, o: &Mat3) -> Mat3 {
        Mat3::from_cols(self.c[0] + o.c[0], self.c[1] + o.c[1], self.c[2] + o.c[2])
    }

    pub fn sub(&self, o: &Mat3) -> Mat3 {
        Mat3::from_cols(self.c[0] - o.c[0], self.c[1] - o.c[1], self.c[2] - o.c[2])
    }

    /// Polar decomposition F = R * S via iterative averaging of F and F^-T.
    /// Converges quadratically for non-degenerate F; used by the corotated model.
    pub fn polar_rotation(&self) -> Mat3 {
        let mut r = *self;
        for _ in 0..40 {
            let rinv_t = match r.inverse() {
                Some(inv) => inv.transpose(),
                None => return Mat3::IDENTITY,
            };
            let next = r.add(&rinv_t).scale(0.5);
            let diff = next.sub(&r);
            r = next;
            let err = diff.c[0].norm_sq() + diff.c[1].norm_sq() + diff.c[2].norm_sq();
            if err < 1e-28 {
                break;
            }
        }
        r
    }

    /// Eigendecomposition of a symmetric matrix via cyclic Jacobi sweeps.
    /// Returns (eigenvalues, eigenvector columns); fully deterministic.
    pub fn sym_eigen(&self) -> ([f64; 3], Mat3) {
        let a = self;
        let mut m = [
            [a.c[0].x, a.c[1].x, a.c[2].x],
            [a.c[0].y, a.c[1].y, a.c[2].y],
            [a.c[0].z, a.c[1].z, a.c[2].z],
        ];
        let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        for _ in 0..16 {
            let off = m[0][1] * m[0][1] + m[0][2] * m[0][2] + m[1][2] * m[1][2];
            if off < 1e-30 {
                break;
            }
            for &(p, q) in &[(0usize, 1usize), (0, 2), (1, 2)] {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let rot = |mat: &mut [[f64; 3]; 3]| {
                    for i in 0..3 {
                        let mip = mat[i][p];
                        let miq = mat[i][q];
                        mat[i][p] = c * mip - s * miq;
                        mat[i][q] = s * mip + c * miq;
                    }
                };
                rot(&mut m);
                for i in 0..3 {
                    let mpi = m[p][i];
                    let mqi = m[q][i];
                    m[p][i] = c * mpi - s * mqi;
                    m[q][i] = s * mpi + c * mqi;
                }
                rot(&mut v);
            }
        }
        let vals = [m[0][0], m[1][1], m[2][2]];
        let vecs = Mat3::from_cols(
            vec3(v[0][0], v[1][0], v[2][0]),
            vec3(v[0][1], v[1][1], v[2][1]),
            vec3(v[0][2], v[1][2], v[2][2]),
        );
        (vals, vecs)
    }

    /// Pseudo-inverse of a symmetric PSD matrix; eigenvalues below
    /// `rel_tol * max_eig` are treated as zero (degenerate axes dropped).
    pub fn pseudo_inverse_sym(&self, rel_tol: f64) -> Mat3 {
        let (vals, vecs) = self.sym_eigen();
        let max_eig = vals.iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
        if max_eig == 0.0 {
            return Mat3::ZERO;
        }
        let mut out = Mat3::ZERO;
        for i in 0..3 {
            if vals[i].abs() > rel_tol * max_eig {
                out = out.add(&Mat3::outer(vecs.c[i], vecs.c[i]).scale(1.0 / vals[i]));
            }
        }
        out
    }

    pub fn inverse(&self) -> Option<Mat3> {
        let d = self.det();
        if d.abs() < 1e-300 {
            return None;
        }
        let inv_d = 1.0 / d;
        let a = self.transpose();
        Some(Mat3::from_cols(
            a.c[1].cross(a.c[2]) * inv_d,
            a.c[2].cross(a.c[0]) * inv_d,
            a.c[0].cross(a.c[1]) * inv_d,
        ))
    }
}
