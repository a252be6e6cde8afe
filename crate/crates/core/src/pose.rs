//! Rigid camera poses and quaternion algebra.
//!
//! A [`CameraPose`] maps camera coordinates to world coordinates. Camera
//! axes are x right, y down, z forward.

use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};

/// Tolerance on `‖q‖ = 1` for poses entering the model.
pub const UNIT_TOLERANCE: f64 = 1e-6;

pub type Vec3 = [f64; 3];

pub fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn norm3(a: Vec3) -> f64 {
    dot3(a, a).sqrt()
}

pub fn normalize3(a: Vec3) -> Vec3 {
    let n = norm3(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Hamilton quaternion `w + xi + yj + zk`.
#[derive(Clone, Copy, Debug, PartialEq)]
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

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let a = normalize3(axis);
        let (s, c) = (angle / 2.0).sin_cos();
        Quat::new(c, a[0] * s, a[1] * s, a[2] * s)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(&self, o: &Quat) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn normalized(&self) -> Quat {
        let n = self.norm();
        Quat::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    pub fn neg(&self) -> Quat {
        Quat::new(-self.w, -self.x, -self.y, -self.z)
    }

    /// Representative with non-negative real part.
    pub fn sign_fixed(&self) -> Quat {
        if self.w < 0.0 {
            self.neg()
        } else {
            *self
        }
    }

    pub fn conjugate(&self) -> Quat {
        Quat::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn mul(&self, o: &Quat) -> Quat {
        Quat::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        let p = Quat::new(0.0, v[0], v[1], v[2]);
        let r = self.mul(&p).mul(&self.conjugate());
        [r.x, r.y, r.z]
    }

    /// Geodesic angle (radians) of the relative rotation.
    pub fn angle_to(&self, o: &Quat) -> f64 {
        let d = (self.normalized().dot(&o.normalized())).abs().min(1.0);
        2.0 * d.acos()
    }

    /// Rotation whose columns are the given orthonormal axes.
    pub fn from_columns(c0: Vec3, c1: Vec3, c2: Vec3) -> Quat {
        let (m00, m11, m22) = (c0[0], c1[1], c2[2]);
        let trace = m00 + m11 + m22;
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            Quat::new(0.25 * s, (c1[2] - c2[1]) / s, (c2[0] - c0[2]) / s, (c0[1] - c1[0]) / s)
        } else if m00 > m11 && m00 > m22 {
            let s = (1.0 + m00 - m11 - m22).sqrt() * 2.0;
            Quat::new((c1[2] - c2[1]) / s, 0.25 * s, (c1[0] + c0[1]) / s, (c2[0] + c0[2]) / s)
        } else if m11 > m22 {
            let s = (1.0 + m11 - m00 - m22).sqrt() * 2.0;
            Quat::new((c2[0] - c0[2]) / s, (c1[0] + c0[1]) / s, 0.25 * s, (c2[1] + c1[2]) / s)
        } else {
            let s = (1.0 + m22 - m00 - m11).sqrt() * 2.0;
            Quat::new((c0[1] - c1[0]) / s, (c2[0] + c0[2]) / s, (c2[1] + c1[2]) / s, 0.25 * s)
        };
        q.normalized().sign_fixed()
    }
}

/// Camera position plus unit orientation quaternion with `w >= 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    pub position: Vec3,
    pub orientation: Quat,
}

impl CameraPose {
    pub const IDENTITY: CameraPose = CameraPose {
        position: [0.0; 3],
        orientation: Quat::IDENTITY,
    };

    /// Builds a pose, normalising and sign-fixing the quaternion.
    pub fn new(position: Vec3, orientation: Quat) -> Result<Self> {
        let n = orientation.norm();
        if !n.is_finite() || n < 1e-12 || position.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "degenerate pose {position:?} {orientation:?}"
            )));
        }
        Ok(CameraPose {
            position,
            orientation: orientation.normalized().sign_fixed(),
        })
    }

    /// `[px, py, pz, qw, qx, qy, qz]`.
    pub fn from_array(v: [f64; 7]) -> Result<Self> {
        Self::new([v[0], v[1], v[2]], Quat::new(v[3], v[4], v[5], v[6]))
    }

    pub fn to_array(&self) -> [f64; 7] {
        let q = self.orientation;
        [self.position[0], self.position[1], self.position[2], q.w, q.x, q.y, q.z]
    }

    /// Rounds every component to `f32`, the precision used on disk.
    pub fn to_f32_precision(&self) -> CameraPose {
        let r = |v: f64| f64::from(v as f32);
        let q = self.orientation;
        CameraPose {
            position: [r(self.position[0]), r(self.position[1]), r(self.position[2])],
            orientation: Quat::new(r(q.w), r(q.x), r(q.y), r(q.z)),
        }
    }

    /// Camera at `eye` looking at `target`, image "up" as close to `up` as possible.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let forward = normalize3(sub3(target, eye));
        let right = cross(forward, up);
        if norm3(right) < 1e-9 {
            return Err(Error::Validation("look_at direction parallel to up vector".into()));
        }
        let right = normalize3(right);
        let down = cross(forward, right);
        CameraPose::new(eye, Quat::from_columns(right, down, forward))
    }

    pub fn is_unit(&self) -> bool {
        (self.orientation.norm() - 1.0).abs() <= UNIT_TOLERANCE
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &CameraPose) -> CameraPose {
        CameraPose {
            position: add3(self.position, self.orientation.rotate(other.position)),
            orientation: self.orientation.mul(&other.orientation).normalized().sign_fixed(),
        }
    }

    pub fn inverse(&self) -> CameraPose {
        let inv = self.orientation.conjugate();
        let p = inv.rotate(self.position);
        CameraPose {
            position: [-p[0], -p[1], -p[2]],
            orientation: inv,
        }
    }

    /// This pose expressed in the frame of `reference`.
    pub fn relative_to(&self, reference: &CameraPose) -> CameraPose {
        reference.inverse().compose(self)
    }

    /// World point → camera coordinates.
    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        self.orientation.conjugate().rotate(sub3(p, self.position))
    }
}

/// Expresses every pose relative to the first one; the first becomes the
/// identity. Quaternions are renormalised and sign-fixed.
pub fn canonicalize_poses(poses: &[CameraPose]) -> Result<Vec<CameraPose>> {
    let first = poses
        .first()
        .ok_or_else(|| Error::Validation("cannot canonicalize an empty pose list".into()))?;
    if let Some((i, p)) = poses.iter().enumerate().find(|(_, p)| !p.is_unit()) {
        return Err(Error::Validation(format!(
            "pose {i} has non-unit quaternion (norm {})",
            p.orientation.norm()
        )));
    }
    Ok(core::iter::once(CameraPose::IDENTITY)
        .chain(poses[1..].iter().map(|p| p.relative_to(first)))
        .collect())
}

/// Averages per-token pose estimates `[px, py, pz, qw, qx, qy, qz]`:
/// positions by arithmetic mean, quaternions by sign alignment to the first
/// estimate, mean and renormalisation.
pub fn average_poses(estimates: &[[f64; 7]]) -> Result<CameraPose> {
    let first = estimates
        .first()
        .ok_or_else(|| Error::Estimation("no pose estimates to average".into()))?;
    let reference = Quat::new(first[3], first[4], first[5], first[6]);
    let n = estimates.len() as f64;
    let mut pos = [0.0; 3];
    let mut q = [0.0; 4];
    for e in estimates {
        for i in 0..3 {
            pos[i] += e[i] / n;
        }
        let qi = Quat::new(e[3], e[4], e[5], e[6]);
        let s = if qi.dot(&reference) < 0.0 { -1.0 } else { 1.0 };
        for i in 0..4 {
            q[i] += s * e[3 + i] / n;
        }
    }
    let mean = Quat::new(q[0], q[1], q[2], q[3]);
    if mean.norm() < 1e-6 {
        return Err(Error::Estimation(format!("degenerate quaternion mean {mean:?}")));
    }
    CameraPose::new(pos, mean).map_err(|e| Error::Estimation(format!("{e}")))
}
