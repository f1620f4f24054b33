//! Rigid camera poses and pinhole intrinsics.
//!
//! Camera frames are right-handed with +x right, +y down and +z forward.
//! A [`CameraPose`] maps points `p ↦ R·p + t`. Used as a relative pose from a
//! source camera to a target camera it is the target camera's pose expressed
//! in the source frame: `t` is where the target camera sits and `R` its
//! orientation, so a forward step is a translation along +z.

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Mat3 = Matrix3<f64>;
pub type Vec3 = Vector3<f64>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for CameraPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl CameraPose {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn translation(x: f64, y: f64, z: f64) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::new(x, y, z),
        }
    }

    pub fn from_rotation(rotation: Mat3) -> Self {
        Self {
            rotation,
            translation: Vec3::zeros(),
        }
    }

    /// Orientation from yaw (about +y, positive turns right), pitch (about +x,
    /// positive looks up) and roll (about +z), all in degrees, applied as
    /// `yaw · pitch · roll`.
    pub fn from_euler_deg(yaw: f64, pitch: f64, roll: f64, translation: Vec3) -> Self {
        Self {
            rotation: rot_y(yaw.to_radians()) * rot_x(pitch.to_radians()) * rot_z(roll.to_radians()),
            translation,
        }
    }

    /// `a ∘ b`: applies `b` first, then `a`.
    pub fn compose(&self, b: &CameraPose) -> CameraPose {
        CameraPose {
            rotation: self.rotation * b.rotation,
            translation: self.rotation * b.translation + self.translation,
        }
    }

    pub fn invert(&self) -> CameraPose {
        let rt = self.rotation.transpose();
        CameraPose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Express a point given in the source frame in this (target) camera's
    /// frame.
    pub fn to_target_frame(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidPose("non-finite entries".into()));
        }
        let err = (self.rotation.transpose() * self.rotation - Mat3::identity()).abs().max();
        if err > 1e-6 {
            return Err(Error::InvalidPose(format!(
                "rotation is not orthonormal (error {err:e})"
            )));
        }
        if self.rotation.determinant() < 0.0 {
            return Err(Error::InvalidPose("rotation has negative determinant".into()));
        }
        Ok(())
    }

    /// Largest entrywise deviation from `other`.
    pub fn distance(&self, other: &CameraPose) -> f64 {
        (self.rotation - other.rotation)
            .abs()
            .max()
            .max((self.translation - other.translation).abs().max())
    }

    pub fn to_matrix(&self) -> [[f64; 4]; 4] {
        let mut m = [[0.0; 4]; 4];
        for (r, row) in m.iter_mut().enumerate().take(3) {
            for (c, v) in row.iter_mut().enumerate().take(3) {
                *v = self.rotation[(r, c)];
            }
            row[3] = self.translation[r];
        }
        m[3][3] = 1.0;
        m
    }

    pub fn from_matrix(m: &[[f64; 4]; 4]) -> Result<Self> {
        let last = m[3];
        if (last[0].abs() + last[1].abs() + last[2].abs() + (last[3] - 1.0).abs()) > 1e-9 {
            return Err(Error::InvalidPose(format!("bottom row must be [0,0,0,1], got {last:?}")));
        }
        let rotation = Mat3::from_fn(|r, c| m[r][c]);
        let translation = Vec3::new(m[0][3], m[1][3], m[2][3]);
        Self::new(rotation, translation)
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let m = self.to_matrix();
        Matrix4::from_fn(|r, c| m[r][c])
    }

    /// Rotation angle in degrees.
    pub fn angle_deg(&self) -> f64 {
        Rotation3::from_matrix_unchecked(self.rotation).angle().to_degrees()
    }
}

pub fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Pinhole camera intrinsics in pixels. Pixel `(x, y)` has its centre at
/// coordinate `(x, y)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Centred square camera with focal length `focal_scale · size`.
    pub fn square(size: usize, focal_scale: f64) -> Self {
        let f = focal_scale * size as f64;
        let c = (size as f64 - 1.0) / 2.0;
        Self {
            fx: f,
            fy: f,
            cx: c,
            cy: c,
            width: size,
            height: size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid intrinsics {self:?}")))
        }
    }

    pub fn matrix(&self) -> Mat3 {
        Mat3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Mat3 {
        Mat3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Ray through pixel `(u, v)` with unit z component.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Camera-space point at depth `1 / disparity` along the ray through
    /// `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, disparity: f64) -> Result<Vec3> {
        if !(disparity > 0.0) {
            return Err(Error::NonPositiveDisparity(disparity));
        }
        Ok(self.ray(u, v) / disparity)
    }

    /// Pixel coordinates of a camera-space point; `None` behind the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        (p.z > 0.0).then(|| (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_pose() -> impl Strategy<Value = CameraPose> {
        (-180.0..180.0f64, -89.0..89.0f64, -180.0..180.0f64, prop::array::uniform3(-5.0..5.0f64))
            .prop_map(|(y, p, r, t)| CameraPose::from_euler_deg(y, p, r, Vec3::new(t[0], t[1], t[2])))
    }

    #[test]
    fn compose_rotations_about_z() {
        let a = CameraPose::from_rotation(rot_z(30f64.to_radians()));
        let b = CameraPose::from_rotation(rot_z(60f64.to_radians()));
        let c = a.compose(&b);
        // Rz(90°) = [[0,-1,0],[1,0,0],[0,0,1]]
        let want = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((c.rotation - want).abs().max() < 1e-12);
    }

    #[test]
    fn identity_and_translation_inverse() {
        let p = CameraPose::from_euler_deg(10.0, -5.0, 3.0, Vec3::new(0.1, 0.2, 0.3));
        assert!(CameraPose::identity().compose(&p).distance(&p) < 1e-15);
        assert!(CameraPose::identity().invert().distance(&CameraPose::identity()) == 0.0);
        let t = CameraPose::translation(1.0, 0.0, 0.0).invert();
        assert!(t.distance(&CameraPose::translation(-1.0, 0.0, 0.0)) < 1e-15);
    }

    #[test]
    fn unproject_examples() {
        let k = Intrinsics::new(50.0, 40.0, 31.5, 20.0, 64, 48).unwrap();
        let p = k.unproject(31.5, 20.0, 1.0).unwrap();
        assert!((p - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-15);
        let p = k.unproject(31.5, 20.0, 0.5).unwrap();
        assert!((p - Vec3::new(0.0, 0.0, 2.0)).norm() < 1e-15);
        let p = k.unproject(31.5 + 50.0, 20.0, 1.0).unwrap();
        assert!((p - Vec3::new(1.0, 0.0, 1.0)).norm() < 1e-15);
        assert!(k.unproject(0.0, 0.0, 0.0).is_err());
        assert!(k.unproject(0.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn euler_sign_conventions() {
        let fwd = Vec3::new(0.0, 0.0, 1.0);
        let right = CameraPose::from_euler_deg(10.0, 0.0, 0.0, Vec3::zeros()).rotation * fwd;
        assert!(right.x > 0.0);
        let up = CameraPose::from_euler_deg(0.0, 10.0, 0.0, Vec3::zeros()).rotation * fwd;
        assert!(up.y < 0.0, "pitch up must point toward -y");
    }

    #[test]
    fn matrix_round_trip_rejects_bad_rows() {
        let p = CameraPose::from_euler_deg(5.0, 2.0, 1.0, Vec3::new(1.0, 2.0, 3.0));
        let m = p.to_matrix();
        assert!(CameraPose::from_matrix(&m).unwrap().distance(&p) < 1e-15);
        let mut bad = m;
        bad[3][0] = 1.0;
        assert!(CameraPose::from_matrix(&bad).is_err());
        let mut skew = m;
        skew[0][0] *= 2.0;
        assert!(CameraPose::from_matrix(&skew).is_err());
    }

    proptest! {
        #[test]
        fn group_laws(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let lhs = a.compose(&b).compose(&c);
            let rhs = a.compose(&b.compose(&c));
            prop_assert!(lhs.distance(&rhs) < 1e-6);
            prop_assert!(a.compose(&a.invert()).distance(&CameraPose::identity()) < 1e-6);
            prop_assert!(a.invert().invert().distance(&a) < 1e-6);
            prop_assert!(a.compose(&b).validate().is_ok());
        }

        #[test]
        fn unproject_then_project_is_identity(u in 0.0..64.0f64, v in 0.0..48.0f64, d in 1e-4..1.0f64) {
            let k = Intrinsics::new(50.0, 45.0, 31.5, 23.5, 64, 48).unwrap();
            let p = k.unproject(u, v, d).unwrap();
            prop_assert!((p.z - 1.0 / d).abs() < 1e-9 * p.z);
            let (pu, pv) = k.project(&p).unwrap();
            prop_assert!((pu - u).abs() < 1e-5 && (pv - v).abs() < 1e-5);
        }
    }
}
