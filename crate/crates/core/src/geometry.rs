//! Rigid transforms, the pinhole camera and two-view relations.
//!
//! Poses follow the camera-from-world convention throughout the crate: a
//! pose `P` maps a world point `X` to camera coordinates `R·X + t`.

use nalgebra::{Matrix3, Matrix3x4, Matrix4, UnitQuaternion, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point has non-positive depth {0}")]
    NonPositiveDepth(f64),
    #[error("degenerate two-view geometry: {0}")]
    DegenerateGeometry(&'static str),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Depths at or below this are treated as lying on or behind the image plane.
pub const MIN_DEPTH: f64 = 1e-9;

/// Rigid transform with 3 rotational and 3 translational degrees of freedom.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    /// Rotation given as an axis-angle vector (direction = axis, norm = angle).
    pub fn from_axis_angle(axis_angle: Vec3, translation: Vec3) -> Self {
        Self::new(UnitQuaternion::from_scaled_axis(axis_angle), translation)
    }

    /// Builds a pose from a rotation matrix, re-orthonormalising it.
    pub fn from_matrix(rotation: &Matrix3<f64>, translation: Vec3) -> Self {
        let rot = nalgebra::Rotation3::from_matrix(rotation);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    pub fn transform_point(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        self.rotation.angle()
    }

    /// Position of the camera centre in world coordinates (camera-from-world pose).
    pub fn center(&self) -> Vec3 {
        -(self.rotation.inverse() * self.translation)
    }

    /// Applies a local increment `(δω, δt)`: `R ← exp(δω)·R`, `t ← t + δt`.
    ///
    /// This is the tangent chart every pose Jacobian in the crate is taken
    /// against. Under it `∂(R·X + t)/∂δω = −[R·X]×` and `∂/∂δt = I`.
    pub fn retract(&self, delta: &Vector6<f64>) -> Pose {
        let dw = Vec3::new(delta[0], delta[1], delta[2]);
        let dt = Vec3::new(delta[3], delta[4], delta[5]);
        let mut rotation = UnitQuaternion::from_scaled_axis(dw) * self.rotation;
        rotation.renormalize();
        Pose {
            rotation,
            translation: self.translation + dt,
        }
    }

    pub fn to_matrix3x4(&self) -> Matrix3x4<f64> {
        let mut m = Matrix3x4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        m.set_column(3, &self.translation);
        m
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 4>(0, 0).copy_from(&self.to_matrix3x4());
        m
    }

    pub fn from_matrix3x4(m: &Matrix3x4<f64>) -> Pose {
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        Pose::from_matrix(&r, m.column(3).into_owned())
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

/// Skew-symmetric cross-product matrix `[v]×`.
pub fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0
            && self.cy >= 0.0
            && self.cx < self.width as f64
            && self.cy < self.height as f64)
        {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
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

    /// Pixel inside `[0, width) × [0, height)`.
    pub fn contains(&self, pixel: &Vec2) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x < self.width as f64
            && pixel.y < self.height as f64
    }

    /// Normalised image coordinates `(x/z, y/z, 1)` of a pixel.
    pub fn normalized(&self, pixel: &Vec2) -> Vec3 {
        Vec3::new(
            (pixel.x - self.cx) / self.fx,
            (pixel.y - self.cy) / self.fy,
            1.0,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtrinsicCalibration {
    pub lidar_to_camera: Pose,
}

impl ExtrinsicCalibration {
    pub fn identity() -> Self {
        Self {
            lidar_to_camera: Pose::identity(),
        }
    }
}

/// Pinhole projection of a camera-frame point.
pub fn project(point: &Vec3, intrinsics: &CameraIntrinsics) -> Result<Vec2, GeometryError> {
    if point.z <= MIN_DEPTH {
        return Err(GeometryError::NonPositiveDepth(point.z));
    }
    Ok(Vec2::new(
        intrinsics.fx * point.x / point.z + intrinsics.cx,
        intrinsics.fy * point.y / point.z + intrinsics.cy,
    ))
}

/// Projection together with its 2×3 Jacobian with respect to the point.
pub fn project_with_jacobian(
    point: &Vec3,
    intrinsics: &CameraIntrinsics,
) -> Result<(Vec2, nalgebra::Matrix2x3<f64>), GeometryError> {
    let pixel = project(point, intrinsics)?;
    let iz = 1.0 / point.z;
    let iz2 = iz * iz;
    let jac = nalgebra::Matrix2x3::new(
        intrinsics.fx * iz,
        0.0,
        -intrinsics.fx * point.x * iz2,
        0.0,
        intrinsics.fy * iz,
        -intrinsics.fy * point.y * iz2,
    );
    Ok((pixel, jac))
}

/// Unit line of sight through a pixel.
pub fn unproject_ray(pixel: &Vec2, intrinsics: &CameraIntrinsics) -> Vec3 {
    intrinsics.normalized(pixel).normalize()
}

/// Back-projects a pixel to the camera-frame point with the given z-depth.
pub fn backproject(pixel: &Vec2, depth: f64, intrinsics: &CameraIntrinsics) -> Vec3 {
    intrinsics.normalized(pixel) * depth
}

/// Fundamental matrix `K⁻ᵀ·[t]×·R·K⁻¹` of a previous-to-current motion,
/// scaled to unit Frobenius norm.
///
/// For a correspondence (`p̃` previous, `p̄` current) in homogeneous pixels,
/// `p̄ᵀ·F·p̃ = 0`. A pure rotation has `[t]× = 0`; the zero matrix is
/// returned and epipolar residuals vanish identically in that case.
pub fn fundamental_matrix(motion: &Pose, intrinsics: &CameraIntrinsics) -> Matrix3<f64> {
    let kinv = intrinsics.inverse_matrix();
    let f = kinv.transpose() * skew(&motion.translation) * motion.rotation_matrix() * kinv;
    let norm = f.norm();
    if norm < 1e-300 {
        Matrix3::zeros()
    } else {
        f / norm
    }
}

/// Linear (DLT) two-view triangulation returning the world point.
pub fn triangulate(
    obs_a: &Vec2,
    obs_b: &Vec2,
    pose_a: &Pose,
    pose_b: &Pose,
    intrinsics: &CameraIntrinsics,
) -> Result<Vec3, GeometryError> {
    if (pose_a.center() - pose_b.center()).norm() < 1e-12 {
        return Err(GeometryError::DegenerateGeometry("coincident camera centres"));
    }
    let xa = intrinsics.normalized(obs_a);
    let xb = intrinsics.normalized(obs_b);
    let ray_a = (pose_a.rotation.inverse() * xa).normalize();
    let ray_b = (pose_b.rotation.inverse() * xb).normalize();
    if ray_a.cross(&ray_b).norm() < 1e-8 {
        return Err(GeometryError::DegenerateGeometry("parallel lines of sight"));
    }

    let pa = pose_a.to_matrix3x4();
    let pb = pose_b.to_matrix3x4();
    let mut a = Matrix4::zeros();
    a.set_row(0, &(pa.row(2) * xa.x - pa.row(0)));
    a.set_row(1, &(pa.row(2) * xa.y - pa.row(1)));
    a.set_row(2, &(pb.row(2) * xb.x - pb.row(0)));
    a.set_row(3, &(pb.row(2) * xb.y - pb.row(1)));
    // Row scaling keeps the smallest singular vector well conditioned.
    for mut row in a.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row /= n;
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or(GeometryError::DegenerateGeometry("svd failed"))?;
    let (min_idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .expect("4 singular values");
    let h = v_t.row(min_idx);
    if h[3].abs() < 1e-14 {
        return Err(GeometryError::DegenerateGeometry("point at infinity"));
    }
    Ok(Vec3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]))
}
