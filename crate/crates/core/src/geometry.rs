//! Rigid poses, camera intrinsics and the distance/turning quantities derived
//! from them.
//!
//! Poses are camera-to-world: the rotation maps camera axes (x right, y down,
//! z forward) into the world frame and the translation is the camera center.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::{Matrix3, Matrix4, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraId {
    Left,
    Right,
}

impl CameraId {
    pub fn as_str(self) -> &'static str {
        match self {
            CameraId::Left => "left",
            CameraId::Right => "right",
        }
    }
}

impl fmt::Display for CameraId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl core::str::FromStr for CameraId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(CameraId::Left),
            "right" => Ok(CameraId::Right),
            other => bail!(Validation, "unknown camera id `{other}`"),
        }
    }
}

fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    if r.iter().any(|v| !v.is_finite()) {
        bail!(Validation, "rotation has non-finite entries");
    }
    let residual = (r.transpose() * r - Matrix3::identity()).abs().max();
    if residual >= ORTHONORMAL_TOL {
        bail!(Validation, "rotation is not orthonormal (|R^T R - I| = {residual:e})");
    }
    let det = r.determinant();
    if (det - 1.0).abs() > ORTHONORMAL_TOL {
        bail!(Validation, "rotation determinant is {det}, expected 1");
    }
    Ok(())
}

/// A rigid transform used to mount a camera on a rig or vehicle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = Self {
            rotation,
            translation,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::new(x, y, z),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_rotation(&self.rotation)?;
        if self.translation.iter().any(|v| !v.is_finite()) {
            bail!(Validation, "translation has non-finite entries");
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == Matrix3::identity() && self.translation == Vector3::zeros()
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Parses a row-major 4×4 homogeneous matrix. The last row must be `0 0 0 1`.
    pub fn from_row_major_4x4(values: &[f64]) -> Result<Self> {
        if values.len() != 16 {
            bail!(Validation, "expected 16 values for a 4x4 transform, got {}", values.len());
        }
        let m = Matrix4::from_row_slice(values);
        let last = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if last != [0.0, 0.0, 0.0, 1.0] {
            bail!(Validation, "last row of rigid transform must be [0, 0, 0, 1], got {last:?}");
        }
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    pub fn to_row_major_4x4(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0],
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1],
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2],
            0.0, 0.0, 0.0, 1.0,
        ]
    }
}

/// Camera-to-world pose of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSE3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub frame_index: u64,
    pub timestamp: Option<f64>,
}

impl PoseSE3 {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>, frame_index: u64) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
            frame_index,
            timestamp: None,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn identity(frame_index: u64) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            frame_index,
            timestamp: None,
        }
    }

    pub fn with_timestamp(mut self, timestamp: f64) -> Self {
        self.timestamp = Some(timestamp);
        self
    }

    /// Builds a pose from a row-major 3×4 `[R | t]` matrix, the layout of
    /// KITTI odometry ground-truth lines.
    pub fn from_row_major_3x4(values: &[f64], frame_index: u64) -> Result<Self> {
        if values.len() != 12 {
            bail!(Validation, "expected 12 values for a 3x4 pose, got {}", values.len());
        }
        let rotation = Matrix3::new(
            values[0], values[1], values[2], values[4], values[5], values[6], values[8], values[9],
            values[10],
        );
        let translation = Vector3::new(values[3], values[7], values[11]);
        Self::new(rotation, translation, frame_index)
    }

    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0],
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1],
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2],
        ]
    }

    pub fn validate(&self) -> Result<()> {
        check_rotation(&self.rotation)?;
        if self.translation.iter().any(|v| !v.is_finite()) {
            bail!(Validation, "pose {} has a non-finite translation", self.frame_index);
        }
        Ok(())
    }

    pub fn as_transform(&self) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation,
            translation: self.translation,
        }
    }

    /// Optical axis (camera +z) in world coordinates.
    pub fn forward_axis(&self) -> Vector3<f64> {
        self.rotation.column(2).into_owned()
    }

    /// Camera "up" (camera −y) in world coordinates.
    pub fn up_axis(&self) -> Vector3<f64> {
        -self.rotation.column(1).into_owned()
    }

    /// Pose of a second body rigidly attached to this one at `offset`.
    pub fn compose(&self, offset: &RigidTransform) -> PoseSE3 {
        let t = self.as_transform().compose(offset);
        PoseSE3 {
            rotation: t.rotation,
            translation: t.translation,
            frame_index: self.frame_index,
            timestamp: self.timestamp,
        }
    }
}

/// Camera center of a camera-to-world pose.
pub fn camera_center(pose: &PoseSE3) -> Result<Vector3<f64>> {
    pose.validate()?;
    Ok(pose.translation)
}

/// Euclidean distance between two camera centers, in meters.
pub fn pair_distance(a: &PoseSE3, b: &PoseSE3) -> Result<f64> {
    let ca = camera_center(a)?;
    let cb = camera_center(b)?;
    Ok((cb - ca).norm())
}

/// Reference plane for measuring heading changes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundPlane {
    normal: Vector3<f64>,
}

impl GroundPlane {
    pub fn from_normal(normal: Vector3<f64>) -> Result<Self> {
        let n = normal.norm();
        if !(n.is_finite() && n > 1e-12) {
            bail!(Degenerate, "ground normal has zero length");
        }
        Ok(Self { normal: normal / n })
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.normal
    }

    /// Fits the plane of dominant motion to the camera centers by least
    /// squares. Straight or too-short trajectories do not determine a plane;
    /// those fall back to the mean camera up axis. The normal is oriented to
    /// agree with the mean camera up axis.
    pub fn fit(poses: &[PoseSE3]) -> Result<Self> {
        if poses.is_empty() {
            return Err(Error::Empty("trajectory"));
        }
        let mean_up = poses
            .iter()
            .fold(Vector3::zeros(), |acc, p| acc + p.up_axis())
            / poses.len() as f64;

        let mut fitted = None;
        if poses.len() >= 3 {
            let centroid = poses
                .iter()
                .fold(Vector3::zeros(), |acc, p| acc + p.translation)
                / poses.len() as f64;
            let mut cov = Matrix3::zeros();
            for p in poses {
                let d = p.translation - centroid;
                cov += d * d.transpose();
            }
            let eig = SymmetricEigen::new(cov);
            let mut order = [0usize, 1, 2];
            order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
            let (smallest, middle, largest) = (
                eig.eigenvalues[order[0]],
                eig.eigenvalues[order[1]],
                eig.eigenvalues[order[2]],
            );
            // A planar fit needs spread in two directions and a clearly
            // thinner third one.
            if largest > 0.0 && middle > 1e-6 * largest && smallest < 0.1 * middle {
                fitted = Some(eig.eigenvectors.column(order[0]).into_owned());
            }
        }

        let normal = match fitted {
            Some(n) if n.dot(&mean_up) < 0.0 => -n,
            Some(n) => n,
            None => mean_up,
        };
        Self::from_normal(normal)
    }

    fn project(&self, v: &Vector3<f64>) -> Vector3<f64> {
        v - self.normal * v.dot(&self.normal)
    }
}

/// Heading change between two poses: the angle between their forward axes
/// after projection onto the ground plane, in `[0, π]`.
pub fn yaw_change(a: &PoseSE3, b: &PoseSE3, plane: &GroundPlane) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let fa = plane.project(&a.forward_axis());
    let fb = plane.project(&b.forward_axis());
    if fa.norm() < 1e-9 || fb.norm() < 1e-9 {
        bail!(Degenerate, "forward axis is parallel to the ground normal");
    }
    let sin = fa.cross(&fb).dot(&plane.normal).abs();
    let cos = fa.dot(&fb);
    Ok(libm::atan2(sin, cos))
}

/// A camera's timestamped poses in one world frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<PoseSE3>,
    pub sequence_id: String,
    pub camera_id: CameraId,
}

impl Trajectory {
    pub fn new(sequence_id: impl Into<String>, camera_id: CameraId, poses: Vec<PoseSE3>) -> Result<Self> {
        let traj = Self {
            poses,
            sequence_id: sequence_id.into(),
            camera_id,
        };
        traj.validate()?;
        Ok(traj)
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.poses.windows(2) {
            if w[1].frame_index <= w[0].frame_index {
                bail!(
                    Validation,
                    "sequence {} ({}): frame indices not strictly increasing at {} -> {}",
                    self.sequence_id,
                    self.camera_id,
                    w[0].frame_index,
                    w[1].frame_index
                );
            }
        }
        for p in &self.poses {
            p.validate()?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn ground_plane(&self) -> Result<GroundPlane> {
        GroundPlane::fit(&self.poses)
    }

    /// Distances between consecutive camera centers.
    pub fn consecutive_distances(&self) -> Result<Vec<f64>> {
        self.poses
            .windows(2)
            .map(|w| pair_distance(&w[0], &w[1]))
            .collect()
    }
}

/// Composes every pose with a rig offset, e.g. to move from the left camera
/// to the right camera of a stereo rig.
pub fn offset_trajectory(traj: &Trajectory, rig_offset: &RigidTransform) -> Result<Trajectory> {
    rig_offset.validate()?;
    if rig_offset.is_identity() {
        return Ok(traj.clone());
    }
    Ok(Trajectory {
        poses: traj.poses.iter().map(|p| p.compose(rig_offset)).collect(),
        sequence_id: traj.sequence_id.clone(),
        camera_id: traj.camera_id,
    })
}

/// Pinhole intrinsics. Pixel coordinates refer to pixel centers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub focal_x: f64,
    pub focal_y: f64,
    pub principal_point: (f64, f64),
    /// `(width, height)` in pixels.
    pub image_size: (usize, usize),
}

impl CameraModel {
    pub fn new(focal_x: f64, focal_y: f64, principal_point: (f64, f64), image_size: (usize, usize)) -> Result<Self> {
        let cam = Self {
            focal_x,
            focal_y,
            principal_point,
            image_size,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// The 280×120 target camera every image is normalized to.
    pub fn canonical() -> Self {
        Self {
            focal_x: 250.0,
            focal_y: 250.0,
            principal_point: (140.0, 60.0),
            image_size: (280, 120),
        }
    }

    pub fn width(&self) -> usize {
        self.image_size.0
    }

    pub fn height(&self) -> usize {
        self.image_size.1
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal_x > 0.0 && self.focal_y > 0.0 && self.focal_x.is_finite() && self.focal_y.is_finite()) {
            bail!(Validation, "focal lengths must be positive, got ({}, {})", self.focal_x, self.focal_y);
        }
        let (w, h) = self.image_size;
        if w == 0 || h == 0 {
            bail!(Validation, "image size must be non-zero, got {w}x{h}");
        }
        let (cx, cy) = self.principal_point;
        if !(cx >= 0.0 && cx <= w as f64 && cy >= 0.0 && cy <= h as f64) {
            bail!(Validation, "principal point ({cx}, {cy}) outside {w}x{h} image");
        }
        Ok(())
    }

    pub fn intrinsic_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.focal_x, 0.0, self.principal_point.0,
            0.0, self.focal_y, self.principal_point.1,
            0.0, 0.0, 1.0,
        )
    }

    /// Projects a point given in camera coordinates. `None` behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((
            self.focal_x * p.x / p.z + self.principal_point.0,
            self.focal_y * p.y / p.z + self.principal_point.1,
        ))
    }

    /// Ray direction (camera frame, z = 1) through pixel `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new(
            (u - self.principal_point.0) / self.focal_x,
            (v - self.principal_point.1) / self.focal_y,
            1.0,
        )
    }
}

impl fmt::Display for CameraModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "f=({}, {}) c=({}, {}) {}x{}",
            self.focal_x, self.focal_y, self.principal_point.0, self.principal_point.1, self.image_size.0, self.image_size.1
        )
    }
}

/// Rotation about an arbitrary axis (Rodrigues).
pub fn axis_angle(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
    nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).into_inner()
}
