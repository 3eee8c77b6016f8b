//! World-frame geometry: points, rigid transforms, point clouds, RGB-D
//! unprojection, workspace cropping and the point-cloud augmentation used
//! during training.
//!
//! Euler angles are intrinsic Z-Y-X in degrees everywhere in this crate:
//! `R = Rz(e.z) * Ry(e.y) * Rx(e.x)`, so `e.z` is the yaw about the
//! vertical axis.

use std::ops::{Add, Div, Mul, Neg, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);
    pub const X: Vec3 = Vec3::new(1.0, 0.0, 0.0);
    pub const Y: Vec3 = Vec3::new(0.0, 1.0, 0.0);
    pub const Z: Vec3 = Vec3::new(0.0, 0.0, 1.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn splat(v: f64) -> Self {
        Vec3::new(v, v, v)
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        self * (1.0 / self.norm())
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn abs(self) -> Vec3 {
        Vec3::new(self.x.abs(), self.y.abs(), self.z.abs())
    }

    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Row-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn from_rows(r0: Vec3, r1: Vec3, r2: Vec3) -> Self {
        Mat3([r0.to_array(), r1.to_array(), r2.to_array()])
    }

    pub fn from_cols(c0: Vec3, c1: Vec3, c2: Vec3) -> Self {
        Mat3::from_rows(c0, c1, c2).transpose()
    }

    pub fn col(&self, j: usize) -> Vec3 {
        Vec3::new(self.0[0][j], self.0[1][j], self.0[2][j])
    }

    pub fn row(&self, i: usize) -> Vec3 {
        Vec3::from_array(self.0[i])
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        Vec3::new(self.row(0).dot(v), self.row(1).dot(v), self.row(2).dot(v))
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.0[i][k] * o.0[k][j]).sum();
            }
        }
        Mat3(out)
    }

    pub fn determinant(&self) -> f64 {
        self.row(0).dot(self.row(1).cross(self.row(2)))
    }

    pub fn rot_x(deg: f64) -> Mat3 {
        let (s, c) = deg.to_radians().sin_cos();
        Mat3([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    }

    pub fn rot_y(deg: f64) -> Mat3 {
        let (s, c) = deg.to_radians().sin_cos();
        Mat3([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    }

    pub fn rot_z(deg: f64) -> Mat3 {
        let (s, c) = deg.to_radians().sin_cos();
        Mat3([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    }

    /// Rotation from intrinsic Z-Y-X Euler angles in degrees.
    pub fn from_euler_zyx(e: Vec3) -> Mat3 {
        Mat3::rot_z(e.z)
            .mul_mat(&Mat3::rot_y(e.y))
            .mul_mat(&Mat3::rot_x(e.x))
    }

    /// Inverse of [`Mat3::from_euler_zyx`]; angles wrapped to `[0, 360)`.
    pub fn to_euler_zyx(&self) -> Vec3 {
        let m = &self.0;
        let pitch = (-m[2][0]).clamp(-1.0, 1.0).asin();
        let (roll, yaw) = if m[2][0].abs() < 1.0 - 1e-12 {
            (m[2][1].atan2(m[2][2]), m[1][0].atan2(m[0][0]))
        } else {
            // gimbal lock: fold everything into yaw
            (0.0, (-m[0][1]).atan2(m[1][1]))
        };
        Vec3::new(
            wrap_degrees(roll.to_degrees()),
            wrap_degrees(pitch.to_degrees()),
            wrap_degrees(yaw.to_degrees()),
        )
    }

    pub fn is_rotation(&self, tol: f64) -> bool {
        let should_be_identity = self.mul_mat(&self.transpose());
        let orthonormal = (0..3).all(|i| {
            (0..3).all(|j| (should_be_identity.0[i][j] - Mat3::IDENTITY.0[i][j]).abs() <= tol)
        });
        orthonormal && (self.determinant() - 1.0).abs() <= tol
    }
}

/// Wraps an angle in degrees to `[0, 360)`.
pub fn wrap_degrees(a: f64) -> f64 {
    let w = a.rem_euclid(360.0);
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        rotation: Mat3::IDENTITY,
        translation: Vec3::ZERO,
    };

    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        if !rotation.is_rotation(1e-6) {
            return Err(invalid("rotation matrix is not orthonormal with det +1"));
        }
        if !translation.is_finite() {
            return Err(invalid("translation is not finite"));
        }
        Ok(RigidTransform {
            rotation,
            translation,
        })
    }

    pub fn from_rotation(rotation: Mat3) -> Self {
        RigidTransform {
            rotation,
            translation: Vec3::ZERO,
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        RigidTransform {
            rotation: Mat3::IDENTITY,
            translation,
        }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        self.rotation.mul_vec(p) + self.translation
    }

    pub fn apply_vector(&self, v: Vec3) -> Vec3 {
        self.rotation.mul_vec(v)
    }

    /// `self.compose(other)` applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation.mul_mat(&other.rotation),
            translation: self.apply(other.translation),
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -rt.mul_vec(self.translation),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub positions: Vec<Vec3>,
    pub colors: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(positions: Vec<Vec3>, colors: Vec<[f64; 3]>) -> Result<Self> {
        if positions.len() != colors.len() {
            return Err(invalid(format!(
                "point cloud has {} positions but {} colors",
                positions.len(),
                colors.len()
            )));
        }
        if let Some(i) = positions.iter().position(|p| !p.is_finite()) {
            return Err(invalid(format!("point {i} is not finite")));
        }
        if let Some(i) = colors
            .iter()
            .position(|c| c.iter().any(|v| !(0.0..=1.0).contains(v)))
        {
            return Err(invalid(format!("color of point {i} is outside [0, 1]")));
        }
        Ok(PointCloud { positions, colors })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn extend(&mut self, other: &PointCloud) {
        self.positions.extend_from_slice(&other.positions);
        self.colors.extend_from_slice(&other.colors);
    }

    pub fn centroid(&self) -> Option<Vec3> {
        if self.is_empty() {
            return None;
        }
        let sum = self
            .positions
            .iter()
            .fold(Vec3::ZERO, |acc, &p| acc + p);
        Some(sum * (1.0 / self.len() as f64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// camera -> world
    pub pose: RigidTransform,
}

impl PinholeCamera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, pose: RigidTransform) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(invalid("pinhole focal lengths must be positive"));
        }
        Ok(PinholeCamera {
            fx,
            fy,
            cx,
            cy,
            pose,
        })
    }

    /// Projects a world point to continuous pixel coordinates and depth.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64, f64)> {
        let c = self.pose.inverse().apply(p);
        if c.z <= 0.0 {
            return None;
        }
        Some((self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy, c.z))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkspaceBox {
    pub min: Vec3,
    pub max: Vec3,
}

impl Default for WorkspaceBox {
    fn default() -> Self {
        WorkspaceBox {
            min: Vec3::splat(-0.5),
            max: Vec3::splat(0.5),
        }
    }
}

impl WorkspaceBox {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if !(min.x < max.x && min.y < max.y && min.z < max.z) {
            return Err(invalid(format!(
                "workspace min {min:?} must be below max {max:?} on every axis"
            )));
        }
        Ok(WorkspaceBox { min, max })
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn half_extents(&self) -> Vec3 {
        (self.max - self.min) * 0.5
    }

    pub fn contains(&self, p: Vec3) -> bool {
        self.min.x <= p.x
            && p.x <= self.max.x
            && self.min.y <= p.y
            && p.y <= self.max.y
            && self.min.z <= p.z
            && p.z <= self.max.z
    }
}

/// Lifts every pixel with nonzero depth into a world-frame point.
///
/// `rgb` and `depth` are row-major, `height * width` pixels; pixel `(u, v)`
/// is column `u`, row `v`.
pub fn unproject_rgbd(
    rgb: &[[f64; 3]],
    depth: &[f64],
    width: usize,
    cam: &PinholeCamera,
) -> Result<PointCloud> {
    if rgb.len() != depth.len() || width == 0 || depth.len() % width != 0 {
        return Err(invalid(format!(
            "rgb has {} pixels, depth has {} pixels, width {width}",
            rgb.len(),
            depth.len()
        )));
    }
    let mut positions = Vec::new();
    let mut colors = Vec::new();
    for (i, (&d, c)) in depth.iter().zip(rgb).enumerate() {
        if !(d >= 0.0) || !d.is_finite() {
            return Err(invalid(format!("depth at pixel {i} is negative or not finite")));
        }
        if d == 0.0 {
            continue;
        }
        let (u, v) = ((i % width) as f64, (i / width) as f64);
        let ray = Vec3::new((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0);
        positions.push(cam.pose.apply(ray * d));
        colors.push(*c);
    }
    PointCloud::new(positions, colors)
}

pub fn transform_cloud(cloud: &PointCloud, t: &RigidTransform) -> PointCloud {
    PointCloud {
        positions: cloud.positions.iter().map(|&p| t.apply(p)).collect(),
        colors: cloud.colors.clone(),
    }
}

pub fn crop_to_workspace(cloud: &PointCloud, bounds: &WorkspaceBox) -> PointCloud {
    let (positions, colors) = cloud
        .positions
        .iter()
        .zip(&cloud.colors)
        .filter(|(p, _)| bounds.contains(**p))
        .map(|(p, c)| (*p, *c))
        .unzip();
    PointCloud { positions, colors }
}

pub const DEFAULT_AUG_TRANSLATION: f64 = 0.125;
pub const DEFAULT_AUG_YAW_DEG: f64 = 45.0;

/// One sampled SE(3) perturbation: rotate about world z, then translate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    pub yaw_deg: f64,
    pub translation: Vec3,
}

impl Augmentation {
    pub fn sample(seed: u64, t_range: f64, yaw_range_deg: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sym = |range: f64| {
            let u: f64 = rng.random();
            if range == 0.0 {
                0.0
            } else {
                (2.0 * u - 1.0) * range
            }
        };
        let yaw_deg = sym(yaw_range_deg);
        let translation = Vec3::new(sym(t_range), sym(t_range), sym(t_range));
        Augmentation {
            yaw_deg,
            translation,
        }
    }

    pub fn transform(&self) -> RigidTransform {
        RigidTransform {
            rotation: Mat3::rot_z(self.yaw_deg),
            translation: self.translation,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.yaw_deg == 0.0 && self.translation == Vec3::ZERO
    }
}

#[derive(Debug, Clone)]
pub struct Augmented {
    pub cloud: PointCloud,
    pub translation: Vec3,
    pub euler: Vec3,
    pub applied: Augmentation,
}

/// Applies one random z-rotation + translation to the cloud and the
/// ground-truth pose alike.
pub fn augment(
    cloud: &PointCloud,
    gt_translation: Vec3,
    gt_euler: Vec3,
    seed: u64,
    t_range: f64,
    yaw_range_deg: f64,
) -> Augmented {
    let applied = Augmentation::sample(seed, t_range, yaw_range_deg);
    apply_augmentation(cloud, gt_translation, gt_euler, applied)
}

pub fn apply_augmentation(
    cloud: &PointCloud,
    gt_translation: Vec3,
    gt_euler: Vec3,
    applied: Augmentation,
) -> Augmented {
    if applied.is_identity() {
        return Augmented {
            cloud: cloud.clone(),
            translation: gt_translation,
            euler: gt_euler,
            applied,
        };
    }
    let t = applied.transform();
    Augmented {
        cloud: transform_cloud(cloud, &t),
        translation: t.apply(gt_translation),
        euler: Vec3::new(
            gt_euler.x,
            gt_euler.y,
            wrap_degrees(gt_euler.z + applied.yaw_deg),
        ),
        applied,
    }
}
