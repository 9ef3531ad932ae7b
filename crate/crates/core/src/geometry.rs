//! Pinhole cameras, rigid transforms, depth/point conversion and surface normals.
//!
//! Conventions: world frame is z-up; camera frames follow the usual computer-vision
//! convention (x right, y down, z forward). Integer pixel `(x, y)` refers to the
//! pixel center at continuous image coordinates `(x, y)`.

use nalgebra::{Matrix3, Matrix4, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, domain_err, Result};
use crate::grid::Grid;

pub type Vec3 = Vector3<f64>;

const ORTHONORMAL_TOL: f64 = 1e-9;

/// Integer pixel coordinate. `x` is the column, `y` the row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pixel {
    pub x: i32,
    pub y: i32,
}

impl Pixel {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Pixel) -> f64 {
        let dx = (self.x - other.x) as f64;
        let dy = (self.y - other.y) as f64;
        (dx * dx + dy * dy).sqrt()
    }
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
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
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

    /// Square-pixel intrinsics with the principal point at the image center.
    pub fn from_fov(width: u32, height: u32, fov_y_deg: f64) -> Result<Self> {
        if !(fov_y_deg > 0.0 && fov_y_deg < 180.0) {
            return Err(config_err!("vertical field of view {fov_y_deg} outside (0, 180)"));
        }
        let f = height as f64 / (2.0 * (fov_y_deg.to_radians() / 2.0).tan());
        Self::new(
            f,
            f,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(config_err!("focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(config_err!("image size must be non-zero"));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(config_err!("cx {} outside [0, {})", self.cx, self.width));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(config_err!("cy {} outside [0, {})", self.cy, self.height));
        }
        Ok(())
    }

    #[inline]
    pub fn contains(&self, pixel: Pixel) -> bool {
        pixel.x >= 0 && pixel.y >= 0 && (pixel.x as u32) < self.width && (pixel.y as u32) < self.height
    }

    /// Image diagonal length in pixels.
    pub fn diagonal(&self) -> f64 {
        ((self.width as f64).powi(2) + (self.height as f64).powi(2)).sqrt()
    }
}

/// Proper rigid motion `x ↦ R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Validates that `rotation` is orthonormal with determinant +1.
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if !(err <= ORTHONORMAL_TOL) || !((det - 1.0).abs() <= ORTHONORMAL_TOL) {
            return Err(domain_err!(
                "rotation is not a proper orthonormal matrix (orthogonality error {err:e}, det {det})"
            ));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(domain_err!("non-finite translation"));
        }
        Ok(Self { rotation, translation })
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation of `angle` radians about a (not necessarily unit) axis.
    pub fn from_axis_angle(axis: Vec3, angle: f64, translation: Vec3) -> Self {
        let rotation = axis_angle_matrix(axis, angle);
        Self { rotation, translation }
    }

    /// Camera-to-world pose of a camera at `eye` looking at `target`. `up_hint` picks the
    /// image-up direction and must not be parallel to the viewing direction.
    pub fn look_at(eye: Vec3, target: Vec3, up_hint: Vec3) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(domain_err!("look_at: eye and target coincide"));
        }
        let forward = forward.normalize();
        let right = forward.cross(&up_hint);
        if right.norm() < 1e-9 {
            return Err(domain_err!("look_at: up hint parallel to the viewing direction"));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        Self::new(rotation, eye)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    #[inline]
    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first.
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

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// 4×4 homogeneous matrix in row-major order.
    pub fn to_row_major(&self) -> [f64; 16] {
        let m = self.to_matrix();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn from_row_major(values: &[f64; 16]) -> Result<Self> {
        let last = [values[12], values[13], values[14], values[15]];
        if last != [0.0, 0.0, 0.0, 1.0] {
            return Err(domain_err!("pose matrix bottom row must be [0, 0, 0, 1]"));
        }
        let rotation = Matrix3::new(
            values[0], values[1], values[2], values[4], values[5], values[6], values[8], values[9], values[10],
        );
        Self::new(rotation, Vec3::new(values[3], values[7], values[11]))
    }

    /// Re-orthonormalises the rotation; used after long chains of compositions.
    pub fn renormalized(&self) -> RigidTransform {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u2 = u;
            u2.column_mut(2).neg_mut();
            r = u2 * vt;
        }
        RigidTransform {
            rotation: r,
            translation: self.translation,
        }
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl Serialize for RigidTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_row_major().serialize(s)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let values = <[f64; 16]>::deserialize(d)?;
        RigidTransform::from_row_major(&values).map_err(serde::de::Error::custom)
    }
}

/// Rodrigues rotation matrix.
pub fn axis_angle_matrix(axis: Vec3, angle: f64) -> Matrix3<f64> {
    let n = axis.norm();
    if n < 1e-15 || angle == 0.0 {
        return Matrix3::identity();
    }
    let k = axis / n;
    let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    Matrix3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos())
}

/// A calibrated camera placed in the world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraView {
    pub intrinsics: CameraIntrinsics,
    /// Camera-to-world.
    pub pose: RigidTransform,
}

/// Serialised camera record: `{fx, fy, cx, cy, width, height, pose}` with a row-major 4×4 pose.
#[derive(Serialize, Deserialize)]
struct CameraViewRecord {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    pose: [f64; 16],
}

impl Serialize for CameraView {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let k = &self.intrinsics;
        CameraViewRecord {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
            pose: self.pose.to_row_major(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for CameraView {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = CameraViewRecord::deserialize(d)?;
        let intrinsics =
            CameraIntrinsics::new(r.fx, r.fy, r.cx, r.cy, r.width, r.height).map_err(serde::de::Error::custom)?;
        let pose = RigidTransform::from_row_major(&r.pose).map_err(serde::de::Error::custom)?;
        Ok(CameraView { intrinsics, pose })
    }
}

impl CameraView {
    pub fn new(intrinsics: CameraIntrinsics, pose: RigidTransform) -> Self {
        Self { intrinsics, pose }
    }

    pub fn center(&self) -> Vec3 {
        *self.pose.translation()
    }

    /// World-frame ray direction through image coordinates `(u, v)`, scaled so that its
    /// component along the optical axis is 1. A ray parameter `t` is therefore the axis depth.
    #[inline]
    pub fn ray_direction(&self, u: f64, v: f64) -> Vec3 {
        let k = &self.intrinsics;
        let cam = Vec3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        self.pose.transform_vector(&cam)
    }

    /// World-frame optical axis.
    pub fn forward(&self) -> Vec3 {
        self.pose.rotation().column(2).into_owned()
    }
}

/// Result of projecting a world point into a view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    /// Continuous pixel coordinates and depth along the optical axis.
    Visible { pixel: [f64; 2], depth: f64 },
    /// The point lies at or behind the camera plane.
    BehindCamera,
}

impl Projection {
    pub fn visible(self) -> Option<([f64; 2], f64)> {
        match self {
            Projection::Visible { pixel, depth } => Some((pixel, depth)),
            Projection::BehindCamera => None,
        }
    }

    /// Nearest integer pixel, when in front of the camera.
    pub fn rounded(self) -> Option<Pixel> {
        self.visible()
            .map(|([u, v], _)| Pixel::new(u.round() as i32, v.round() as i32))
    }
}

/// World point on the ray through `pixel` at axis depth `depth`.
pub fn unproject(pixel: Pixel, depth: f64, view: &CameraView) -> Result<Vec3> {
    if !view.intrinsics.contains(pixel) {
        return Err(domain_err!("pixel ({}, {}) outside image", pixel.x, pixel.y));
    }
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(domain_err!("depth must be positive and finite, got {depth}"));
    }
    Ok(unproject_unchecked(pixel.x as f64, pixel.y as f64, depth, view))
}

#[inline]
pub(crate) fn unproject_unchecked(u: f64, v: f64, depth: f64, view: &CameraView) -> Vec3 {
    let k = &view.intrinsics;
    let cam = Vec3::new((u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth);
    view.pose.transform_point(&cam)
}

/// Pinhole projection of a world point.
pub fn project(point: &Vec3, view: &CameraView) -> Projection {
    let cam = view.pose.rotation().transpose() * (point - view.pose.translation());
    if !(cam.z > 0.0) {
        return Projection::BehindCamera;
    }
    let k = &view.intrinsics;
    Projection::Visible {
        pixel: [k.fx * cam.x / cam.z + k.cx, k.fy * cam.y / cam.z + k.cy],
        depth: cam.z,
    }
}

/// Per-pixel world points of a depth map; `None` where depth is invalid (0).
pub fn point_cloud(depth: &Grid<f64>, view: &CameraView) -> Grid<Option<Vec3>> {
    Grid::from_fn(depth.width(), depth.height(), |x, y| {
        let d = *depth.get(x, y);
        (d > 0.0).then(|| unproject_unchecked(x as f64, y as f64, d, view))
    })
}

/// Per-pixel surface normals; `None` marks pixels without a usable neighbourhood.
pub type NormalMap = Grid<Option<Vec3>>;

/// Largest pixel half-window searched for neighbours.
const MAX_NORMAL_WINDOW: i64 = 32;

/// Least-squares plane normals over 3D neighbours within `radius`, oriented toward the camera.
pub fn estimate_normals(depth: &Grid<f64>, view: &CameraView, radius: f64) -> Result<NormalMap> {
    check_depth_shape(depth, view)?;
    if !(radius > 0.0) {
        return Err(domain_err!("normal radius must be positive"));
    }
    let cloud = point_cloud(depth, view);
    let mut out = Grid::filled(depth.width(), depth.height(), None);
    for y in 0..depth.height() {
        for x in 0..depth.width() {
            let n = normal_from_cloud(&cloud, view, x, y, radius);
            out.set(x, y, n);
        }
    }
    Ok(out)
}

/// Normal at a single pixel; same estimator as [`estimate_normals`].
pub fn estimate_normal_at(depth: &Grid<f64>, view: &CameraView, pixel: Pixel, radius: f64) -> Result<Option<Vec3>> {
    check_depth_shape(depth, view)?;
    if !view.intrinsics.contains(pixel) {
        return Err(domain_err!("pixel ({}, {}) outside image", pixel.x, pixel.y));
    }
    if !(radius > 0.0) {
        return Err(domain_err!("normal radius must be positive"));
    }
    let (x, y) = (pixel.x as usize, pixel.y as usize);
    let d = *depth.get(x, y);
    if !(d > 0.0) {
        return Ok(None);
    }
    let half = window_half(view, d, radius);
    let (x0, x1, y0, y1) = window_bounds(x, y, half, depth.width(), depth.height());
    let center = unproject_unchecked(x as f64, y as f64, d, view);
    let mut pts = Vec::new();
    for yy in y0..=y1 {
        for xx in x0..=x1 {
            let dq = *depth.get(xx, yy);
            if dq > 0.0 {
                let q = unproject_unchecked(xx as f64, yy as f64, dq, view);
                if (q - center).norm() <= radius {
                    pts.push(q);
                }
            }
        }
    }
    Ok(fit_normal(&pts, &center, &view.center()))
}

fn check_depth_shape(depth: &Grid<f64>, view: &CameraView) -> Result<()> {
    let k = &view.intrinsics;
    if depth.width() != k.width as usize || depth.height() != k.height as usize {
        return Err(domain_err!(
            "depth map {}x{} does not match camera {}x{}",
            depth.width(),
            depth.height(),
            k.width,
            k.height
        ));
    }
    Ok(())
}

fn window_half(view: &CameraView, depth: f64, radius: f64) -> i64 {
    let f = view.intrinsics.fx.max(view.intrinsics.fy);
    let near = (depth - radius).max(1e-3);
    ((f * radius / near).ceil() as i64 + 1).clamp(1, MAX_NORMAL_WINDOW)
}

fn window_bounds(x: usize, y: usize, half: i64, w: usize, h: usize) -> (usize, usize, usize, usize) {
    let x0 = (x as i64 - half).max(0) as usize;
    let x1 = (x as i64 + half).min(w as i64 - 1) as usize;
    let y0 = (y as i64 - half).max(0) as usize;
    let y1 = (y as i64 + half).min(h as i64 - 1) as usize;
    (x0, x1, y0, y1)
}

fn normal_from_cloud(cloud: &Grid<Option<Vec3>>, view: &CameraView, x: usize, y: usize, radius: f64) -> Option<Vec3> {
    let center = (*cloud.get(x, y))?;
    let depth = (view.pose.rotation().transpose() * (center - view.center())).z;
    let half = window_half(view, depth, radius);
    let (x0, x1, y0, y1) = window_bounds(x, y, half, cloud.width(), cloud.height());
    let mut pts = Vec::new();
    for yy in y0..=y1 {
        for xx in x0..=x1 {
            if let Some(q) = cloud.get(xx, yy) {
                if (q - center).norm() <= radius {
                    pts.push(*q);
                }
            }
        }
    }
    fit_normal(&pts, &center, &view.center())
}

/// PCA plane fit. `points` includes the center point itself.
fn fit_normal(points: &[Vec3], center: &Vec3, camera: &Vec3) -> Option<Vec3> {
    // the center is one of the points; need at least 3 others
    if points.len() < 4 {
        return None;
    }
    let mean = points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / points.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov /= points.len() as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (l0, l1, l2) = (
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    // collinear or coincident neighbourhoods have no defined plane
    if !(l2 > 0.0) || l1 <= 1e-6 * l2 || !l0.is_finite() {
        return None;
    }
    let mut n: Vec3 = eig.eigenvectors.column(order[0]).into_owned();
    let norm = n.norm();
    if !(norm > 0.0) {
        return None;
    }
    n /= norm;
    if n.dot(&(camera - center)) < 0.0 {
        n = -n;
    }
    Some(n)
}
