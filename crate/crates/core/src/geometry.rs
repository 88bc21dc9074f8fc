//! Pinhole camera model, per-pixel maps and the exact forward models
//! (camera -> point map, ray map, disparity).
//!
//! Conventions used throughout the crate:
//! - pixels are zero-indexed, `(u, v) = (column, row)`, centers at integer
//!   coordinates;
//! - `Pose::rotation` is world-to-camera, `Pose::center` is the camera center
//!   in world coordinates, so `x_cam = R (x_world - o)`;
//! - ray directions are stored unnormalized as `R^T K^-1 (u, v, 1)^T`.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lower bound applied to predicted uncertainty before it weights a residual.
pub const SIGMA_FLOOR: f64 = 1e-3;
/// Disparities below this value are treated as points at infinity.
pub const DISPARITY_MIN: f64 = 1e-4;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("point at infinity at pixel (u={u}, v={v}); mask or clamp disparity first")]
    InfinitePoint { u: usize, v: usize },
    #[error("similarity scale must be positive, got {0}")]
    InvalidScale(f64),
    #[error("map size mismatch: expected {expected:?}, got {got:?}")]
    SizeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self { fx, fy, cx, cy }
    }

    /// Square pixels with the principal point at the image center.
    pub fn centered(focal: f64, width: usize, height: usize) -> Self {
        let (cx, cy) = image_center(width, height);
        Self::new(focal, focal, cx, cy)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx.is_finite() && self.fy.is_finite() && self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be finite and positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point must be finite (cx={}, cy={})",
                self.cx, self.cy
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// `K^-1 (u, v, 1)^T`.
    #[inline]
    pub fn unproject(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Pixel coordinates of a camera-frame point.
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }
}

/// Principal point of a `width x height` image under the pixel-center convention.
pub fn image_center(width: usize, height: usize) -> (f64, f64) {
    ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)
}

/// Camera extrinsics: world-to-camera rotation and camera center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub center: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            center: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, center: Vector3<f64>) -> Self {
        Self { rotation, center }
    }

    /// Builds a pose from the `(R, t)` form where `x_cam = R x + t`.
    pub fn from_rt(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            center: -(rotation.transpose() * translation),
        }
    }

    /// `t = -R o`.
    pub fn translation(&self) -> Vector3<f64> {
        -(self.rotation * self.center)
    }

    #[inline]
    pub fn world_to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * (x - self.center)
    }

    #[inline]
    pub fn camera_to_world(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * x + self.center
    }

    pub fn is_proper(&self, tol: f64) -> bool {
        is_rotation(&self.rotation, tol)
    }
}

/// A pinhole camera bound to nothing but its own parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

/// Dense row-major `height x width` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), height * width, "grid data length");
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for v in 0..height {
            for u in 0..width {
                data.push(f(v, u));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Entry at `(row, column)`.
    #[inline]
    pub fn at(&self, v: usize, u: usize) -> &T {
        &self.data[v * self.width + u]
    }

    #[inline]
    pub fn at_mut(&mut self, v: usize, u: usize) -> &mut T {
        &mut self.data[v * self.width + u]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(f).collect(),
        }
    }

    /// `(row, column)` of a flat index.
    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx / self.width, idx % self.width)
    }
}

/// Per-pixel 3D points in a reference frame.
pub type PointMap = Grid<Vector3<f64>>;
/// Per-pixel inverse depth; zero encodes a point at infinity.
pub type DisparityMap = Grid<f64>;
/// Per-pixel positive uncertainty.
pub type UncertaintyMap = Grid<f64>;

/// Per-pixel Plücker coordinates `(d, m)` with `m = p x d` for any point `p`
/// on the ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RayMap {
    pub directions: Grid<Vector3<f64>>,
    pub moments: Grid<Vector3<f64>>,
}

impl RayMap {
    pub fn new(directions: Grid<Vector3<f64>>, moments: Grid<Vector3<f64>>) -> Self {
        assert_eq!(directions.shape(), moments.shape(), "ray map grids");
        Self {
            directions,
            moments,
        }
    }

    pub fn height(&self) -> usize {
        self.directions.height()
    }

    pub fn width(&self) -> usize {
        self.directions.width()
    }

    /// Largest `|d . m|` over all pixels.
    pub fn max_plucker_violation(&self) -> f64 {
        self.directions
            .as_slice()
            .iter()
            .zip(self.moments.as_slice())
            .map(|(d, m)| d.dot(m).abs())
            .fold(0.0, f64::max)
    }
}

/// `K^-1 (u, v, 1)^T` for every pixel.
pub fn pixel_rays(
    k: &Intrinsics,
    height: usize,
    width: usize,
) -> Result<Grid<Vector3<f64>>, GeometryError> {
    k.validate()?;
    Ok(Grid::from_fn(height, width, |v, u| {
        k.unproject(u as f64, v as f64)
    }))
}

/// `X_uv = R^T K^-1 D_uv^-1 (u, v, 1)^T + o`.
pub fn point_map_from_depth(
    disparity: &DisparityMap,
    k: &Intrinsics,
    pose: &Pose,
) -> Result<PointMap, GeometryError> {
    k.validate()?;
    let rt = pose.rotation.transpose();
    let mut out = Vec::with_capacity(disparity.len());
    for v in 0..disparity.height() {
        for u in 0..disparity.width() {
            let d = *disparity.at(v, u);
            if !(d > 0.0) || !d.is_finite() {
                return Err(GeometryError::InfinitePoint { u, v });
            }
            out.push(rt * (k.unproject(u as f64, v as f64) / d) + pose.center);
        }
    }
    Ok(Grid::from_vec(disparity.height(), disparity.width(), out))
}

/// Inverse of [`point_map_from_depth`]: the camera-frame z of each point,
/// inverted. Points on or behind the camera plane map to zero disparity.
pub fn disparity_from_point_map(points: &PointMap, pose: &Pose) -> DisparityMap {
    points.map(|x| {
        let z = pose.world_to_camera(x).z;
        if z > 0.0 {
            1.0 / z
        } else {
            0.0
        }
    })
}

/// Plücker ray map of a pinhole camera: `d = R^T K^-1 (u,v,1)^T`, `m = o x d`.
pub fn raymap_from_camera(
    k: &Intrinsics,
    pose: &Pose,
    height: usize,
    width: usize,
) -> Result<RayMap, GeometryError> {
    let rays = pixel_rays(k, height, width)?;
    let rt = pose.rotation.transpose();
    let directions = rays.map(|r| rt * r);
    let moments = directions.map(|d| pose.center.cross(d));
    Ok(RayMap::new(directions, moments))
}

/// A 3D similarity `x -> s R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(scale: f64, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            scale,
            rotation,
            translation,
        }
    }

    #[inline]
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * x) + self.translation
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Similarity) -> Similarity {
        Similarity {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.scale * (self.rotation * other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Similarity {
        let rt = self.rotation.transpose();
        Similarity {
            scale: 1.0 / self.scale,
            rotation: rt,
            translation: -(rt * self.translation) / self.scale,
        }
    }

    /// The similarity taking world coordinates into the frame of `pose`.
    pub fn world_to_camera(pose: &Pose) -> Similarity {
        Similarity::new(1.0, pose.rotation, pose.translation())
    }

    /// Pose of a camera after the world is mapped through `self`.
    pub fn transform_pose(&self, pose: &Pose) -> Pose {
        Pose {
            rotation: pose.rotation * self.rotation.transpose(),
            center: self.apply(&pose.center),
        }
    }
}

/// `λ R X_uv + β` for every pixel.
pub fn apply_similarity(
    points: &PointMap,
    scale: f64,
    rotation: &Matrix3<f64>,
    shift: &Vector3<f64>,
) -> Result<PointMap, GeometryError> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(GeometryError::InvalidScale(scale));
    }
    let sim = Similarity::new(scale, *rotation, *shift);
    Ok(points.map(|x| sim.apply(x)))
}

pub fn is_rotation(r: &Matrix3<f64>, tol: f64) -> bool {
    (r.transpose() * r - Matrix3::identity()).norm() < tol && (r.determinant() - 1.0).abs() < tol
}

/// Geodesic distance between two rotations, in radians.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    rotation_angle(&(a.transpose() * b))
}

/// Rotation angle of a rotation matrix, in radians.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    // acos loses precision near zero; use the axis-angle magnitude instead.
    let skew = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let s = 0.5 * skew.norm();
    let c = 0.5 * (r.trace() - 1.0);
    s.atan2(c)
}

/// Nearest rotation in Frobenius norm (orthogonal polar factor, det +1).
pub fn project_to_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * vt
}

pub fn rotation_about_axis(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle).into_inner()
}

pub fn rot_x(angle: f64) -> Matrix3<f64> {
    rotation_about_axis(&Vector3::x(), angle)
}

pub fn rot_y(angle: f64) -> Matrix3<f64> {
    rotation_about_axis(&Vector3::y(), angle)
}

pub fn rot_z(angle: f64) -> Matrix3<f64> {
    rotation_about_axis(&Vector3::z(), angle)
}

/// Quaternion `[w, x, y, z]` of a rotation matrix, with `w >= 0`.
pub fn quaternion_from_matrix(r: &Matrix3<f64>) -> [f64; 4] {
    let q = UnitQuaternion::from_matrix(r);
    let mut out = [q.w, q.i, q.j, q.k];
    if out[0] < 0.0 {
        out.iter_mut().for_each(|c| *c = -*c);
    }
    out
}

/// Rotation matrix of a quaternion `[w, x, y, z]`; the input is normalized first.
pub fn matrix_from_quaternion(q: &[f64; 4]) -> Matrix3<f64> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient w.r.t. the rotation matrix back onto the raw
/// (unnormalized) quaternion `[w, x, y, z]` of [`matrix_from_quaternion`].
pub fn quaternion_gradient(q: &[f64; 4], grad_r: &Matrix3<f64>) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let g = grad_r;
    // dR/dw, dR/dx, dR/dy, dR/dz of the unit-quaternion polynomial form.
    let dw = Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dx = Matrix3::new(
        0.0,
        2.0 * y,
        2.0 * z,
        2.0 * y,
        -4.0 * x,
        -2.0 * w,
        2.0 * z,
        2.0 * w,
        -4.0 * x,
    );
    let dy = Matrix3::new(
        -4.0 * y,
        2.0 * x,
        2.0 * w,
        2.0 * x,
        0.0,
        2.0 * z,
        -2.0 * w,
        2.0 * z,
        -4.0 * y,
    );
    let dz = Matrix3::new(
        -4.0 * z,
        -2.0 * w,
        2.0 * x,
        2.0 * w,
        -4.0 * z,
        2.0 * y,
        2.0 * x,
        2.0 * y,
        0.0,
    );
    let gu = [
        g.component_mul(&dw).sum(),
        g.component_mul(&dx).sum(),
        g.component_mul(&dy).sum(),
        g.component_mul(&dz).sum(),
    ];
    let unit = [w, x, y, z];
    let radial: f64 = gu.iter().zip(unit.iter()).map(|(a, b)| a * b).sum();
    let mut out = [0.0; 4];
    for k in 0..4 {
        out[k] = (gu[k] - radial * unit[k]) / n;
    }
    out
}
