//! Pinhole camera geometry: back-projection, rigid transforms, projection,
//! frustum membership and depth-agreement scoring.
//!
//! Conventions used throughout the crate:
//!
//! - Pixel `(u, v)` has its center at integer coordinates; `u` indexes
//!   columns, `v` rows, and rasters are stored row-major.
//! - Poses are world-from-camera: `p_world = R * p_cam + t`.
//! - The camera looks down `+z`; the frustum is the positive-depth half-space
//!   intersected with the half-open image rectangle `[0, width) x [0, height)`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum depth (meters) for a point to count as in front of the camera.
pub const DEFAULT_Z_NEAR: f64 = 1e-4;
/// Tolerance below the `0` image bound. A pixel in column or row 0 reprojects
/// to `-1e-16` or so after a round trip; without slack a frame would not fully
/// overlap itself. The upper bound stays exact.
pub const LOWER_BOUND_SLACK: f64 = 1e-9;

/// Default relative tolerance for depth agreement.
pub const DEFAULT_DEPTH_REL_TOL: f64 = 0.05;

/// Orthonormality tolerance for poses built in memory.
pub const POSE_TOLERANCE: f64 = 1e-6;

pub type Point3 = Vector3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation is not orthonormal (max |RᵀR - I| = {deviation:.3e}, det = {det:.6})")]
    NonOrthonormal { deviation: f64, det: f64 },
    #[error("non-finite pose entry")]
    NonFinitePose,
    #[error("dimension mismatch: {what} is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    DimensionMismatch {
        what: &'static str,
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("raster data length {len} does not match {width}x{height}")]
    RasterLength {
        len: usize,
        width: usize,
        height: usize,
    },
    #[error("point cloud is empty")]
    EmptyCloud,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
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

    /// Intrinsics with the principal point at the image center.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Self, GeometryError> {
        Self::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx.is_finite() && self.fx > 0.0 && self.fy.is_finite() && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive and finite (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(
                "principal point must be finite".into(),
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "image size must be at least 1x1 (got {}x{})",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Pinhole projection. `None` when the point is not strictly in front of
    /// `z_near` or is non-finite.
    pub fn project_with_near(&self, p: &Point3, z_near: f64) -> Option<(f64, f64)> {
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) || p.z <= z_near {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    pub fn project(&self, p: &Point3) -> Option<(f64, f64)> {
        self.project_with_near(p, DEFAULT_Z_NEAR)
    }

    /// Camera-frame point at pixel `(u, v)` with depth `z`.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Point3 {
        Vector3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    /// Half-open image bounds test on continuous pixel coordinates, with
    /// [`LOWER_BOUND_SLACK`] below zero.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= -LOWER_BOUND_SLACK
            && u < self.width as f64
            && v >= -LOWER_BOUND_SLACK
            && v < self.height as f64
    }

    /// Nearest pixel for continuous coordinates, if inside the raster.
    pub fn nearest_pixel(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        let (ur, vr) = (u.round(), v.round());
        if ur < 0.0 || vr < 0.0 || ur >= self.width as f64 || vr >= self.height as f64 {
            return None;
        }
        Some((ur as usize, vr as usize))
    }
}

/// World-from-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        Self::with_tolerance(rotation, translation, POSE_TOLERANCE)
    }

    /// Builds a pose, checking `RᵀR = I` and `det R = +1` within `tol`.
    pub fn with_tolerance(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        tol: f64,
    ) -> Result<Self, GeometryError> {
        if rotation
            .iter()
            .chain(translation.iter())
            .any(|x| !x.is_finite())
        {
            return Err(GeometryError::NonFinitePose);
        }
        let deviation = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        let det = rotation.determinant();
        if deviation > tol || (det - 1.0).abs() > tol {
            return Err(GeometryError::NonOrthonormal { deviation, det });
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Camera at `eye` looking at `target`, image `v` axis aligned with the
    /// projection of `-up`.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        let z = (target - eye).normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-9 || !z.iter().all(|c| c.is_finite()) {
            return Err(GeometryError::NonFinitePose);
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_columns(&[x, y, z]);
        Self::new(rotation, eye)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn to_world(&self, p_cam: &Point3) -> Point3 {
        self.rotation * p_cam + self.translation
    }

    pub fn to_camera(&self, p_world: &Point3) -> Point3 {
        self.rotation.transpose() * (p_world - self.translation)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &CameraPose) -> CameraPose {
        CameraPose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> CameraPose {
        let rt = self.rotation.transpose();
        CameraPose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Row-major 4x4 homogeneous matrix.
    pub fn to_matrix4(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }
}

/// Metric depth raster. Zero and non-finite values mark invalid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self, GeometryError> {
        if values.len() != width * height {
            return Err(GeometryError::RasterLength {
                len: values.len(),
                width,
                height,
            });
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            values: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, u: usize, v: usize) -> f32 {
        self.values[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, depth: f32) {
        self.values[v * self.width + u] = depth;
    }

    /// Depth at `(u, v)` if it is finite and positive.
    pub fn valid(&self, u: usize, v: usize) -> Option<f64> {
        let d = self.get(u, v);
        (d.is_finite() && d > 0.0).then_some(d as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self, GeometryError> {
        if data.len() != width * height {
            return Err(GeometryError::RasterLength {
                len: data.len(),
                width,
                height,
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    /// Builds a mask from a predicate on `(u, v)`.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                data.push(f(u, v));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, u: usize, v: usize) -> bool {
        self.data[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, on: bool) {
        self.data[v * self.width + u] = on;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// `(|A ∩ B|, |A ∪ B|)`; the caller checks shapes.
    pub fn intersection_union(&self, other: &BinaryMask) -> (usize, usize) {
        self.data
            .iter()
            .zip(&other.data)
            .fold((0, 0), |(i, u), (&a, &b)| {
                (i + (a && b) as usize, u + (a || b) as usize)
            })
    }

    /// Foreground pixel coordinates in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i % w, i / w))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReferenceFrame {
    /// Camera frame, optionally tagged with a frame index.
    Camera(Option<usize>),
    World,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub frame: ReferenceFrame,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>, frame: ReferenceFrame) -> Self {
        Self { points, frame }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn in_frame(mut self, frame: ReferenceFrame) -> Self {
        self.frame = frame;
        self
    }
}

/// A back-projected mask together with the number of masked pixels that had
/// no usable depth.
#[derive(Debug, Clone, PartialEq)]
pub struct BackProjection {
    pub cloud: PointCloud,
    pub skipped_invalid_depth: usize,
}

fn check_dims(
    what: &'static str,
    w: usize,
    h: usize,
    intr: &CameraIntrinsics,
) -> Result<(), GeometryError> {
    if w != intr.width || h != intr.height {
        return Err(GeometryError::DimensionMismatch {
            what,
            got_w: w,
            got_h: h,
            want_w: intr.width,
            want_h: intr.height,
        });
    }
    Ok(())
}

/// Lifts every masked pixel with valid depth into the camera frame.
pub fn back_project(
    mask: &BinaryMask,
    depth: &DepthMap,
    intr: &CameraIntrinsics,
) -> Result<BackProjection, GeometryError> {
    check_dims("mask", mask.width, mask.height, intr)?;
    check_dims("depth", depth.width, depth.height, intr)?;
    let mut points = Vec::new();
    let mut skipped = 0;
    for (u, v) in mask.pixels() {
        match depth.valid(u, v) {
            Some(z) => points.push(intr.unproject(u as f64, v as f64, z)),
            None => skipped += 1,
        }
    }
    Ok(BackProjection {
        cloud: PointCloud::new(points, ReferenceFrame::Camera(None)),
        skipped_invalid_depth: skipped,
    })
}

/// Relative transform taking `src` camera coordinates to `dst` camera
/// coordinates: `p' = R_dstᵀ (R_src p + t_src − t_dst)`.
pub fn relative_pose(src: &CameraPose, dst: &CameraPose) -> CameraPose {
    dst.inverse().compose(src)
}

pub fn transform_points(pc: &PointCloud, src: &CameraPose, dst: &CameraPose) -> PointCloud {
    let rel = relative_pose(src, dst);
    let points = pc.points.iter().map(|p| rel.to_world(p)).collect();
    PointCloud::new(points, ReferenceFrame::Camera(None))
}

pub fn in_frustum_with_near(p: &Point3, intr: &CameraIntrinsics, z_near: f64) -> bool {
    intr.project_with_near(p, z_near)
        .is_some_and(|(u, v)| intr.contains(u, v))
}

pub fn in_frustum(p: &Point3, intr: &CameraIntrinsics) -> bool {
    in_frustum_with_near(p, intr, DEFAULT_Z_NEAR)
}

/// A posed, calibrated view with depth.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrame {
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
    pub depth: DepthMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapRatio {
    pub ratio: f64,
    pub inside: usize,
    /// Masked pixels with valid depth in the candidate frame.
    pub total: usize,
    /// Set when `total == 0` and the ratio was defaulted to zero.
    pub degenerate: bool,
}

/// Fraction of a candidate's masked 3D points that land inside the reference
/// camera's frustum. Masked pixels without valid depth are excluded from both
/// counts.
pub fn frustum_overlap_ratio(
    candidate: &CameraFrame,
    mask: &BinaryMask,
    reference_intr: &CameraIntrinsics,
    reference_pose: &CameraPose,
) -> Result<OverlapRatio, GeometryError> {
    let lifted = back_project(mask, &candidate.depth, &candidate.intrinsics)?;
    let total = lifted.cloud.len();
    if total == 0 {
        return Ok(OverlapRatio {
            ratio: 0.0,
            inside: 0,
            total: 0,
            degenerate: true,
        });
    }
    // Through world coordinates rather than a composed relative pose, so the
    // arithmetic is the same as a per-point loop and boundary points agree.
    let inside = lifted
        .cloud
        .points
        .iter()
        .filter(|p| {
            in_frustum(
                &reference_pose.to_camera(&candidate.pose.to_world(p)),
                reference_intr,
            )
        })
        .count();
    Ok(OverlapRatio {
        ratio: inside as f64 / total as f64,
        inside,
        total,
        degenerate: false,
    })
}

/// Fraction of points whose nearest projected pixel has valid reference depth
/// `d` with `|z − d| ≤ rel_tol · d`.
pub fn depth_agreement_score(
    pc: &PointCloud,
    ref_depth: &DepthMap,
    intr: &CameraIntrinsics,
    rel_tol: f64,
) -> Result<f64, GeometryError> {
    if pc.is_empty() {
        return Err(GeometryError::EmptyCloud);
    }
    check_dims("reference depth", ref_depth.width, ref_depth.height, intr)?;
    let agree = pc
        .points
        .iter()
        .filter(|p| point_agrees(p, ref_depth, intr, rel_tol))
        .count();
    Ok(agree as f64 / pc.len() as f64)
}

pub(crate) fn point_agrees(
    p: &Point3,
    ref_depth: &DepthMap,
    intr: &CameraIntrinsics,
    rel_tol: f64,
) -> bool {
    let Some((u, v)) = intr.project(p) else {
        return false;
    };
    let Some((pu, pv)) = intr.nearest_pixel(u, v) else {
        return false;
    };
    match ref_depth.valid(pu, pv) {
        Some(d) => (p.z - d).abs() <= rel_tol * d,
        None => false,
    }
}
